#include "bedkit/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "bedkit/error.hpp"

namespace bedkit::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename Enum, std::size_t K>
using NameTable = std::array<std::pair<std::string_view, Enum>, K>;

constexpr NameTable<ExperimentKind, 5> kKindNames{{{"eig", ExperimentKind::kEig},
                                                   {"sweep", ExperimentKind::kSweep},
                                                   {"convergence", ExperimentKind::kConvergence},
                                                   {"scaling", ExperimentKind::kScaling},
                                                   {"diagnostics", ExperimentKind::kDiagnostics}}};
constexpr NameTable<EigMode, 2> kModeNames{{{"marginal", EigMode::kMarginal}, {"joint", EigMode::kJoint}}};
constexpr NameTable<Format, 2> kFormatNames{{{"csv", Format::kCsv}, {"jsonl", Format::kJsonl}}};
constexpr NameTable<Allocation, 3> kAllocationNames{{{"fixed_ratio", Allocation::kFixedRatio},
                                                     {"fixed_n", Allocation::kFixedN},
                                                     {"fixed_m", Allocation::kFixedM}}};
constexpr NameTable<model::Coupling, 3> kCouplingNames{
    {{"none", model::Coupling::kNone}, {"corners", model::Coupling::kCorners}, {"dense", model::Coupling::kDense}}};

template <typename Enum, std::size_t K>
Enum lookup(std::string_view s, const NameTable<Enum, K>& table, std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

template <typename Enum, std::size_t K>
std::string_view name_of(Enum e, const NameTable<Enum, K>& table) {
  for (const auto& [name, value] : table) {
    if (value == e) return name;
  }
  return "?";
}

[[noreturn]] void config_error(const std::string& path, const std::string& msg) {
  throw Error(ErrorCode::kInvalidConfig, "at " + path + ": " + msg);
}

// Walks a JSON object, rejecting unknown keys and reporting the path of bad values.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_.empty() ? "/" : path_, "expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) config_error(at(key), "unknown key");
    }
  }

  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }
  [[nodiscard]] std::string at(std::string_view key) const { return path_ + "/" + std::string(key); }
  [[nodiscard]] const nlohmann::json& raw(const char* key) const { return j_.at(key); }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_integral_v<T>) {
        if (v.is_number_integer()) {
          out = v.get<T>();
        } else if (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>()) {
          out = static_cast<T>(v.get<double>());
        } else {
          throw std::invalid_argument("expected an integer");
        }
      } else {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        out = v.get<std::string>();
      }
    } catch (const std::exception& e) {
      config_error(at(key), e.what());
    }
  }

  template <typename Fn>
  auto parsed(const char* key, Fn fn) const {
    std::string s;
    get(key, s);
    try {
      return fn(s);
    } catch (const Error& e) {
      config_error(at(key), e.message());
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

std::vector<double> number_list(const nlohmann::json& v, const std::string& path) {
  if (!v.is_array()) config_error(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) config_error(path + "/" + std::to_string(i), "expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

EstimatorSpec parse_estimator(const nlohmann::json& j, const std::string& path) {
  const Reader r(j, path);
  r.allow({"id", "label", "N", "M", "M1", "M2", "nu", "pruning", "ordering", "cond_bias", "tempering_ess", "ratio"});
  EstimatorSpec spec;
  auto& c = spec.config;
  std::string id = "lmis";
  r.get("id", id);
  try {
    if (id != "closed_form") c.biasing = estimator::parse_biasing_mode(id);
  } catch (const Error& e) {
    config_error(r.at("id"), e.message());
  }
  spec.label = id;
  r.get("label", spec.label);
  if (id == "closed_form") {
    r.allow({"id", "label"});
    spec.closed_form = true;
    return spec;
  }
  r.get("N", c.N);
  std::int64_t m = c.M1;
  r.get("M", m);
  c.M1 = m;
  c.M2 = m;
  r.get("M1", c.M1);
  r.get("M2", c.M2);
  r.get("nu", c.nu);
  r.get("tempering_ess", c.tempering_ess);
  if (r.has("pruning")) c.pruning = r.parsed("pruning", estimator::parse_pruning);
  if (r.has("ordering")) c.ordering = r.parsed("ordering", estimator::parse_ordering);
  if (r.has("cond_bias")) c.cond_bias = r.parsed("cond_bias", estimator::parse_cond_bias);
  // Presets: prior biasing favours M = 100 N, LMIS favours N = 100 M.
  spec.ratio = c.biasing == estimator::BiasingMode::kPrior ? 100.0 : 0.01;
  r.get("ratio", spec.ratio);
  if (c.N < 1) config_error(r.at("N"), "must be >= 1");
  if (c.M1 < 1) config_error(r.at(r.has("M1") ? "M1" : "M"), "must be >= 1");
  if (c.M2 < 1) config_error(r.at(r.has("M2") ? "M2" : "M"), "must be >= 1");
  if (!(c.nu > 0.0)) config_error(r.at("nu"), "must be positive");
  try {
    c.validate();
  } catch (const Error& e) {
    config_error(path, e.message());
  }
  if (!(spec.ratio > 0.0)) config_error(r.at("ratio"), "must be positive");
  return spec;
}

std::string cell(const std::vector<std::string>& cells, std::size_t i) {
  if (i >= cells.size()) throw Error(ErrorCode::kIoError, "row has too few columns");
  return cells[i];
}

double parse_double(std::string_view s) {
  if (s == "nan" || s.empty()) return kNaN;
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kIoError, "bad number '" + std::string(s) + "'");
  }
  return v;
}

template <typename T>
T parse_int(std::string_view s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kIoError, "bad integer '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::int64_t inner_budget(const model::Model& m, std::int64_t N, std::int64_t M1, std::int64_t M2) {
  return N * (M1 + (m.n_eta() > 0 ? M2 : 0));
}

}  // namespace

std::string_view to_string(ExperimentKind k) { return name_of(k, kKindNames); }
std::string_view to_string(EigMode m) { return name_of(m, kModeNames); }
std::string_view to_string(Format f) { return name_of(f, kFormatNames); }
std::string_view to_string(Allocation a) { return name_of(a, kAllocationNames); }
ExperimentKind parse_kind(std::string_view s) { return lookup(s, kKindNames, "experiment"); }
EigMode parse_mode(std::string_view s) { return lookup(s, kModeNames, "mode"); }
Format parse_format(std::string_view s) { return lookup(s, kFormatNames, "format"); }
Allocation parse_allocation(std::string_view s) { return lookup(s, kAllocationNames, "allocation"); }

std::unique_ptr<model::Model> make_model(const ModelSpec& spec, EigMode mode) {
  std::unique_ptr<model::Model> m;
  if (spec.id == "linear_gaussian") {
    model::LinearGaussianModel::Params p;
    p.n = spec.n;
    p.gain = spec.k;
    p.sigma = spec.sigma;
    p.coupling = spec.coupling.value_or(model::default_coupling(spec.n));
    m = std::make_unique<model::LinearGaussianModel>(p);
  } else if (spec.id == "mossbauer") {
    model::MossbauerModel::Params p;
    p.n_d = spec.n_d;
    p.sigma = spec.sigma;
    const auto interest = model::parse_mossbauer_param(spec.interest);
    if (!interest) throw Error(ErrorCode::kInvalidConfig, "unknown Mossbauer parameter '" + spec.interest + "'");
    p.interest = *interest;
    m = std::make_unique<model::MossbauerModel>(p);
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown model id '" + spec.id + "'");
  }
  if (mode == EigMode::kJoint) return m->with_interest_dim(m->n_params());
  return m;
}

std::vector<Vector> DesignGrid::expand() const {
  if (!points.empty()) return points;
  std::vector<Vector> out;
  if (axes.empty()) return out;
  std::vector<std::int64_t> idx(axes.size(), 0);
  const auto dim = static_cast<Eigen::Index>(axes.size());
  while (true) {
    Vector d(dim);
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const auto& ax = axes[a];
      d[static_cast<Eigen::Index>(a)] =
          ax.steps == 1 ? ax.lo
                        : ax.lo + (ax.hi - ax.lo) * static_cast<double>(idx[a]) / static_cast<double>(ax.steps - 1);
    }
    out.push_back(std::move(d));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < axes[a].steps) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
  }
}

void ExperimentConfig::validate() const {
  if (replicates < 1) config_error("/replicates", "must be >= 1");
  if (threads < 1) config_error("/threads", "must be >= 1");
  if (estimators.empty()) config_error("/estimators", "at least one estimator is required");
  for (std::size_t i = 0; i < estimators.size(); ++i) {
    try {
      estimators[i].config.validate();
    } catch (const Error& e) {
      config_error("/estimators/" + std::to_string(i), e.message());
    }
  }
  for (std::size_t a = 0; a < design.axes.size(); ++a) {
    const auto& ax = design.axes[a];
    if (ax.steps < 1) config_error("/design/grid/" + std::to_string(a) + "/steps", "must be >= 1");
    if (!(ax.lo <= ax.hi)) config_error("/design/grid/" + std::to_string(a), "lo must be <= hi");
  }
  const auto designs = design.expand();
  if (designs.empty()) config_error("/design", "grid is empty");
  std::unique_ptr<model::Model> m;
  try {
    m = make_model(model, mode);
  } catch (const Error& e) {
    config_error("/model", e.message());
  }
  for (std::size_t i = 0; i < designs.size(); ++i) {
    try {
      m->check_design(designs[i]);
    } catch (const Error& e) {
      config_error("/design", "point " + std::to_string(i) + ": " + e.message());
    }
  }
  for (std::size_t i = 0; i < estimators.size(); ++i) {
    if ((estimators[i].closed_form || estimators[i].config.biasing == estimator::BiasingMode::kExactOracle) &&
        !dynamic_cast<const model::LinearGaussianModel*>(m.get())) {
      config_error("/estimators/" + std::to_string(i) + "/id", "needs the linear_gaussian model");
    }
  }
  if (kind == ExperimentKind::kDiagnostics) {
    for (std::size_t i = 0; i < estimators.size(); ++i) {
      if (estimators[i].closed_form) config_error("/estimators/" + std::to_string(i) + "/id", "nothing to diagnose");
    }
  }
  if (kind == ExperimentKind::kConvergence) {
    if (convergence.budgets.empty()) config_error("/convergence/budgets", "at least one budget is required");
    if (convergence.allocation != Allocation::kFixedRatio && convergence.fixed < 1) {
      config_error("/convergence/fixed", "must be >= 1 for fixed_n / fixed_m");
    }
    for (const double w : convergence.budgets) {
      if (!(w >= 8.0)) config_error("/convergence/budgets", "budgets must be >= 8");
    }
  }
  if (kind == ExperimentKind::kScaling) {
    if (scaling.budgets.empty()) config_error("/scaling/budgets", "at least one budget is required");
    if (!(scaling.anchor_budget >= 8.0)) config_error("/scaling/anchor_budget", "must be >= 8");
    if (!(scaling.anchor_ratio > 0.0)) config_error("/scaling/anchor_ratio", "must be positive");
    for (const double w : scaling.budgets) {
      if (!(w >= 8.0)) config_error("/scaling/budgets", "budgets must be >= 8");
    }
    for (std::size_t i = 0; i < estimators.size(); ++i) {
      if (estimators[i].closed_form || estimators[i].config.biasing != estimator::BiasingMode::kPrior) {
        config_error("/estimators/" + std::to_string(i) + "/id", "scaling studies use the prior estimator");
      }
    }
  }
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  const Reader r(j, "");
  r.allow({"experiment", "model", "mode", "estimators", "design", "replicates", "seed", "threads", "output",
           "convergence", "scaling", "reference"});
  ExperimentConfig c;
  if (r.has("experiment")) c.kind = r.parsed("experiment", parse_kind);
  if (r.has("mode")) c.mode = r.parsed("mode", parse_mode);
  r.get("replicates", c.replicates);
  r.get("seed", c.seed);
  r.get("threads", c.threads);

  if (r.has("model")) {
    const Reader m(r.raw("model"), "/model");
    m.allow({"id", "n", "k", "sigma", "coupling", "interest", "n_d"});
    m.get("id", c.model.id);
    if (c.model.id != "linear_gaussian" && c.model.id != "mossbauer") {
      config_error("/model/id", "unknown model id '" + c.model.id + "'");
    }
    if (c.model.id == "mossbauer") c.model.sigma = 0.1;
    m.get("n", c.model.n);
    m.get("k", c.model.k);
    m.get("sigma", c.model.sigma);
    if (m.has("coupling")) {
      c.model.coupling = m.parsed("coupling", [](const std::string& s) { return lookup(s, kCouplingNames, "coupling"); });
    }
    m.get("interest", c.model.interest);
    m.get("n_d", c.model.n_d);
  }

  if (r.has("estimators")) {
    const auto& arr = r.raw("estimators");
    if (!arr.is_array()) config_error("/estimators", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      c.estimators.push_back(parse_estimator(arr[i], "/estimators/" + std::to_string(i)));
    }
  } else {
    c.estimators.push_back(EstimatorSpec{"lmis", {}, 0.01});
  }

  if (r.has("design")) {
    const Reader d(r.raw("design"), "/design");
    d.allow({"grid", "points"});
    if (d.has("grid")) {
      const auto& g = d.raw("grid");
      if (!g.is_array()) config_error("/design/grid", "expected an array of {lo, hi, steps}");
      for (std::size_t a = 0; a < g.size(); ++a) {
        const Reader ax(g[a], "/design/grid/" + std::to_string(a));
        ax.allow({"lo", "hi", "steps"});
        GridAxis axis;
        ax.get("lo", axis.lo);
        axis.hi = axis.lo;
        ax.get("hi", axis.hi);
        ax.get("steps", axis.steps);
        c.design.axes.push_back(axis);
      }
    }
    if (d.has("points")) {
      const auto& pts = d.raw("points");
      if (!pts.is_array()) config_error("/design/points", "expected an array of arrays");
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto path = "/design/points/" + std::to_string(i);
        const auto v = pts[i].is_number() ? std::vector<double>{pts[i].get<double>()} : number_list(pts[i], path);
        c.design.points.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
      }
    }
  }
  if (c.design.axes.empty() && c.design.points.empty()) {
    // Default: the model's whole design box, 11 steps per coordinate.
    try {
      const auto m = make_model(c.model, c.mode);
      for (Eigen::Index i = 0; i < m->n_d(); ++i) c.design.axes.push_back({m->bounds().lo[i], m->bounds().hi[i], 11});
    } catch (const Error& e) {
      config_error("/model", e.message());
    }
  }

  if (r.has("output")) {
    const Reader o(r.raw("output"), "/output");
    o.allow({"path", "format", "summary"});
    o.get("path", c.output_path);
    o.get("summary", c.summary_path);
    if (o.has("format")) c.format = o.parsed("format", parse_format);
  }
  if (r.has("convergence")) {
    const Reader v(r.raw("convergence"), "/convergence");
    v.allow({"budgets", "allocation", "fixed"});
    if (v.has("budgets")) c.convergence.budgets = number_list(v.raw("budgets"), "/convergence/budgets");
    if (v.has("allocation")) c.convergence.allocation = v.parsed("allocation", parse_allocation);
    v.get("fixed", c.convergence.fixed);
  }
  if (r.has("scaling")) {
    const Reader s(r.raw("scaling"), "/scaling");
    s.allow({"anchor_budget", "anchor_ratio", "budgets"});
    s.get("anchor_budget", c.scaling.anchor_budget);
    s.get("anchor_ratio", c.scaling.anchor_ratio);
    if (s.has("budgets")) c.scaling.budgets = number_list(s.raw("budgets"), "/scaling/budgets");
  }
  if (r.has("reference")) {
    const Reader s(r.raw("reference"), "/reference");
    s.allow({"budget", "ratio", "seed"});
    s.get("budget", c.reference.budget);
    s.get("ratio", c.reference.ratio);
    s.get("seed", c.reference.seed);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kInvalidConfig, "at /: " + std::string(e.what()));
  }
  return parse_config(j);
}

CessSummary summarize_cess(const std::vector<double>& values) {
  std::vector<double> v;
  for (const double x : values) {
    if (!std::isnan(x)) v.push_back(x);
  }
  if (v.empty()) return {kNaN, kNaN, kNaN};
  CessSummary s;
  double sum = 0.0;
  for (const double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  s.median = v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  s.min = v.front();
  return s;
}

ResultRow run_unit(const model::Model& model, const Vector& design, std::size_t design_index,
                   const EstimatorSpec& spec, EigMode mode, std::uint64_t seed, std::int64_t replicate,
                   double eig_ref, estimator::EigEstimate* keep) {
  if (spec.closed_form) {
    ResultRow row;
    row.design = design;
    row.design_index = design_index;
    row.estimator = spec.label;
    row.mode = mode;
    row.replicate = replicate;
    row.eig_hat = eig_ref;
    row.eig_ref = eig_ref;
    row.cess_marg = row.cess_cond = {kNaN, kNaN, kNaN};
    return row;
  }
  estimator::EstimatorConfig cfg = spec.config;
  cfg.seed = seed;
  cfg.replicate = static_cast<std::uint64_t>(replicate);
  cfg.design_index = design_index;
  estimator::EigEstimate est = estimator::estimate_eig(model, design, cfg);
  ResultRow row;
  row.design = design;
  row.design_index = design_index;
  row.estimator = spec.label;
  row.mode = mode;
  row.N = cfg.N;
  row.M1 = cfg.M1;
  row.M2 = cfg.M2;
  row.W = inner_budget(model, cfg.N, cfg.M1, cfg.M2);
  row.replicate = replicate;
  row.eig_hat = est.value;
  row.eig_ref = eig_ref;
  row.cess_marg = summarize_cess(est.cess_marg);
  row.cess_cond = summarize_cess(est.cess_cond);
  row.model_evals = est.model_evals;
  row.wall_ms = est.wall_ms;
  row.fallback_count = est.fallback_count;
  if (keep != nullptr) *keep = std::move(est);
  return row;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          task(i);
        } catch (...) {
          const std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::optional<double> closed_form_reference(const model::Model& model, const Vector& design, EigMode mode) {
  const auto* lg = dynamic_cast<const model::LinearGaussianModel*>(&model);
  if (lg == nullptr) return std::nullopt;
  // `model` is already re-split in joint mode, so its interest block is the right one.
  (void)mode;
  return model::lg_eig_closed_form(*lg, design[0], EigMode::kMarginal);
}

std::size_t argmax_design(const std::vector<Vector>& designs, const std::vector<double>& values) {
  if (designs.empty() || designs.size() != values.size()) throw Error(ErrorCode::kEmptyInput, "argmax: bad input");
  std::size_t best = 0;
  const auto lex_less = [](const Vector& a, const Vector& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  };
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best] || (values[i] == values[best] && lex_less(designs[i], designs[best]))) best = i;
  }
  return best;
}

SweepResult run_sweep(const ExperimentConfig& config) {
  config.validate();
  const auto model = make_model(config.model, config.mode);
  const auto designs = config.design.expand();
  const auto n_est = config.estimators.size();
  const auto reps = static_cast<std::size_t>(config.replicates);

  SweepResult out;
  out.summary.designs = designs;
  bool have_ref = true;
  for (const auto& d : designs) {
    const auto ref = closed_form_reference(*model, d, config.mode);
    out.summary.reference.push_back(ref.value_or(kNaN));
    have_ref = have_ref && ref.has_value();
  }
  if (have_ref) out.summary.reference_argmax = argmax_design(designs, out.summary.reference);

  const std::size_t units = designs.size() * n_est * reps;
  out.rows.resize(units);
  parallel_for(units, config.threads, [&](std::size_t u) {
    const std::size_t r = u % reps;
    const std::size_t e = (u / reps) % n_est;
    const std::size_t di = u / (reps * n_est);
    out.rows[u] = run_unit(*model, designs[di], di, config.estimators[e], config.mode, config.seed,
                           static_cast<std::int64_t>(r), out.summary.reference[di]);
  });

  for (std::size_t e = 0; e < n_est; ++e) {
    SweepSummary::PerEstimator pe;
    pe.estimator = config.estimators[e].label;
    pe.mean_eig.assign(designs.size(), 0.0);
    for (std::size_t r = 0; r < reps; ++r) {
      std::vector<double> vals(designs.size());
      for (std::size_t di = 0; di < designs.size(); ++di) {
        const double v = out.rows[(di * n_est + e) * reps + r].eig_hat;
        vals[di] = v;
        pe.mean_eig[di] += v / static_cast<double>(reps);
      }
      pe.argmax_per_replicate.push_back(argmax_design(designs, vals));
    }
    pe.mean_argmax = argmax_design(designs, pe.mean_eig);
    out.summary.estimators.push_back(std::move(pe));
  }
  return out;
}

std::pair<double, std::string> study_reference(const ExperimentConfig& config, const model::Model& model,
                                               const Vector& design) {
  if (const auto ref = closed_form_reference(model, design, config.mode)) return {*ref, "closed_form"};
  const auto plan = diagnostics::fixed_ratio_plan(config.reference.ratio, config.reference.budget);
  EstimatorSpec spec;
  spec.label = "reference";
  spec.config.biasing = estimator::BiasingMode::kLmis;
  spec.config.N = plan.N;
  spec.config.M1 = plan.M;
  spec.config.M2 = plan.M;
  const ResultRow row = run_unit(model, design, 0, spec, config.mode, config.reference.seed, 0, kNaN);
  std::ostringstream src;
  src << "lmis N=" << plan.N << " M=" << plan.M << " seed=" << config.reference.seed;
  return {row.eig_hat, src.str()};
}

namespace {

struct Allocated {
  std::int64_t N;
  std::int64_t M;
  std::string allocation;
};

StudyResult run_budget_study(const ExperimentConfig& config,
                             const std::vector<std::pair<const EstimatorSpec*, std::vector<Allocated>>>& plans,
                             const std::vector<std::string>& labels) {
  const auto model = make_model(config.model, config.mode);
  const Vector design = config.design.expand().front();
  StudyResult out;
  std::tie(out.reference, out.reference_source) = study_reference(config, *model, design);

  struct Unit {
    std::size_t series;
    std::size_t budget;
    std::int64_t replicate;
  };
  std::vector<Unit> units;
  for (std::size_t s = 0; s < plans.size(); ++s) {
    for (std::size_t b = 0; b < plans[s].second.size(); ++b) {
      for (std::int64_t r = 0; r < config.replicates; ++r) units.push_back({s, b, r});
    }
  }
  out.rows.resize(units.size());
  parallel_for(units.size(), config.threads, [&](std::size_t u) {
    const Unit& unit = units[u];
    EstimatorSpec spec = *plans[unit.series].first;
    const Allocated& a = plans[unit.series].second[unit.budget];
    spec.label = labels[unit.series];
    spec.config.N = a.N;
    spec.config.M1 = a.M;
    spec.config.M2 = a.M;
    out.rows[u] = run_unit(*model, design, 0, spec, config.mode, config.seed, unit.replicate, out.reference);
  });

  std::size_t u = 0;
  for (std::size_t s = 0; s < plans.size(); ++s) {
    for (std::size_t b = 0; b < plans[s].second.size(); ++b) {
      std::vector<double> vals;
      for (std::int64_t r = 0; r < config.replicates; ++r) vals.push_back(out.rows[u++].eig_hat);
      const ResultRow& first = out.rows[u - 1];
      BudgetStats bs;
      bs.estimator = labels[s];
      bs.allocation = plans[s].second[b].allocation;
      bs.W = static_cast<double>(first.W);
      bs.N = first.N;
      bs.M1 = first.M1;
      bs.M2 = first.M2;
      if (vals.size() >= 2) {
        bs.stats = diagnostics::replicate_stats(vals, out.reference);
      } else {
        bs.stats.R = vals.size();
        bs.stats.reference = out.reference;
        bs.stats.mean = vals.front();
        bs.stats.bias = vals.front() - out.reference;
        bs.stats.variance = kNaN;
        bs.stats.mse = bs.stats.bias * bs.stats.bias;
      }
      out.summary.push_back(bs);
    }
  }
  return out;
}

}  // namespace

StudyResult run_convergence(const ExperimentConfig& config) {
  config.validate();
  if (config.kind != ExperimentKind::kConvergence && config.convergence.budgets.empty()) {
    config_error("/convergence/budgets", "at least one budget is required");
  }
  std::vector<std::pair<const EstimatorSpec*, std::vector<Allocated>>> plans;
  std::vector<std::string> labels;
  const auto& cv = config.convergence;
  const std::string alloc(to_string(cv.allocation));
  for (const auto& spec : config.estimators) {
    std::vector<Allocated> a;
    for (const double W : cv.budgets) {
      switch (cv.allocation) {
        case Allocation::kFixedRatio: {
          const auto p = diagnostics::fixed_ratio_plan(spec.ratio, W);
          a.push_back({p.N, p.M, alloc});
          break;
        }
        case Allocation::kFixedN: {
          const auto m = std::max<std::int64_t>(1, static_cast<std::int64_t>(W / (2.0 * static_cast<double>(cv.fixed))));
          a.push_back({cv.fixed, m, alloc});
          break;
        }
        case Allocation::kFixedM: {
          const auto n = std::max<std::int64_t>(1, static_cast<std::int64_t>(W / (2.0 * static_cast<double>(cv.fixed))));
          a.push_back({n, cv.fixed, alloc});
          break;
        }
      }
    }
    plans.emplace_back(&spec, std::move(a));
    labels.push_back(spec.label);
  }
  return run_budget_study(config, plans, labels);
}

StudyResult run_scaling(const ExperimentConfig& config) {
  config.validate();
  if (config.scaling.budgets.empty()) config_error("/scaling/budgets", "at least one budget is required");
  std::vector<std::pair<const EstimatorSpec*, std::vector<Allocated>>> plans;
  std::vector<std::string> labels;
  const auto& sc = config.scaling;
  for (const auto& spec : config.estimators) {
    std::vector<Allocated> fixed;
    std::vector<Allocated> scaled;
    for (const double W : sc.budgets) {
      const auto f = diagnostics::fixed_ratio_plan(sc.anchor_ratio, W);
      const auto s = diagnostics::scaled_ratio_plan(sc.anchor_ratio, sc.anchor_budget, W);
      fixed.push_back({f.N, f.M, "fixed_ratio"});
      scaled.push_back({s.N, s.M, "scaled_ratio"});
    }
    plans.emplace_back(&spec, std::move(fixed));
    labels.push_back(spec.label + "/fixed_ratio");
    plans.emplace_back(&spec, std::move(scaled));
    labels.push_back(spec.label + "/scaled_ratio");
  }
  return run_budget_study(config, plans, labels);
}

DiagnosticsResult run_diagnostics(const ExperimentConfig& config) {
  config.validate();
  const auto model = make_model(config.model, config.mode);
  const auto designs = config.design.expand();
  const auto n_est = config.estimators.size();
  const auto reps = static_cast<std::size_t>(config.replicates);
  const std::size_t units = designs.size() * n_est * reps;
  DiagnosticsResult out;
  out.rows.resize(units);
  out.constants.resize(units);
  parallel_for(units, config.threads, [&](std::size_t u) {
    const std::size_t r = u % reps;
    const std::size_t e = (u / reps) % n_est;
    const std::size_t di = u / (reps * n_est);
    const auto& spec = config.estimators[e];
    estimator::EigEstimate est;
    const double ref = closed_form_reference(*model, designs[di], config.mode).value_or(kNaN);
    out.rows[u] = run_unit(*model, designs[di], di, spec, config.mode, config.seed, static_cast<std::int64_t>(r), ref,
                           &est);
    DiagnosticsRow& d = out.constants[u];
    d.estimator = spec.label;
    d.replicate = static_cast<std::int64_t>(r);
    d.constants = diagnostics::estimate_delta_constants(est);
    const auto& c = spec.config;
    d.predicted_bias = d.constants.predicted_bias(static_cast<double>(c.M1), static_cast<double>(c.M2));
    d.predicted_variance =
        d.constants.predicted_variance(static_cast<double>(c.N), static_cast<double>(c.M1), static_cast<double>(c.M2));
    const double gap = d.constants.C1 - d.constants.C2;
    const double W = std::max(8.0, 2.0 * static_cast<double>(c.N) * static_cast<double>(c.M1));
    if (d.constants.D3 > 0.0) d.plan = diagnostics::optimal_alpha(gap * gap, d.constants.D3, W);
  });
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return {buf.data(), res.ptr};
}

std::string csv_header(std::size_t design_dim) {
  std::string h;
  for (std::size_t i = 0; i < design_dim; ++i) h += "design_" + std::to_string(i) + ",";
  h += "estimator,mode,N,M1,M2,W,replicate,eig_hat,eig_ref,cess_marg_mean,cess_cond_mean,model_evals,wall_ms";
  return h;
}

void emit(const ResultTable& table, Format format, std::ostream& out) {
  if (table.empty()) throw Error(ErrorCode::kEmptyInput, "result table is empty");
  const auto k = static_cast<std::size_t>(table.front().design.size());
  const auto names = split(csv_header(k), ',');
  if (format == Format::kCsv) out << csv_header(k) << '\n';
  for (const auto& row : table) {
    if (static_cast<std::size_t>(row.design.size()) != k) {
      throw Error(ErrorCode::kDimensionMismatch, "rows have different design dimensions");
    }
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < k; ++i) cells.push_back(format_double(row.design[static_cast<Eigen::Index>(i)]));
    cells.push_back(row.estimator);
    cells.emplace_back(to_string(row.mode));
    cells.push_back(std::to_string(row.N));
    cells.push_back(std::to_string(row.M1));
    cells.push_back(std::to_string(row.M2));
    cells.push_back(std::to_string(row.W));
    cells.push_back(std::to_string(row.replicate));
    cells.push_back(format_double(row.eig_hat));
    cells.push_back(format_double(row.eig_ref));
    cells.push_back(format_double(row.cess_marg.mean));
    cells.push_back(format_double(row.cess_cond.mean));
    cells.push_back(std::to_string(row.model_evals));
    cells.push_back(format_double(row.wall_ms));
    if (format == Format::kCsv) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    } else {
      out << '{';
      for (std::size_t i = 0; i < cells.size(); ++i) {
        out << (i ? "," : "") << '"' << names[i] << "\":";
        const bool text = names[i] == "estimator" || names[i] == "mode";
        if (text) {
          out << nlohmann::json(cells[i]).dump();
        } else if (cells[i] == "nan" || cells[i] == "inf" || cells[i] == "-inf") {
          out << "null";
        } else {
          out << cells[i];
        }
      }
      out << '}';
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::kIoError, "write failed");
}

void emit_file(const ResultTable& table, Format format, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIoError, "cannot open '" + path + "' for writing");
  emit(table, format, f);
}

ResultTable parse(std::string_view text, Format format) {
  ResultTable table;
  std::vector<std::string> lines = split(text, '\n');
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (format == Format::kCsv) {
    if (lines.empty()) throw Error(ErrorCode::kIoError, "missing CSV header");
    const auto header = split(lines.front(), ',');
    std::size_t k = 0;
    while (k < header.size() && header[k].rfind("design_", 0) == 0) ++k;
    if (lines.front() != csv_header(k)) throw Error(ErrorCode::kIoError, "unexpected CSV header");
    for (std::size_t li = 1; li < lines.size(); ++li) {
      const auto c = split(lines[li], ',');
      if (c.size() != header.size()) throw Error(ErrorCode::kIoError, "line " + std::to_string(li + 1) + ": bad width");
      ResultRow row;
      row.design.resize(static_cast<Eigen::Index>(k));
      for (std::size_t i = 0; i < k; ++i) row.design[static_cast<Eigen::Index>(i)] = parse_double(c[i]);
      std::size_t i = k;
      row.estimator = cell(c, i++);
      try {
        row.mode = parse_mode(cell(c, i++));
      } catch (const Error& e) {
        throw Error(ErrorCode::kIoError, e.message());
      }
      row.N = parse_int<std::int64_t>(cell(c, i++));
      row.M1 = parse_int<std::int64_t>(cell(c, i++));
      row.M2 = parse_int<std::int64_t>(cell(c, i++));
      row.W = parse_int<std::int64_t>(cell(c, i++));
      row.replicate = parse_int<std::int64_t>(cell(c, i++));
      row.eig_hat = parse_double(cell(c, i++));
      row.eig_ref = parse_double(cell(c, i++));
      row.cess_marg.mean = parse_double(cell(c, i++));
      row.cess_cond.mean = parse_double(cell(c, i++));
      row.model_evals = parse_int<std::uint64_t>(cell(c, i++));
      row.wall_ms = parse_double(cell(c, i++));
      table.push_back(std::move(row));
    }
    return table;
  }
  for (const auto& line : lines) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kIoError, e.what());
    }
    const auto num = [&](const char* key) {
      if (!j.contains(key)) throw Error(ErrorCode::kIoError, std::string("missing key ") + key);
      return j[key].is_null() ? kNaN : j[key].get<double>();
    };
    ResultRow row;
    std::vector<double> d;
    for (std::size_t i = 0; j.contains("design_" + std::to_string(i)); ++i) {
      d.push_back(num(("design_" + std::to_string(i)).c_str()));
    }
    row.design = Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
    row.estimator = j.value("estimator", "");
    row.mode = parse_mode(j.value("mode", "marginal"));
    row.N = j.at("N").get<std::int64_t>();
    row.M1 = j.at("M1").get<std::int64_t>();
    row.M2 = j.at("M2").get<std::int64_t>();
    row.W = j.at("W").get<std::int64_t>();
    row.replicate = j.at("replicate").get<std::int64_t>();
    row.eig_hat = num("eig_hat");
    row.eig_ref = num("eig_ref");
    row.cess_marg.mean = num("cess_marg_mean");
    row.cess_cond.mean = num("cess_cond_mean");
    row.model_evals = j.at("model_evals").get<std::uint64_t>();
    row.wall_ms = num("wall_ms");
    table.push_back(std::move(row));
  }
  return table;
}

void emit_summary(const std::vector<BudgetStats>& summary, double reference, const std::string& source,
                  std::ostream& out) {
  out << "estimator,allocation,W,N,M1,M2,R,reference,reference_source,mean,variance,bias,mse,se_bias,se_variance,"
         "se_mse\n";
  for (const auto& b : summary) {
    const auto& s = b.stats;
    out << b.estimator << ',' << b.allocation << ',' << format_double(b.W) << ',' << b.N << ',' << b.M1 << ','
        << b.M2 << ',' << s.R << ',' << format_double(reference) << ',' << source << ',' << format_double(s.mean)
        << ',' << format_double(s.variance) << ',' << format_double(s.bias) << ',' << format_double(s.mse) << ','
        << format_double(s.se_bias) << ',' << format_double(s.se_variance) << ',' << format_double(s.se_mse) << '\n';
  }
}

void emit_diagnostics(const std::vector<DiagnosticsRow>& rows, std::ostream& out) {
  out << "estimator,replicate,C1,C2,D1,D2,D3,predicted_bias,predicted_variance,optimal_N,optimal_M\n";
  for (const auto& r : rows) {
    const auto& c = r.constants;
    out << r.estimator << ',' << r.replicate << ',' << format_double(c.C1) << ',' << format_double(c.C2) << ','
        << format_double(c.D1) << ',' << format_double(c.D2) << ',' << format_double(c.D3) << ','
        << format_double(r.predicted_bias) << ',' << format_double(r.predicted_variance) << ',' << r.plan.N << ','
        << r.plan.M << '\n';
  }
}

void emit_sweep_summary(const SweepSummary& summary, std::ostream& out) {
  const auto k = summary.designs.empty() ? 0 : static_cast<std::size_t>(summary.designs.front().size());
  for (std::size_t i = 0; i < k; ++i) out << "design_" << i << ',';
  out << "estimator,mean_eig_hat,eig_ref,argmax_replicates,is_mean_argmax,is_ref_argmax\n";
  for (const auto& pe : summary.estimators) {
    for (std::size_t di = 0; di < summary.designs.size(); ++di) {
      for (std::size_t i = 0; i < k; ++i) out << format_double(summary.designs[di][static_cast<Eigen::Index>(i)]) << ',';
      const auto hits = std::count(pe.argmax_per_replicate.begin(), pe.argmax_per_replicate.end(), di);
      out << pe.estimator << ',' << format_double(pe.mean_eig[di]) << ',' << format_double(summary.reference[di])
          << ',' << hits << ',' << (pe.mean_argmax == di ? 1 : 0) << ','
          << (summary.reference_argmax && *summary.reference_argmax == di ? 1 : 0) << '\n';
    }
  }
}

}  // namespace bedkit::harness
