#include "bedkit/estimator.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include "bedkit/error.hpp"

namespace bedkit::estimator {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Candidates whose log-weight upper bound sits this far below the best exact
// log-weight contribute less than exp(-40) each and are skipped.
constexpr double kWeightCutoff = 40.0;
constexpr double kDegenerateWeight = 1.0 - 1e-12;
constexpr double kMinTempering = 1.0 / 1024.0;

std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

template <typename Enum, std::size_t K>
Enum parse_enum(std::string_view s, const std::array<std::pair<std::string_view, Enum>, K>& table,
                std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<std::string_view, BiasingMode>, 3> kBiasingNames{
    {{"prior", BiasingMode::kPrior}, {"lmis", BiasingMode::kLmis}, {"exact_oracle", BiasingMode::kExactOracle}}};
constexpr std::array<std::pair<std::string_view, Pruning>, 3> kPruningNames{
    {{"density", Pruning::kDensity}, {"all", Pruning::kAll}, {"none", Pruning::kNone}}};
constexpr std::array<std::pair<std::string_view, Ordering>, 2> kOrderingNames{
    {{"prior_density_desc", Ordering::kPriorDensityDesc}, {"as_drawn", Ordering::kAsDrawn}}};
constexpr std::array<std::pair<std::string_view, CondBias>, 2> kCondBiasNames{
    {{"t_conditional", CondBias::kTConditional}, {"t_marginal_eta", CondBias::kTMarginalEta}}};

template <typename Enum, std::size_t K>
std::string_view name_of(Enum e, const std::array<std::pair<std::string_view, Enum>, K>& table) {
  for (const auto& [name, value] : table) {
    if (value == e) return name;
  }
  return "?";
}

double finish_logsumexp(const std::vector<double>& v) { return numkit::logsumexp(v); }

}  // namespace

std::string_view to_string(BiasingMode m) { return name_of(m, kBiasingNames); }
std::string_view to_string(Pruning p) { return name_of(p, kPruningNames); }
std::string_view to_string(Ordering o) { return name_of(o, kOrderingNames); }
std::string_view to_string(CondBias c) { return name_of(c, kCondBiasNames); }
BiasingMode parse_biasing_mode(std::string_view s) { return parse_enum(s, kBiasingNames, "estimator"); }
Pruning parse_pruning(std::string_view s) { return parse_enum(s, kPruningNames, "pruning mode"); }
Ordering parse_ordering(std::string_view s) { return parse_enum(s, kOrderingNames, "ordering"); }
CondBias parse_cond_bias(std::string_view s) { return parse_enum(s, kCondBiasNames, "cond_bias"); }

void EstimatorConfig::validate() const {
  if (N < 1 || M1 < 1 || M2 < 1) throw Error(ErrorCode::kInvalidConfig, "N, M1 and M2 must be >= 1");
  if (!(nu > 2.0) || !std::isfinite(nu)) throw Error(ErrorCode::kInvalidConfig, "t dof nu must be finite and > 2");
}

double InnerEstimate::cess() const {
  double s = 0.0;
  for (const double l : log_summands) {
    const double w = std::exp(l - log_estimate - std::log(static_cast<double>(log_summands.size())));
    s += w * w;
  }
  return 1.0 / s;
}

double InnerEstimate::relative_variance() const {
  const auto m = log_summands.size();
  if (m < 2) return std::numeric_limits<double>::quiet_NaN();
  // summand / p^ where p^ = exp(log_estimate) is the sample mean.
  double mean = 0.0;
  for (const double l : log_summands) mean += std::exp(l - log_estimate);
  mean /= static_cast<double>(m);
  double ss = 0.0;
  for (const double l : log_summands) {
    const double r = std::exp(l - log_estimate) - mean;
    ss += r * r;
  }
  return ss / static_cast<double>(m - 1);
}

// Mixture terms this far below the largest contribute under 1e-20 relative.
constexpr double kNegligibleTerm = 46.0;

double MixtureBias::log_density(std::span<const double> x, double log_prior) const {
  constexpr std::size_t kStack = 256;
  std::array<double, kStack> stack;  // NOLINT: written before read
  std::vector<double> heap;
  double* terms = stack.data();
  if (components.size() > kStack) {
    heap.resize(components.size());
    terms = heap.data();
  }
  double mx = kNegInf;
  for (std::size_t j = 0; j < components.size(); ++j) {
    const auto& c = components[j];
    terms[j] = c.log_weight + (c.dist == nullptr ? log_prior : c.dist->log_density(x));
    mx = std::max(mx, terms[j]);
  }
  if (mx == kNegInf) return kNegInf;
  double sum = 0.0;
  for (std::size_t j = 0; j < components.size(); ++j) {
    const double t = terms[j] - mx;
    if (t > -kNegligibleTerm) sum += std::exp(t);
  }
  return mx + std::log(sum);
}

namespace {

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return std::max(a, b) + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

void SampleBank::add(std::size_t i, std::unique_ptr<BankComponent> c) {
  if (i >= components.size()) throw Error(ErrorCode::kInvalidConfig, "bank position out of range");
  if (components[i]) throw Error(ErrorCode::kInvalidConfig, "bank position already filled");
  if (tracks_totals) {
    const auto& q = *c->dist;
    for (std::size_t k = 0; k < prior_samples.size(); ++k) {
      prior_log_total[k] = log_add(prior_log_total[k], q.log_density(as_span(*prior_samples[k])));
    }
    c->log_total = c->log_own;
    for (const auto& other : components) {
      if (!other) continue;
      for (std::size_t k = 0; k < other->samples.size(); ++k) {
        other->log_total[k] = log_add(other->log_total[k], q.log_density(as_span(other->samples[k])));
        c->log_total[k] = log_add(c->log_total[k], other->dist->log_density(as_span(c->samples[k])));
      }
    }
  }
  components[i] = std::move(c);
  ++banked;
}

void SampleBank::track_totals() {
  if (tracks_totals) return;
  const auto total_at = [&](const Vector& x) {
    double t = kNegInf;
    for (const auto& c : components) {
      if (c) t = log_add(t, c->dist->log_density(as_span(x)));
    }
    return t;
  };
  prior_log_total.resize(prior_samples.size());
  for (std::size_t k = 0; k < prior_samples.size(); ++k) prior_log_total[k] = total_at(*prior_samples[k]);
  for (const auto& c : components) {
    if (!c) continue;
    c->log_total.resize(c->samples.size());
    for (std::size_t k = 0; k < c->samples.size(); ++k) c->log_total[k] = total_at(c->samples[k]);
  }
  tracks_totals = true;
}

MixtureBias make_mixture(const SampleBank& bank, std::span<const std::size_t> J, std::int64_t M1) {
  MixtureBias mix;
  const auto n = static_cast<double>(bank.prior_samples.size());
  mix.total = n + static_cast<double>(M1) * static_cast<double>(J.size());
  mix.components.push_back({n, nullptr, std::log(n / mix.total)});
  const double lw = std::log(static_cast<double>(M1) / mix.total);
  for (const std::size_t m : J) {
    mix.components.push_back({static_cast<double>(M1), &bank.components[m]->dist->dist(), lw});
  }
  return mix;
}

std::vector<OuterSample> draw_outer(const Model& model, const Vector& d, std::int64_t N, const StreamFactory& streams,
                                    EvalCounter* counter) {
  if (N < 1) throw Error(ErrorCode::kInvalidConfig, "N must be >= 1");
  model.check_design(d);
  std::vector<OuterSample> out(static_cast<std::size_t>(N));
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng = streams.stream(i, StreamPurpose::kOuter);
    auto& s = out[i];
    s.z = model.sample_prior(rng);
    s.g = model.forward(s.z, d, counter);
    s.y = model.sample_observation(s.g, rng);
    s.log_prior = model.log_prior(as_span(s.z));
    s.drawn_index = i;
  }
  return out;
}

std::vector<OuterSample> order_samples(std::vector<OuterSample> samples) {
  std::stable_sort(samples.begin(), samples.end(),
                   [](const OuterSample& a, const OuterSample& b) { return a.log_prior > b.log_prior; });
  return samples;
}

InnerEstimate estimate_marginal_likelihood(const Model& model, const Vector& y, const Vector& d, const Density& q,
                                           std::int64_t M1, Rng& rng, EvalCounter* counter) {
  if (M1 < 1) throw Error(ErrorCode::kInvalidConfig, "M1 must be >= 1");
  InnerEstimate est;
  const auto m = static_cast<std::size_t>(M1);
  est.log_summands.reserve(m);
  est.samples.reserve(m);
  est.outputs.reserve(m);
  const bool unit_weights = q.is_prior();
  for (std::size_t k = 0; k < m; ++k) {
    Vector z = q.sample(rng);
    Vector g = model.forward(z, d, counter);
    double ls = model.loglike(y, g);
    const double lp = model.log_prior(as_span(z));
    const double lq = unit_weights ? lp : q.log_density(as_span(z));
    if (!unit_weights) ls += lp - lq;
    est.log_summands.push_back(ls);
    est.log_prior.push_back(lp);
    est.log_proposal.push_back(lq);
    est.samples.push_back(std::move(z));
    est.outputs.push_back(std::move(g));
  }
  est.log_estimate = finish_logsumexp(est.log_summands) - std::log(static_cast<double>(m));
  if (est.log_estimate == kNegInf) throw Error(ErrorCode::kAllWeightsZero, "every marginal summand is zero");
  return est;
}

InnerEstimate estimate_conditional_likelihood(const Model& model, const Vector& y, const Vector& theta,
                                              const Vector& g_outer, const Vector& d, const Density& q_cond,
                                              std::int64_t M2, Rng& rng, EvalCounter* counter) {
  InnerEstimate est;
  if (model.n_eta() == 0) {
    est.log_estimate = model.loglike(y, g_outer);
    est.log_summands.push_back(est.log_estimate);
    if (est.log_estimate == kNegInf) throw Error(ErrorCode::kAllWeightsZero, "likelihood is zero");
    return est;
  }
  if (M2 < 1) throw Error(ErrorCode::kInvalidConfig, "M2 must be >= 1");
  if (theta.size() != model.n_theta()) throw Error(ErrorCode::kDimensionMismatch, "theta has wrong size");
  const auto m = static_cast<std::size_t>(M2);
  const bool unit_weights = q_cond.is_prior();
  est.log_summands.reserve(m);
  est.samples.reserve(m);
  Vector z(model.n_params());
  z.head(model.n_theta()) = theta;
  for (std::size_t k = 0; k < m; ++k) {
    const Vector eta = q_cond.sample(rng);
    z.tail(model.n_eta()) = eta;
    const Vector g = model.forward(z, d, counter);
    const double lp = model.log_prior_eta_given_theta(theta, as_span(eta));
    const double lq = unit_weights ? lp : q_cond.log_density(as_span(eta));
    est.log_summands.push_back(model.loglike(y, g) + (unit_weights ? 0.0 : lp - lq));
    est.log_prior.push_back(lp);
    est.log_proposal.push_back(lq);
    est.samples.push_back(eta);
  }
  est.log_estimate = finish_logsumexp(est.log_summands) - std::log(static_cast<double>(m));
  if (est.log_estimate == kNegInf) throw Error(ErrorCode::kAllWeightsZero, "every conditional summand is zero");
  return est;
}

MomentEstimate estimate_posterior_moments(const Model& model, const Vector& y, const SampleBank& bank,
                                          std::span<const std::size_t> J, std::int64_t M1, double tempering_ess) {
  const std::size_t n_prior = bank.prior_samples.size();
  if (n_prior == 0) throw Error(ErrorCode::kEmptyInput, "prior bank is empty");
  const MixtureBias mix = make_mixture(bank, J, M1);
  const double log_ratio = std::log(mix.total / static_cast<double>(n_prior));  // log(L / N)

  struct Candidate {
    const Vector* z;
    double log_prior;
    double ll;
    double ub;     // upper bound on the log-weight from a lower bound on q_post
    double total;  // log sum of every banked q_marg at z, when tracked
  };
  std::vector<Candidate> cand;
  cand.reserve(static_cast<std::size_t>(mix.total));
  const bool totals = bank.tracks_totals;
  for (std::size_t k = 0; k < n_prior; ++k) {
    const double ll = model.loglike(y, *bank.prior_outputs[k]);
    cand.push_back({bank.prior_samples[k], bank.prior_log_density[k], ll, ll + log_ratio,
                    totals ? bank.prior_log_total[k] : kNegInf});
  }
  const double log_share = std::log(static_cast<double>(M1) / mix.total);
  for (const std::size_t m : J) {
    const auto& c = *bank.components[m];
    for (std::size_t k = 0; k < c.samples.size(); ++k) {
      const double ll = model.loglike(y, c.outputs[k]);
      const double a = c.log_prior[k] - log_ratio;
      const double b = log_share + c.log_own[k];
      const double lq_lb = std::max(a, b) + std::log1p(std::exp(-std::abs(a - b)));
      cand.push_back({&c.samples[k], c.log_prior[k], ll, ll + c.log_prior[k] - lq_lb, totals ? c.log_total[k] : kNegInf});
    }
  }

  // Components outside J; with totals tracked the sum over J is the total minus these.
  std::vector<const numkit::Mvt*> in_j;
  std::vector<const numkit::Mvt*> out_j;
  {
    std::vector<bool> mark(bank.components.size(), false);
    for (const std::size_t m : J) {
      mark[m] = true;
      in_j.push_back(&bank.components[m]->dist->dist());
    }
    for (std::size_t m = 0; m < bank.components.size(); ++m) {
      if (bank.components[m] && !mark[m]) out_j.push_back(&bank.components[m]->dist->dist());
    }
  }
  const bool use_complement = totals && out_j.size() < in_j.size();
  const auto log_sum = [](const std::vector<const numkit::Mvt*>& ds, std::span<const double> x) {
    double mx = kNegInf;
    thread_local std::vector<double> terms;
    terms.resize(ds.size());
    for (std::size_t j = 0; j < ds.size(); ++j) {
      terms[j] = ds[j]->log_density(x);
      mx = std::max(mx, terms[j]);
    }
    if (mx == kNegInf) return kNegInf;
    double sum = 0.0;
    for (const double t : terms) {
      if (t - mx > -kNegligibleTerm) sum += std::exp(t - mx);
    }
    return mx + std::log(sum);
  };
  // Past this ratio of excluded to total mass the subtraction loses too many digits.
  const double max_excluded = std::log1p(-1e-6);
  const double log_prior_share = std::log(static_cast<double>(n_prior) / mix.total);

  MomentEstimate out;
  out.L = static_cast<std::int64_t>(cand.size());
  const Eigen::Index p = model.n_params();
  const auto exact_log_weight = [&](const Candidate& c) {
    if (J.empty()) return c.ll;
    const auto x = as_span(*c.z);
    double in = kNegInf;
    bool done = false;
    if (use_complement) {
      const double excluded = log_sum(out_j, x) - c.total;
      if (excluded < max_excluded) {
        in = c.total + std::log1p(-std::exp(excluded));
        done = true;
      }
    }
    if (!done) in = log_sum(in_j, x);
    const double lq = log_add(log_prior_share + c.log_prior, log_share + in);
    return c.ll + c.log_prior - lq;
  };

  const auto best = std::max_element(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.ub < b.ub; });
  std::vector<double> logw(cand.size(), kNegInf);
  std::vector<bool> exact(cand.size(), false);
  double top = kNegInf;
  // Exact log-weights for every candidate whose bound is within `span` of the best.
  const auto resolve = [&](double span) {
    for (std::size_t k = 0; k < cand.size(); ++k) {
      if (!exact[k] && cand[k].ub >= top - span) {
        logw[k] = exact_log_weight(cand[k]);
        exact[k] = true;
      }
    }
  };
  if (best->ub != kNegInf) {
    top = exact_log_weight(*best);
    resolve(kWeightCutoff);
  }
  const double lse = numkit::logsumexp(logw);
  if (lse == kNegInf) {
    out.degenerate = true;
    out.moments = GaussianMoments{Vector::Zero(p), Matrix::Identity(p, p)};
    return out;
  }
  Vector mean = Vector::Zero(p);
  std::vector<double> w(cand.size());
  double sum_sq = 0.0;
  for (std::size_t k = 0; k < cand.size(); ++k) {
    w[k] = std::exp(logw[k] - lse);
    sum_sq += w[k] * w[k];
    out.max_weight = std::max(out.max_weight, w[k]);
    if (w[k] > 0.0) mean += w[k] * *cand[k].z;
  }
  out.ess = 1.0 / sum_sq;

  // Covariance weights: tempered as w^beta when the ESS is below target.
  std::vector<double> wc = w;
  const double target = std::min(static_cast<double>(cand.size()), tempering_ess);
  if (out.ess < target) {
    const auto tempered = [&](double beta, std::vector<double>& tw) {
      tw.assign(cand.size(), 0.0);
      double mx = kNegInf;
      // Unresolved candidates enter through their upper bound.
      const auto lw = [&](std::size_t k) { return exact[k] ? logw[k] : cand[k].ub; };
      for (std::size_t k = 0; k < cand.size(); ++k) {
        if (lw(k) != kNegInf) mx = std::max(mx, beta * lw(k));
      }
      double s = 0.0;
      double s2 = 0.0;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        tw[k] = lw(k) == kNegInf ? 0.0 : std::exp(beta * lw(k) - mx);
        s += tw[k];
      }
      for (auto& x : tw) {
        x /= s;
        s2 += x * x;
      }
      return 1.0 / s2;
    };
    double beta = 1.0;
    while (beta > kMinTempering && tempered(beta, wc) < target) beta *= 0.5;
    tempered(beta, wc);
    out.tempering = beta;
  }
  Matrix cov = Matrix::Zero(p, p);
  for (std::size_t k = 0; k < cand.size(); ++k) {
    if (wc[k] == 0.0) continue;
    const Vector r = *cand[k].z - mean;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(r, wc[k]);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  out.moments = GaussianMoments{std::move(mean), std::move(cov)};
  out.degenerate = cand.size() > 1 && out.max_weight >= kDegenerateWeight;
  return out;
}

std::vector<std::size_t> prune(const SampleBank& bank, std::span<const double> z, double log_prior, std::size_t i,
                               Pruning mode) {
  std::vector<std::size_t> J;
  if (mode == Pruning::kNone) return J;
  const std::size_t end = std::min(i, bank.components.size());
  for (std::size_t m = 0; m < end; ++m) {
    const auto& c = bank.components[m];
    if (!c) continue;
    if (mode == Pruning::kAll || c->dist->log_density(z) > log_prior) J.push_back(m);
  }
  return J;
}

namespace {

numkit::StudentTParams t_params(GaussianMoments m, double nu) {
  return numkit::StudentTParams{std::move(m.mean), std::move(m.cov), nu};
}

}  // namespace

EigEstimate estimate_eig(const Model& model, const Vector& d, const EstimatorConfig& config) {
  config.validate();
  model.check_design(d);
  const auto start = std::chrono::steady_clock::now();
  const StreamFactory streams(config.seed, config.replicate, config.design_index);
  EvalCounter counter;

  if (config.biasing == BiasingMode::kExactOracle) {
    // Only probes availability; each outer sample gets its own posterior below.
    if (!model.exact_posterior(Vector::Zero(model.n_y()), d)) {
      throw Error(ErrorCode::kInvalidConfig, "exact_oracle biasing needs a model with a closed-form posterior");
    }
  }

  std::vector<OuterSample> outer = draw_outer(model, d, config.N, streams, &counter);
  if (config.ordering == Ordering::kPriorDensityDesc) outer = order_samples(std::move(outer));

  const auto n = outer.size();
  const Eigen::Index nt = model.n_theta();
  const Eigen::Index ne = model.n_eta();
  const Eigen::Index p = model.n_params();

  SampleBank bank;
  if (config.biasing == BiasingMode::kLmis) {
    for (const auto& s : outer) {
      bank.prior_samples.push_back(&s.z);
      bank.prior_outputs.push_back(&s.g);
      bank.prior_log_density.push_back(s.log_prior);
    }
    bank.components.resize(n);
  }

  EigEstimate est;
  est.n_eta = ne;
  est.log_cond.resize(n);
  est.log_marg.resize(n);
  est.cess_marg.resize(n);
  est.cess_cond.resize(n);
  est.relvar_marg.resize(n);
  est.relvar_cond.resize(n);
  est.fallback.assign(n, false);

  const PriorDensity prior_q(model);
  for (std::size_t i = 0; i < n; ++i) {
    const OuterSample& s = outer[i];
    const Vector theta = s.z.head(nt);
    std::unique_ptr<Density> q_marg;
    std::unique_ptr<Density> q_cond;
    std::shared_ptr<const StudentTDensity> q_marg_t;
    bool fallback = false;

    switch (config.biasing) {
      case BiasingMode::kPrior:
        break;
      case BiasingMode::kExactOracle: {
        GaussianMoments post = *model.exact_posterior(s.y, d);
        if (ne > 0) q_cond = std::make_unique<GaussianDensity>(numkit::gaussian_condition(post, nt, theta));
        q_marg = std::make_unique<GaussianDensity>(std::move(post));
        break;
      }
      case BiasingMode::kLmis: {
        const auto J = prune(bank, as_span(s.z), s.log_prior, i, config.pruning);
        // Once pruning keeps nearly everything, sum over the few excluded instead.
        if (!bank.tracks_totals && J.size() >= 32 && 4 * (bank.banked - J.size()) < J.size()) bank.track_totals();
        const MomentEstimate me = estimate_posterior_moments(model, s.y, bank, J, config.M1, config.tempering_ess);
        if (me.degenerate) ++est.degenerate_count;
        // All moment weights zero, or a single dominant weight with tempering off.
        if (me.max_weight == 0.0 || (me.degenerate && config.tempering_ess <= 1.0)) {
          fallback = true;
          break;
        }
        GaussianMoments m = me.moments;
        const double floor = 1e-10 * std::max(1.0, m.cov.trace() / static_cast<double>(p));
        m.cov = numkit::floor_eigenvalues(m.cov, floor);
        if (ne > 0) {
          GaussianMoments c = config.cond_bias == CondBias::kTConditional ? numkit::gaussian_condition(m, nt, theta)
                                                                          : numkit::gaussian_marginal(m, nt, ne);
          q_cond = std::make_unique<StudentTDensity>(t_params(std::move(c), config.nu));
        }
        q_marg_t = std::make_shared<const StudentTDensity>(t_params(std::move(m), config.nu));
        break;
      }
    }

    InnerEstimate marg;
    InnerEstimate cond;
    const auto run_prior = [&](StreamPurpose pm, StreamPurpose pc) {
      Rng rm = streams.stream(i, pm);
      Rng rc = streams.stream(i, pc);
      const EtaPriorDensity eta_prior(model, theta);
      marg = estimate_marginal_likelihood(model, s.y, d, prior_q, config.M1, rm, &counter);
      cond = estimate_conditional_likelihood(model, s.y, theta, s.g, d, eta_prior, config.M2, rc, &counter);
    };

    if (config.biasing == BiasingMode::kPrior || fallback) {
      run_prior(fallback ? StreamPurpose::kFallback : StreamPurpose::kMarginal,
                fallback ? StreamPurpose::kAux : StreamPurpose::kConditional);
    } else {
      const Density& qm = q_marg_t ? static_cast<const Density&>(*q_marg_t) : *q_marg;
      const EtaPriorDensity eta_prior(model, theta);
      const Density& qc = q_cond ? *q_cond : static_cast<const Density&>(eta_prior);
      try {
        Rng rm = streams.stream(i, StreamPurpose::kMarginal);
        Rng rc = streams.stream(i, StreamPurpose::kConditional);
        marg = estimate_marginal_likelihood(model, s.y, d, qm, config.M1, rm, &counter);
        cond = estimate_conditional_likelihood(model, s.y, theta, s.g, d, qc, config.M2, rc, &counter);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kAllWeightsZero) throw;
        fallback = true;
        run_prior(StreamPurpose::kFallback, StreamPurpose::kAux);
      }
    }

    if (q_marg_t && !fallback) {
      auto c = std::make_unique<BankComponent>();
      c->dist = q_marg_t;
      c->log_prior = std::move(marg.log_prior);
      c->log_own = std::move(marg.log_proposal);
      c->samples = std::move(marg.samples);
      c->outputs = std::move(marg.outputs);
      bank.add(i, std::move(c));
    }

    est.log_marg[i] = marg.log_estimate;
    est.log_cond[i] = cond.log_estimate;
    est.cess_marg[i] = marg.cess();
    est.relvar_marg[i] = marg.relative_variance();
    if (ne > 0) {
      est.cess_cond[i] = cond.cess();
      est.relvar_cond[i] = cond.relative_variance();
    } else {
      est.cess_cond[i] = std::numeric_limits<double>::quiet_NaN();
      est.relvar_cond[i] = 0.0;
    }
    est.fallback[i] = fallback;
    if (fallback) ++est.fallback_count;
  }

  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += est.log_cond[i] - est.log_marg[i];
  est.value = sum / static_cast<double>(n);
  est.outer = std::move(outer);
  est.model_evals = counter.value();
  est.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return est;
}

EigEstimate estimate_eig_joint(const Model& model, const Vector& d, const EstimatorConfig& config) {
  const auto joint = model.with_interest_dim(model.n_params());
  return estimate_eig(*joint, d, config);
}

}  // namespace bedkit::estimator
