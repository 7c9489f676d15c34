// Command-line front end: bedkit <eig|sweep|convergence|scaling|diagnostics> [options]

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bedkit/error.hpp"
#include "bedkit/harness.hpp"

namespace {

using nlohmann::json;
namespace h = bedkit::harness;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::int64_t> replicates;
  std::string out;
  std::string summary;
  std::string format;
  std::string mode;
  std::string model;
  std::optional<std::int64_t> n;
  std::optional<double> k;
  std::optional<double> sigma;
  std::string interest;
  std::string estimator;
  std::optional<std::int64_t> N;
  std::optional<std::int64_t> M;
  std::vector<double> design;
  std::vector<double> budgets;
};

json build_config(const std::string& kind, const Overrides& o) {
  json j = json::object();
  if (!o.config.empty()) {
    std::ifstream f(o.config);
    if (!f) throw bedkit::Error(bedkit::ErrorCode::kInvalidConfig, "cannot open config '" + o.config + "'");
    try {
      j = json::parse(f);
    } catch (const json::parse_error& e) {
      throw bedkit::Error(bedkit::ErrorCode::kInvalidConfig, std::string("at /: ") + e.what());
    }
  }
  j["experiment"] = kind;
  if (o.seed) j["seed"] = *o.seed;
  if (o.threads) j["threads"] = *o.threads;
  if (o.replicates) j["replicates"] = *o.replicates;
  if (!o.out.empty()) j["output"]["path"] = o.out;
  if (!o.summary.empty()) j["output"]["summary"] = o.summary;
  if (!o.format.empty()) j["output"]["format"] = o.format;
  if (!o.mode.empty()) j["mode"] = o.mode;
  if (!o.model.empty()) j["model"]["id"] = o.model;
  if (o.n) j["model"]["n"] = *o.n;
  if (o.k) j["model"]["k"] = *o.k;
  if (o.sigma) j["model"]["sigma"] = *o.sigma;
  if (!o.interest.empty()) j["model"]["interest"] = o.interest;
  if (!o.estimator.empty()) j["estimators"] = json::array({json{{"id", o.estimator}}});
  if (o.N || o.M) {
    if (!j.contains("estimators")) j["estimators"] = json::array({json::object()});
    for (auto& e : j["estimators"]) {
      if (o.N) e["N"] = *o.N;
      if (o.M) {
        e.erase("M1");
        e.erase("M2");
        e["M"] = *o.M;
      }
    }
  }
  if (!o.design.empty()) j["design"] = json{{"points", json::array({o.design})}};
  if (!o.budgets.empty()) j[kind == "scaling" ? "scaling" : "convergence"]["budgets"] = o.budgets;
  return j;
}

std::string summary_path(const h::ExperimentConfig& c) {
  if (!c.summary_path.empty()) return c.summary_path;
  if (!c.output_path.empty()) return c.output_path + ".summary.csv";
  return {};
}

void write(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  if (path.empty()) {
    fn(std::cout);
    return;
  }
  std::ofstream f(path);
  if (!f) throw bedkit::Error(bedkit::ErrorCode::kIoError, "cannot open '" + path + "' for writing");
  fn(f);
  if (!f) throw bedkit::Error(bedkit::ErrorCode::kIoError, "write to '" + path + "' failed");
}

void run(const h::ExperimentConfig& c) {
  const auto rows_out = [&](const h::ResultTable& rows) {
    write(c.output_path, [&](std::ostream& os) { h::emit(rows, c.format, os); });
  };
  const auto side = summary_path(c);
  switch (c.kind) {
    case h::ExperimentKind::kEig:
    case h::ExperimentKind::kSweep: {
      const auto res = h::run_sweep(c);
      rows_out(res.rows);
      if (!side.empty()) write(side, [&](std::ostream& os) { h::emit_sweep_summary(res.summary, os); });
      break;
    }
    case h::ExperimentKind::kConvergence:
    case h::ExperimentKind::kScaling: {
      const auto res = c.kind == h::ExperimentKind::kScaling ? h::run_scaling(c) : h::run_convergence(c);
      rows_out(res.rows);
      if (!side.empty()) {
        write(side, [&](std::ostream& os) { h::emit_summary(res.summary, res.reference, res.reference_source, os); });
      }
      break;
    }
    case h::ExperimentKind::kDiagnostics: {
      const auto res = h::run_diagnostics(c);
      rows_out(res.rows);
      if (!side.empty()) write(side, [&](std::ostream& os) { h::emit_diagnostics(res.constants, os); });
      break;
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expected information gain estimation for focused experimental design"};
  app.require_subcommand(1);
  Overrides o;
  for (const char* name : {"eig", "sweep", "convergence", "scaling", "diagnostics"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", o.config, "JSON experiment config");
    sub->add_option("--seed", o.seed, "root seed");
    sub->add_option("--threads", o.threads, "worker threads");
    sub->add_option("-r,--replicates", o.replicates);
    sub->add_option("-o,--out", o.out, "result table path (default stdout)");
    sub->add_option("--summary", o.summary, "summary table path");
    sub->add_option("--format", o.format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
    sub->add_option("--mode", o.mode, "marginal or joint");
    sub->add_option("--model", o.model, "linear_gaussian or mossbauer");
    sub->add_option("--n", o.n, "linear-Gaussian dimension");
    sub->add_option("--k", o.k, "linear-Gaussian gain");
    sub->add_option("--sigma", o.sigma, "noise standard deviation");
    sub->add_option("--interest", o.interest, "Mossbauer parameter of interest");
    sub->add_option("--estimator", o.estimator, "prior, lmis, exact_oracle or closed_form");
    sub->add_option("-N", o.N, "outer samples");
    sub->add_option("-M", o.M, "inner samples (M1 = M2)");
    sub->add_option("--design", o.design, "single design point")->delimiter(',');
    sub->add_option("--budgets", o.budgets, "budgets for convergence / scaling")->delimiter(',');
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string kind = app.get_subcommands().front()->get_name();
  h::ExperimentConfig config;
  try {
    config = h::parse_config(build_config(kind, o));
    if (kind == "eig" && config.design.expand().size() != 1) {
      throw bedkit::Error(bedkit::ErrorCode::kInvalidConfig, "at /design: eig needs exactly one design point");
    }
  } catch (const bedkit::Error& e) {
    std::cerr << "config error: " << e.message() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    run(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
