#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bedkit/diagnostics.hpp"
#include "bedkit/estimator.hpp"
#include "bedkit/model.hpp"

namespace bedkit::harness {

using model::EigMode;
using numkit::Vector;

enum class ExperimentKind { kEig, kSweep, kConvergence, kScaling, kDiagnostics };
enum class Format { kCsv, kJsonl };
enum class Allocation { kFixedRatio, kFixedN, kFixedM };

std::string_view to_string(ExperimentKind k);
std::string_view to_string(EigMode m);
std::string_view to_string(Format f);
std::string_view to_string(Allocation a);
ExperimentKind parse_kind(std::string_view s);
EigMode parse_mode(std::string_view s);
Format parse_format(std::string_view s);
Allocation parse_allocation(std::string_view s);

struct ModelSpec {
  std::string id = "linear_gaussian";
  // linear_gaussian
  std::int64_t n = 2;
  double k = 1.0;
  double sigma = 0.4;
  std::optional<model::Coupling> coupling;  // default depends on n
  // mossbauer
  std::string interest = "center";
  std::int64_t n_d = 3;
};

/// Builds the model; in joint mode every parameter is of interest.
std::unique_ptr<model::Model> make_model(const ModelSpec& spec, EigMode mode);

struct EstimatorSpec {
  std::string label;  // emitted in the `estimator` column
  estimator::EstimatorConfig config;
  /// Inner/outer ratio M/N used when a budget drives the allocation.
  double ratio = 1.0;
  /// Report the closed-form value instead of estimating (linear-Gaussian only).
  bool closed_form = false;
};

struct GridAxis {
  double lo = 0.0;
  double hi = 0.0;
  std::int64_t steps = 1;
};

struct DesignGrid {
  std::vector<GridAxis> axes;
  std::vector<Vector> points;  // used when non-empty

  /// Cartesian product in row-major order (last axis fastest), or `points`.
  [[nodiscard]] std::vector<Vector> expand() const;
};

struct ConvergenceSpec {
  std::vector<double> budgets;
  Allocation allocation = Allocation::kFixedRatio;
  /// Held value of N (fixed_n) or M (fixed_m); the other follows from W = N(M1 + M2).
  std::int64_t fixed = 0;
};

struct ScalingSpec {
  double anchor_budget = 1e4;
  double anchor_ratio = 1000.0;
  std::vector<double> budgets;
};

struct ReferenceSpec {
  double budget = 1e7;
  double ratio = 0.01;  // LMIS preset N = 100 M
  std::uint64_t seed = 0x5eed;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kEig;
  ModelSpec model;
  EigMode mode = EigMode::kMarginal;
  std::vector<EstimatorSpec> estimators;
  DesignGrid design;
  std::int64_t replicates = 1;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_path;  // empty means stdout
  std::string summary_path;
  Format format = Format::kCsv;
  ConvergenceSpec convergence;
  ScalingSpec scaling;
  ReferenceSpec reference;

  /// Throws kInvalidConfig naming the offending key.
  void validate() const;
};

/// Parses a JSON config. Errors name the offending key path, e.g. `/estimators/0/N`.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

struct CessSummary {
  double mean = 0.0;
  double median = 0.0;
  double min = 0.0;
};

CessSummary summarize_cess(const std::vector<double>& values);

struct ResultRow {
  Vector design;
  std::size_t design_index = 0;
  std::string estimator;
  EigMode mode = EigMode::kMarginal;
  std::int64_t N = 0;
  std::int64_t M1 = 0;
  std::int64_t M2 = 0;
  std::int64_t W = 0;
  std::int64_t replicate = 0;
  double eig_hat = 0.0;
  double eig_ref = 0.0;  // NaN when unavailable
  CessSummary cess_marg;
  CessSummary cess_cond;
  std::uint64_t model_evals = 0;
  double wall_ms = 0.0;
  std::int64_t fallback_count = 0;
};

using ResultTable = std::vector<ResultRow>;

/// One replicate of one estimator at one design.
ResultRow run_unit(const model::Model& model, const Vector& design, std::size_t design_index,
                   const EstimatorSpec& spec, EigMode mode, std::uint64_t seed, std::int64_t replicate,
                   double eig_ref, estimator::EigEstimate* keep = nullptr);

/// Runs `n` independent tasks on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task);

/// Closed-form EIG when the model has one.
std::optional<double> closed_form_reference(const model::Model& model, const Vector& design, EigMode mode);

struct SweepSummary {
  struct PerEstimator {
    std::string estimator;
    std::vector<std::size_t> argmax_per_replicate;  // design indices
    std::vector<double> mean_eig;                   // per design, over replicates
    std::size_t mean_argmax = 0;
  };
  std::vector<Vector> designs;
  std::vector<PerEstimator> estimators;
  std::vector<double> reference;  // per design; NaN when unavailable
  std::optional<std::size_t> reference_argmax;
};

struct SweepResult {
  ResultTable rows;
  SweepSummary summary;
};

/// Ties go to the smallest design in lexicographic order.
std::size_t argmax_design(const std::vector<Vector>& designs, const std::vector<double>& values);

SweepResult run_sweep(const ExperimentConfig& config);

struct BudgetStats {
  std::string estimator;
  std::string allocation;
  double W = 0.0;
  std::int64_t N = 0;
  std::int64_t M1 = 0;
  std::int64_t M2 = 0;
  diagnostics::ReplicateStats stats;
};

struct StudyResult {
  ResultTable rows;
  std::vector<BudgetStats> summary;
  double reference = 0.0;
  std::string reference_source;  // "closed_form" or "lmis@W seed=S"
};

/// Reference EIG at the first design: closed form, or a high-budget LMIS run.
std::pair<double, std::string> study_reference(const ExperimentConfig& config, const model::Model& model,
                                               const Vector& design);

StudyResult run_convergence(const ExperimentConfig& config);
StudyResult run_scaling(const ExperimentConfig& config);

struct DiagnosticsRow {
  std::string estimator;
  std::int64_t replicate = 0;
  diagnostics::DeltaConstants constants;
  double predicted_bias = 0.0;
  double predicted_variance = 0.0;
  diagnostics::ScalingPlan plan;  // optimal allocation at the run's budget
};

struct DiagnosticsResult {
  ResultTable rows;
  std::vector<DiagnosticsRow> constants;
};

DiagnosticsResult run_diagnostics(const ExperimentConfig& config);

/// Header: design_0..design_{k-1},estimator,mode,N,M1,M2,W,replicate,eig_hat,
/// eig_ref,cess_marg_mean,cess_cond_mean,model_evals,wall_ms. Throws kEmptyInput.
void emit(const ResultTable& table, Format format, std::ostream& out);
void emit_file(const ResultTable& table, Format format, const std::string& path);
std::string csv_header(std::size_t design_dim);
/// Shortest round-trip decimal; "nan" / "inf" / "-inf" for non-finite values.
std::string format_double(double v);

/// Inverse of emit. Throws kIoError on malformed input.
ResultTable parse(std::string_view text, Format format);

void emit_summary(const std::vector<BudgetStats>& summary, double reference, const std::string& source,
                  std::ostream& out);
void emit_diagnostics(const std::vector<DiagnosticsRow>& rows, std::ostream& out);
void emit_sweep_summary(const SweepSummary& summary, std::ostream& out);

}  // namespace bedkit::harness
