#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bedkit/model.hpp"
#include "bedkit/numkit.hpp"
#include "bedkit/rng.hpp"

namespace bedkit::estimator {

using model::EvalCounter;
using model::Model;
using numkit::GaussianMoments;
using numkit::Matrix;
using numkit::Vector;

enum class BiasingMode { kPrior, kLmis, kExactOracle };
enum class Pruning { kDensity, kAll, kNone };
enum class Ordering { kPriorDensityDesc, kAsDrawn };
enum class CondBias { kTConditional, kTMarginalEta };

std::string_view to_string(BiasingMode m);
std::string_view to_string(Pruning p);
std::string_view to_string(Ordering o);
std::string_view to_string(CondBias c);
BiasingMode parse_biasing_mode(std::string_view s);
Pruning parse_pruning(std::string_view s);
Ordering parse_ordering(std::string_view s);
CondBias parse_cond_bias(std::string_view s);

struct EstimatorConfig {
  std::int64_t N = 100;
  std::int64_t M1 = 100;
  std::int64_t M2 = 100;
  double nu = 2.5;
  BiasingMode biasing = BiasingMode::kLmis;
  Pruning pruning = Pruning::kDensity;
  Ordering ordering = Ordering::kPriorDensityDesc;
  CondBias cond_bias = CondBias::kTConditional;
  /// Minimum ESS for the covariance weights; below it they are tempered as
  /// w^beta. Values <= 1 disable tempering and degenerate moments fall back
  /// to prior biasing.
  double tempering_ess = 10.0;
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;
  std::uint64_t design_index = 0;

  /// Throws kInvalidConfig.
  void validate() const;
};

/// A proposal distribution over some parameter block.
class Density {
 public:
  virtual ~Density() = default;
  [[nodiscard]] virtual Vector sample(Rng& rng) const = 0;
  [[nodiscard]] virtual double log_density(std::span<const double> x) const = 0;
  /// True when the density equals the target prior, so importance weights are 1.
  [[nodiscard]] virtual bool is_prior() const { return false; }
};

class PriorDensity final : public Density {
 public:
  explicit PriorDensity(const Model& model) : model_(model) {}
  [[nodiscard]] Vector sample(Rng& rng) const override { return model_.sample_prior(rng); }
  [[nodiscard]] double log_density(std::span<const double> x) const override { return model_.log_prior(x); }
  [[nodiscard]] bool is_prior() const override { return true; }

 private:
  const Model& model_;
};

/// p(eta | theta) for a fixed theta.
class EtaPriorDensity final : public Density {
 public:
  EtaPriorDensity(const Model& model, Vector theta) : model_(model), theta_(std::move(theta)) {}
  [[nodiscard]] Vector sample(Rng& rng) const override { return model_.sample_eta_given_theta(theta_, rng); }
  [[nodiscard]] double log_density(std::span<const double> x) const override {
    return model_.log_prior_eta_given_theta(theta_, x);
  }
  [[nodiscard]] bool is_prior() const override { return true; }

 private:
  const Model& model_;
  Vector theta_;
};

class GaussianDensity final : public Density {
 public:
  explicit GaussianDensity(GaussianMoments m) : mvn_(std::move(m)) {}
  [[nodiscard]] Vector sample(Rng& rng) const override { return mvn_.sample(rng); }
  [[nodiscard]] double log_density(std::span<const double> x) const override { return mvn_.log_density(x); }

 private:
  numkit::Mvn mvn_;
};

class StudentTDensity final : public Density {
 public:
  explicit StudentTDensity(numkit::StudentTParams p) : mvt_(std::move(p)) {}
  [[nodiscard]] Vector sample(Rng& rng) const override { return mvt_.sample(rng); }
  [[nodiscard]] double log_density(std::span<const double> x) const override { return mvt_.log_density(x); }
  [[nodiscard]] const numkit::Mvt& dist() const { return mvt_; }

 private:
  numkit::Mvt mvt_;
};

struct OuterSample {
  Vector z;  // (theta, eta)
  Vector y;
  Vector g;  // cached G(z, d)
  double log_prior = 0.0;
  std::size_t drawn_index = 0;
};

/// Result of one inner importance-sampling estimate.
struct InnerEstimate {
  double log_estimate = 0.0;
  /// log of each summand likelihood * weight.
  std::vector<double> log_summands;
  std::vector<Vector> samples;
  std::vector<Vector> outputs;
  std::vector<double> log_prior;
  std::vector<double> log_proposal;

  /// cESS of the summand-normalized weights.
  [[nodiscard]] double cess() const;
  /// Sample variance (over M - 1) of summand / estimate. NaN when M < 2.
  [[nodiscard]] double relative_variance() const;
};

/// Samples drawn from one q_marg, kept with their generator so that mixture
/// densities can be evaluated later.
struct BankComponent {
  std::shared_ptr<const StudentTDensity> dist;
  std::vector<Vector> samples;
  std::vector<Vector> outputs;
  std::vector<double> log_prior;
  std::vector<double> log_own;  // density under `dist`
  std::vector<double> log_total;  // log sum over every banked q_marg, when tracked
};

/// Prior draws (the outer samples) plus per-outer-position q_marg components.
struct SampleBank {
  std::vector<const Vector*> prior_samples;
  std::vector<const Vector*> prior_outputs;
  std::vector<double> prior_log_density;
  /// Indexed by processing position; null when that position was not banked.
  std::vector<std::unique_ptr<BankComponent>> components;
  /// When set, every sample carries log sum_m q_m(x) over all banked
  /// components, so a mixture over most of them can be had from the rest.
  bool tracks_totals = false;
  std::vector<double> prior_log_total;
  std::size_t banked = 0;

  /// Stores `c` at position i, keeping totals current.
  void add(std::size_t i, std::unique_ptr<BankComponent> c);
  /// Starts total tracking; costs one pass over every banked sample.
  void track_totals();
};

/// Mixture of the prior (count N) and q_marg components (count M1 each).
struct MixtureBias {
  struct Component {
    double count = 0.0;
    const numkit::Mvt* dist = nullptr;  // null means the prior
    double log_weight = 0.0;            // log(count / total)
  };
  std::vector<Component> components;
  double total = 0.0;

  /// log sum_j (count_j / total) pdf_j(x); `log_prior` is p(x).
  [[nodiscard]] double log_density(std::span<const double> x, double log_prior) const;
};

MixtureBias make_mixture(const SampleBank& bank, std::span<const std::size_t> J, std::int64_t M1);

struct EigEstimate {
  double value = 0.0;
  std::vector<double> log_cond;  // log p^(y_i | theta_i, d), processing order
  std::vector<double> log_marg;  // log p^(y_i | d)
  std::vector<double> cess_marg;
  std::vector<double> cess_cond;  // NaN when the conditional is exact
  std::vector<double> relvar_marg;
  std::vector<double> relvar_cond;
  std::vector<bool> fallback;
  std::int64_t fallback_count = 0;
  std::int64_t degenerate_count = 0;  // moment estimates dominated by one weight
  std::vector<OuterSample> outer;  // processing order
  std::uint64_t model_evals = 0;
  double wall_ms = 0.0;
  Eigen::Index n_eta = 0;
};

std::vector<OuterSample> draw_outer(const Model& model, const Vector& d, std::int64_t N,
                                    const StreamFactory& streams, EvalCounter* counter = nullptr);

/// Stable sort by prior log-density, largest first.
std::vector<OuterSample> order_samples(std::vector<OuterSample> samples);

/// Throws kAllWeightsZero when every summand is zero.
InnerEstimate estimate_marginal_likelihood(const Model& model, const Vector& y, const Vector& d, const Density& q,
                                           std::int64_t M1, Rng& rng, EvalCounter* counter = nullptr);

/// With n_eta = 0 the result is the exact log-likelihood from `g_outer`.
InnerEstimate estimate_conditional_likelihood(const Model& model, const Vector& y, const Vector& theta,
                                              const Vector& g_outer, const Vector& d, const Density& q_cond,
                                              std::int64_t M2, Rng& rng, EvalCounter* counter = nullptr);

struct MomentEstimate {
  GaussianMoments moments;
  double max_weight = 0.0;  // largest normalized weight
  std::int64_t L = 0;
  double ess = 0.0;        // of the normalized moment weights
  double tempering = 1.0;  // exponent applied to the covariance weights
  bool degenerate = false;
};

/// Self-normalized posterior moments over the prior bank plus components J.
/// Uses cached forward outputs only.
MomentEstimate estimate_posterior_moments(const Model& model, const Vector& y, const SampleBank& bank,
                                          std::span<const std::size_t> J, std::int64_t M1,
                                          double tempering_ess = 0.0);

/// {m < i : log q_m(z) > log p(z)} over banked positions.
std::vector<std::size_t> prune(const SampleBank& bank, std::span<const double> z, double log_prior, std::size_t i,
                               Pruning mode = Pruning::kDensity);

EigEstimate estimate_eig(const Model& model, const Vector& d, const EstimatorConfig& config);

/// Every parameter treated as interest (n_eta = 0).
EigEstimate estimate_eig_joint(const Model& model, const Vector& d, const EstimatorConfig& config);

}  // namespace bedkit::estimator
