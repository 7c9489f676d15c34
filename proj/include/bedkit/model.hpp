#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bedkit/numkit.hpp"
#include "bedkit/rng.hpp"

namespace bedkit::model {

using numkit::GaussianMoments;
using numkit::Matrix;
using numkit::Vector;

/// Concatenated (theta, eta) with the interest prefix length.
struct ParameterVector {
  Vector values;
  Eigen::Index split = 1;

  [[nodiscard]] auto theta() const { return values.head(split); }
  [[nodiscard]] auto eta() const { return values.tail(values.size() - split); }
};

/// Tally of forward-model evaluations. One per estimator run; the model also
/// keeps a process-wide total.
class EvalCounter {
 public:
  void add(std::uint64_t n = 1) noexcept { count_.fetch_add(n, std::memory_order_relaxed); }
  [[nodiscard]] std::uint64_t value() const noexcept { return count_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> count_{0};
};

struct DesignBounds {
  Vector lo;
  Vector hi;
};

/// Probabilistic model contract: prior over z = (theta, eta), deterministic
/// forward model G(z, d) and additive iid Gaussian observation noise.
///
/// Likelihood evaluation takes a cached forward output so that it can be
/// re-evaluated at new data without touching G.
class Model {
 public:
  Model(Eigen::Index n_theta, Eigen::Index n_params, Eigen::Index n_y, double noise_sigma, DesignBounds bounds);
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  [[nodiscard]] virtual std::string id() const = 0;
  /// Same model with the first `n_theta` parameters treated as interest.
  [[nodiscard]] virtual std::unique_ptr<Model> with_interest_dim(Eigen::Index n_theta) const = 0;

  [[nodiscard]] Eigen::Index n_theta() const noexcept { return n_theta_; }
  [[nodiscard]] Eigen::Index n_eta() const noexcept { return n_params_ - n_theta_; }
  [[nodiscard]] Eigen::Index n_params() const noexcept { return n_params_; }
  [[nodiscard]] Eigen::Index n_y() const noexcept { return n_y_; }
  [[nodiscard]] Eigen::Index n_d() const noexcept { return bounds_.lo.size(); }
  [[nodiscard]] double noise_sigma() const noexcept { return sigma_; }
  [[nodiscard]] const DesignBounds& bounds() const noexcept { return bounds_; }

  /// Throws kDimensionMismatch for wrong size, kInvalidConfig when outside bounds.
  void check_design(const Vector& d) const;

  [[nodiscard]] virtual Vector sample_prior(Rng& rng) const = 0;
  [[nodiscard]] virtual double log_prior(std::span<const double> z) const = 0;
  [[nodiscard]] virtual Vector sample_eta_given_theta(const Vector& theta, Rng& rng) const = 0;
  [[nodiscard]] virtual double log_prior_eta_given_theta(const Vector& theta, std::span<const double> eta) const = 0;

  /// Evaluates G(z, d). Always counts one evaluation on `counter` (if given)
  /// and on the model-wide total.
  [[nodiscard]] Vector forward(const Vector& z, const Vector& d, EvalCounter* counter = nullptr) const;

  /// log p(y | z, d) given the cached forward output g = G(z, d).
  [[nodiscard]] double loglike(std::span<const double> y, std::span<const double> g) const;
  [[nodiscard]] double loglike(const Vector& y, const Vector& g) const {
    return loglike(std::span(y.data(), y.size()), std::span(g.data(), g.size()));
  }

  [[nodiscard]] Vector sample_observation(const Vector& g, Rng& rng) const;

  /// Exact joint posterior when the model admits one (linear-Gaussian).
  [[nodiscard]] virtual std::optional<GaussianMoments> exact_posterior(const Vector& y, const Vector& d) const;

  [[nodiscard]] std::uint64_t total_evaluations() const noexcept { return total_.load(std::memory_order_relaxed); }

 protected:
  [[nodiscard]] virtual Vector do_forward(const Vector& z, const Vector& d) const = 0;

 private:
  Eigen::Index n_theta_;
  Eigen::Index n_params_;
  Eigen::Index n_y_;
  double sigma_;
  double log_norm_;
  DesignBounds bounds_;
  mutable std::atomic<std::uint64_t> total_{0};
};

/// Memoizes G(z, d) keyed by the exact bit patterns of z and d; counts only misses.
class ForwardCache {
 public:
  const Vector& get(const Model& model, const Vector& z, const Vector& d, EvalCounter* counter = nullptr);
  [[nodiscard]] std::size_t size() const;

 private:
  using Key = std::vector<std::uint64_t>;
  mutable std::mutex mutex_;
  std::map<Key, Vector> entries_;
};

/// Models whose prior is a (possibly correlated) Gaussian in z-space.
class GaussianPriorModel : public Model {
 public:
  GaussianPriorModel(Eigen::Index n_theta, GaussianMoments prior, Eigen::Index n_y, double noise_sigma,
                     DesignBounds bounds);

  [[nodiscard]] Vector sample_prior(Rng& rng) const override;
  [[nodiscard]] double log_prior(std::span<const double> z) const override;
  [[nodiscard]] Vector sample_eta_given_theta(const Vector& theta, Rng& rng) const override;
  [[nodiscard]] double log_prior_eta_given_theta(const Vector& theta, std::span<const double> eta) const override;

  [[nodiscard]] const GaussianMoments& prior() const noexcept { return prior_.moments(); }

 private:
  numkit::Mvn prior_;
  // Set when theta and eta are a priori independent; p(eta | theta) = p(eta).
  std::optional<numkit::Mvn> eta_marginal_;
};

enum class Coupling { kNone, kCorners, kDense };

/// y = G(d, k) z + eps with z ~ N(0, I_n), eps ~ N(0, sigma^2 I_n).
///
/// G has diagonal (k d, k(1-d), ..., k(1-d)). Off-diagonal entries are 1
/// everywhere (kDense), only at (0, n-1) and (n-1, 0) (kCorners), or absent.
class LinearGaussianModel final : public GaussianPriorModel {
 public:
  struct Params {
    Eigen::Index n = 2;
    double gain = 1.0;
    double sigma = 0.4;
    Eigen::Index n_theta = 1;
    Coupling coupling = Coupling::kNone;
  };

  explicit LinearGaussianModel(Params params);

  [[nodiscard]] std::string id() const override { return "linear_gaussian"; }
  [[nodiscard]] std::unique_ptr<Model> with_interest_dim(Eigen::Index n_theta) const override;
  [[nodiscard]] std::optional<GaussianMoments> exact_posterior(const Vector& y, const Vector& d) const override;

  [[nodiscard]] Matrix design_matrix(double d) const;
  [[nodiscard]] const Params& params() const noexcept { return params_; }

 protected:
  [[nodiscard]] Vector do_forward(const Vector& z, const Vector& d) const override;

 private:
  Params params_;
};

Coupling default_coupling(Eigen::Index n);

enum class MossbauerParam { kCenter = 0, kWidth = 1, kHeight = 2, kOffset = 3 };

/// Lorentzian absorption line observed at n_d velocities:
///   y_i = offset - height * width^2 / (width^2 + (center - d_i)^2) + eps_i.
///
/// Internally z holds (center, log width, log height, log offset), permuted
/// so the parameter of interest comes first. Priors: center ~ N(0, 1),
/// log width ~ N(0, 0.3^2), log height ~ N(0, 0.3^2), log offset ~ N(1, 0.2^2).
class MossbauerModel final : public GaussianPriorModel {
 public:
  struct Params {
    Eigen::Index n_d = 3;
    double sigma = 0.1;
    MossbauerParam interest = MossbauerParam::kCenter;
    Eigen::Index n_theta = 1;
  };

  explicit MossbauerModel(Params params);

  [[nodiscard]] std::string id() const override { return "mossbauer"; }
  [[nodiscard]] std::unique_ptr<Model> with_interest_dim(Eigen::Index n_theta) const override;

  /// (center, width, height, offset) on the natural scale.
  [[nodiscard]] std::array<double, 4> natural(const Vector& z) const;
  [[nodiscard]] const Params& params() const noexcept { return params_; }
  /// Natural-parameter index stored at z position i.
  [[nodiscard]] int natural_index(Eigen::Index i) const { return order_[static_cast<std::size_t>(i)]; }

 protected:
  [[nodiscard]] Vector do_forward(const Vector& z, const Vector& d) const override;

 private:
  Params params_;
  std::array<int, 4> order_;
};

std::optional<MossbauerParam> parse_mossbauer_param(std::string_view name);

// Closed-form linear-Gaussian quantities.

GaussianMoments lg_posterior(const LinearGaussianModel& model, const Vector& y, double d);

enum class EigMode { kMarginal, kJoint };

/// Exact EIG: 1/2 log det(Gamma_pr) - 1/2 log det(Gamma_post) over the
/// interest block (marginal) or over all parameters (joint).
double lg_eig_closed_form(const LinearGaussianModel& model, double d, EigMode mode);

double lg_marginal_likelihood(const LinearGaussianModel& model, const Vector& y, double d);
/// log p(y | theta, d): the joint Gaussian of (theta, y) conditioned on theta.
double lg_conditional_likelihood(const LinearGaussianModel& model, const Vector& y, const Vector& theta, double d);

}  // namespace bedkit::model
