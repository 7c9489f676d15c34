#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "bedkit/rng.hpp"

namespace bedkit::numkit {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Relative multipliers tried in order; each is scaled by max(1, trace/p).
struct JitterPolicy {
  std::vector<double> ladder{0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4};
};

struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;  // absolute amount added to the diagonal

  [[nodiscard]] double log_det() const;
};

/// True when |A_ij - A_ji| <= tol * max(1, |A_ij|, |A_ji|) for all i, j.
bool is_symmetric(const Matrix& a, double tol = 1e-12);

/// Lower Cholesky factor of `cov + eps*I` for the first eps on the ladder
/// that succeeds. Throws kNotSymmetric or kNotPDAfterMaxJitter.
CholeskyFactor cholesky(const Matrix& cov, const JitterPolicy& policy = {});

/// Clamp eigenvalues of a symmetric matrix from below.
Matrix floor_eigenvalues(const Matrix& cov, double floor);

struct GaussianMoments {
  Vector mean;
  Matrix cov;

  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }
};

struct StudentTParams {
  Vector location;
  Matrix scale;
  double dof = 2.5;

  [[nodiscard]] Eigen::Index dim() const { return location.size(); }
};

/// Multivariate normal with its factorization cached for repeated use.
class Mvn {
 public:
  explicit Mvn(GaussianMoments moments, const JitterPolicy& policy = {});

  [[nodiscard]] Vector sample(Rng& rng) const;
  [[nodiscard]] double log_density(std::span<const double> x) const;
  [[nodiscard]] double log_density(const Vector& x) const { return log_density(std::span(x.data(), x.size())); }

  [[nodiscard]] const GaussianMoments& moments() const { return moments_; }
  [[nodiscard]] const CholeskyFactor& factor() const { return factor_; }
  [[nodiscard]] Eigen::Index dim() const { return moments_.dim(); }

 private:
  GaussianMoments moments_;
  CholeskyFactor factor_;
  double log_norm_ = 0.0;
};

/// Multivariate Student-t (location, scale matrix, dof) with cached factor.
class Mvt {
 public:
  explicit Mvt(StudentTParams params, const JitterPolicy& policy = {});

  [[nodiscard]] Vector sample(Rng& rng) const;
  [[nodiscard]] double log_density(std::span<const double> x) const;
  [[nodiscard]] double log_density(const Vector& x) const { return log_density(std::span(x.data(), x.size())); }

  [[nodiscard]] const StudentTParams& params() const { return params_; }
  [[nodiscard]] Eigen::Index dim() const { return params_.dim(); }

 private:
  StudentTParams params_;
  CholeskyFactor factor_;
  Vector inv_diag_;
  double log_norm_ = 0.0;
};

Vector mvn_sample(const GaussianMoments& m, Rng& rng);
double mvn_logpdf(const GaussianMoments& m, const Vector& x);
Vector mvt_sample(const StudentTParams& t, Rng& rng);
double mvt_logpdf(const StudentTParams& t, const Vector& x);

/// Squared Mahalanobis distance ||L^{-1}(x - mean)||^2 for a lower factor L.
double mahalanobis_sq(const Matrix& lower, const Vector& mean, std::span<const double> x);

/// Distribution of the trailing block given the leading `split` coordinates
/// equal `value`. Throws kSingularBlock when the leading block cannot be
/// factored even after jitter.
GaussianMoments gaussian_condition(const GaussianMoments& m, Eigen::Index split, const Vector& value,
                                   const JitterPolicy& policy = {});

/// Marginal of coordinates [begin, begin + size).
GaussianMoments gaussian_marginal(const GaussianMoments& m, Eigen::Index begin, Eigen::Index size);

/// log(sum(exp(values))). Throws kEmptyInput. Returns -inf when every entry is -inf.
double logsumexp(std::span<const double> values);

}  // namespace bedkit::numkit
