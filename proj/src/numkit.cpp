#include "bedkit/numkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "bedkit/error.hpp"

namespace bedkit::numkit {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
constexpr Eigen::Index kStackDim = 64;

double jitter_scale(const Matrix& cov) {
  const auto p = static_cast<double>(cov.rows());
  return std::max(1.0, cov.trace() / p);
}

}  // namespace

double CholeskyFactor::log_det() const {
  double s = 0.0;
  for (Eigen::Index i = 0; i < lower.rows(); ++i) s += std::log(lower(i, i));
  return 2.0 * s;
}

bool is_symmetric(const Matrix& a, double tol) {
  if (a.rows() != a.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      const double x = a(i, j);
      const double y = a(j, i);
      if (std::abs(x - y) > tol * std::max({1.0, std::abs(x), std::abs(y)})) return false;
    }
  }
  return true;
}

CholeskyFactor cholesky(const Matrix& cov, const JitterPolicy& policy) {
  if (!is_symmetric(cov)) throw Error(ErrorCode::kNotSymmetric, "covariance is not symmetric");
  if (!cov.allFinite()) throw Error(ErrorCode::kNotPDAfterMaxJitter, "covariance has non-finite entries");
  const double scale = cov.rows() > 0 ? jitter_scale(cov) : 1.0;
  Matrix work;
  for (const double rel : policy.ladder) {
    const double eps = rel * scale;
    work = cov;
    work.diagonal().array() += eps;
    Eigen::LLT<Matrix> llt(work);
    if (llt.info() != Eigen::Success) continue;
    Matrix lower = llt.matrixL();
    bool ok = true;
    for (Eigen::Index i = 0; i < lower.rows(); ++i) {
      if (!(lower(i, i) > 0.0) || !std::isfinite(lower(i, i))) {
        ok = false;
        break;
      }
    }
    if (ok) return CholeskyFactor{std::move(lower), eps};
  }
  throw Error(ErrorCode::kNotPDAfterMaxJitter, "matrix not positive definite after jitter ladder");
}

Matrix floor_eigenvalues(const Matrix& cov, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  Vector values = eig.eigenvalues().cwiseMax(floor);
  Matrix out = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

double mahalanobis_sq(const Matrix& lower, const Vector& mean, std::span<const double> x) {
  const Eigen::Index p = lower.rows();
  if (static_cast<Eigen::Index>(x.size()) != p || mean.size() != p) {
    throw Error(ErrorCode::kDimensionMismatch, "mahalanobis: dimension mismatch");
  }
  std::array<double, kStackDim> stack;  // NOLINT: written before read
  std::vector<double> heap;
  double* z = stack.data();
  if (p > kStackDim) {
    heap.resize(static_cast<std::size_t>(p));
    z = heap.data();
  }
  double q = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) {
    double acc = x[static_cast<std::size_t>(i)] - mean[i];
    for (Eigen::Index j = 0; j < i; ++j) acc -= lower(i, j) * z[j];
    z[i] = acc / lower(i, i);
    q += z[i] * z[i];
  }
  return q;
}

Mvn::Mvn(GaussianMoments moments, const JitterPolicy& policy)
    : moments_(std::move(moments)), factor_(cholesky(moments_.cov, policy)) {
  if (moments_.cov.rows() != moments_.mean.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "Mvn: mean and covariance sizes differ");
  }
  log_norm_ = -0.5 * (static_cast<double>(dim()) * kLogTwoPi + factor_.log_det());
}

Vector Mvn::sample(Rng& rng) const {
  Vector z(dim());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return moments_.mean + factor_.lower.triangularView<Eigen::Lower>() * z;
}

double Mvn::log_density(std::span<const double> x) const {
  return log_norm_ - 0.5 * mahalanobis_sq(factor_.lower, moments_.mean, x);
}

Mvt::Mvt(StudentTParams params, const JitterPolicy& policy)
    : params_(std::move(params)), factor_(cholesky(params_.scale, policy)) {
  if (params_.scale.rows() != params_.location.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "Mvt: location and scale sizes differ");
  }
  if (!(params_.dof > 0.0)) throw Error(ErrorCode::kInvalidConfig, "Mvt: dof must be positive");
  const double p = static_cast<double>(dim());
  const double nu = params_.dof;
  log_norm_ = std::lgamma(0.5 * (nu + p)) - std::lgamma(0.5 * nu) - 0.5 * p * std::log(nu * std::numbers::pi) -
              0.5 * factor_.log_det();
  inv_diag_ = factor_.lower.diagonal().cwiseInverse();
}

Vector Mvt::sample(Rng& rng) const {
  Vector z(dim());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  const double w = rng.chi_square(params_.dof);
  const double s = std::sqrt(params_.dof / w);
  const Vector lz = factor_.lower.triangularView<Eigen::Lower>() * z;
  return params_.location + s * lz;
}

double Mvt::log_density(std::span<const double> x) const {
  const Eigen::Index p = dim();
  if (static_cast<Eigen::Index>(x.size()) != p) throw Error(ErrorCode::kDimensionMismatch, "Mvt: dimension mismatch");
  if (p > kStackDim) {
    const double q = mahalanobis_sq(factor_.lower, params_.location, x);
    return log_norm_ - 0.5 * (params_.dof + static_cast<double>(p)) * std::log(1.0 + q / params_.dof);
  }
  // Forward substitution with the cached reciprocal diagonal.
  std::array<double, kStackDim> z;  // NOLINT: written before read
  const double* l = factor_.lower.data();
  double q = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) {
    double acc = x[static_cast<std::size_t>(i)] - params_.location[i];
    for (Eigen::Index j = 0; j < i; ++j) acc -= l[j * p + i] * z[static_cast<std::size_t>(j)];
    const double zi = acc * inv_diag_[i];
    z[static_cast<std::size_t>(i)] = zi;
    q += zi * zi;
  }
  return log_norm_ - 0.5 * (params_.dof + static_cast<double>(p)) * std::log(1.0 + q / params_.dof);
}

Vector mvn_sample(const GaussianMoments& m, Rng& rng) { return Mvn(m).sample(rng); }
double mvn_logpdf(const GaussianMoments& m, const Vector& x) { return Mvn(m).log_density(x); }
Vector mvt_sample(const StudentTParams& t, Rng& rng) { return Mvt(t).sample(rng); }
double mvt_logpdf(const StudentTParams& t, const Vector& x) { return Mvt(t).log_density(x); }

GaussianMoments gaussian_condition(const GaussianMoments& m, Eigen::Index split, const Vector& value,
                                   const JitterPolicy& policy) {
  const Eigen::Index p = m.dim();
  if (split < 0 || split > p || value.size() != split) {
    throw Error(ErrorCode::kDimensionMismatch, "gaussian_condition: bad split or value size");
  }
  const Eigen::Index rest = p - split;
  if (split == 0) return m;
  if (rest == 0) return GaussianMoments{Vector(0), Matrix(0, 0)};

  const Matrix s_tt = m.cov.topLeftCorner(split, split);
  const Matrix s_te = m.cov.topRightCorner(split, rest);
  const Matrix s_ee = m.cov.bottomRightCorner(rest, rest);
  CholeskyFactor f;
  try {
    f = cholesky(0.5 * (s_tt + s_tt.transpose()), policy);
  } catch (const Error& e) {
    throw Error(ErrorCode::kSingularBlock, std::string("conditioning block: ") + e.what());
  }
  const auto l = f.lower.triangularView<Eigen::Lower>();
  // A = L^{-1} S_te, so S_te^T S_tt^{-1} S_te = A^T A.
  const Matrix a = l.solve(s_te);
  const Vector r = l.solve(Vector(value - m.mean.head(split)));
  GaussianMoments out;
  out.mean = m.mean.tail(rest) + a.transpose() * r;
  Matrix cov = s_ee - a.transpose() * a;
  out.cov = 0.5 * (cov + cov.transpose());
  return out;
}

GaussianMoments gaussian_marginal(const GaussianMoments& m, Eigen::Index begin, Eigen::Index size) {
  if (begin < 0 || size < 0 || begin + size > m.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "gaussian_marginal: range out of bounds");
  }
  return GaussianMoments{m.mean.segment(begin, size), m.cov.block(begin, begin, size, size)};
}

double logsumexp(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::kEmptyInput, "logsumexp of empty input");
  const double hi = *std::max_element(values.begin(), values.end());
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (const double v : values) s += std::exp(v - hi);
  return hi + std::log(s);
}

}  // namespace bedkit::numkit
