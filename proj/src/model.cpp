#include "bedkit/model.hpp"

#include <bit>
#include <cmath>

#include "bedkit/error.hpp"

namespace bedkit::model {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

bool block_independent(const Matrix& cov, Eigen::Index split) {
  const Eigen::Index rest = cov.rows() - split;
  if (split == 0 || rest == 0) return true;
  return cov.topRightCorner(split, rest).cwiseAbs().maxCoeff() == 0.0;
}

}  // namespace

Model::Model(Eigen::Index n_theta, Eigen::Index n_params, Eigen::Index n_y, double noise_sigma, DesignBounds bounds)
    : n_theta_(n_theta), n_params_(n_params), n_y_(n_y), sigma_(noise_sigma), bounds_(std::move(bounds)) {
  if (n_theta < 1 || n_theta > n_params) {
    throw Error(ErrorCode::kInvalidConfig, "interest dimension must satisfy 1 <= n_theta <= n_params");
  }
  if (!(noise_sigma > 0.0) || !std::isfinite(noise_sigma)) {
    throw Error(ErrorCode::kInvalidConfig, "noise sigma must be positive and finite");
  }
  if (bounds_.lo.size() != bounds_.hi.size()) throw Error(ErrorCode::kDimensionMismatch, "design bounds sizes differ");
  log_norm_ = -static_cast<double>(n_y_) * (std::log(sigma_) + 0.5 * kLogTwoPi);
}

void Model::check_design(const Vector& d) const {
  if (d.size() != n_d()) throw Error(ErrorCode::kDimensionMismatch, "design has wrong dimension");
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d[i] >= bounds_.lo[i] && d[i] <= bounds_.hi[i])) {
      throw Error(ErrorCode::kInvalidConfig, "design coordinate " + std::to_string(i) + " outside bounds");
    }
  }
}

Vector Model::forward(const Vector& z, const Vector& d, EvalCounter* counter) const {
  if (z.size() != n_params_ || d.size() != n_d()) throw Error(ErrorCode::kDimensionMismatch, "forward: bad sizes");
  total_.fetch_add(1, std::memory_order_relaxed);
  if (counter != nullptr) counter->add();
  return do_forward(z, d);
}

double Model::loglike(std::span<const double> y, std::span<const double> g) const {
  if (static_cast<Eigen::Index>(y.size()) != n_y_ || g.size() != y.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "loglike: bad sizes");
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = (y[i] - g[i]) / sigma_;
    ss += r * r;
  }
  return log_norm_ - 0.5 * ss;
}

Vector Model::sample_observation(const Vector& g, Rng& rng) const {
  Vector y(g.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = g[i] + sigma_ * rng.normal();
  return y;
}

std::optional<GaussianMoments> Model::exact_posterior(const Vector&, const Vector&) const { return std::nullopt; }

const Vector& ForwardCache::get(const Model& model, const Vector& z, const Vector& d, EvalCounter* counter) {
  Key key;
  key.reserve(static_cast<std::size_t>(z.size() + d.size() + 1));
  key.push_back(static_cast<std::uint64_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) key.push_back(std::bit_cast<std::uint64_t>(z[i]));
  for (Eigen::Index i = 0; i < d.size(); ++i) key.push_back(std::bit_cast<std::uint64_t>(d[i]));
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) it = entries_.emplace(std::move(key), model.forward(z, d, counter)).first;
  return it->second;
}

std::size_t ForwardCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

GaussianPriorModel::GaussianPriorModel(Eigen::Index n_theta, GaussianMoments prior, Eigen::Index n_y,
                                       double noise_sigma, DesignBounds bounds)
    : Model(n_theta, prior.dim(), n_y, noise_sigma, std::move(bounds)), prior_(std::move(prior)) {
  if (n_eta() > 0 && block_independent(prior_.moments().cov, n_theta)) {
    eta_marginal_.emplace(numkit::gaussian_marginal(prior_.moments(), n_theta, n_eta()));
  }
}

Vector GaussianPriorModel::sample_prior(Rng& rng) const { return prior_.sample(rng); }

double GaussianPriorModel::log_prior(std::span<const double> z) const { return prior_.log_density(z); }

Vector GaussianPriorModel::sample_eta_given_theta(const Vector& theta, Rng& rng) const {
  if (n_eta() == 0) return Vector(0);
  if (eta_marginal_) return eta_marginal_->sample(rng);
  return numkit::Mvn(numkit::gaussian_condition(prior(), n_theta(), theta)).sample(rng);
}

double GaussianPriorModel::log_prior_eta_given_theta(const Vector& theta, std::span<const double> eta) const {
  if (n_eta() == 0) return 0.0;
  if (eta_marginal_) return eta_marginal_->log_density(eta);
  return numkit::Mvn(numkit::gaussian_condition(prior(), n_theta(), theta)).log_density(eta);
}

// ---------------------------------------------------------------------------
// Linear-Gaussian

Coupling default_coupling(Eigen::Index n) { return n == 2 ? Coupling::kNone : Coupling::kDense; }

namespace {

GaussianMoments standard_prior(Eigen::Index n) {
  if (n < 2) throw Error(ErrorCode::kInvalidConfig, "linear-Gaussian dimension must be >= 2");
  return GaussianMoments{Vector::Zero(n), Matrix::Identity(n, n)};
}

DesignBounds unit_interval() {
  return DesignBounds{Vector::Constant(1, 0.0), Vector::Constant(1, 1.0)};
}

}  // namespace

LinearGaussianModel::LinearGaussianModel(Params params)
    : GaussianPriorModel(params.n_theta, standard_prior(params.n), params.n, params.sigma, unit_interval()),
      params_(params) {
  if (!(params_.gain > 0.0)) throw Error(ErrorCode::kInvalidConfig, "gain k must be positive");
}

std::unique_ptr<Model> LinearGaussianModel::with_interest_dim(Eigen::Index n_theta) const {
  Params p = params_;
  p.n_theta = n_theta;
  return std::make_unique<LinearGaussianModel>(p);
}

Matrix LinearGaussianModel::design_matrix(double d) const {
  const Eigen::Index n = params_.n;
  const double k = params_.gain;
  Matrix g = Matrix::Zero(n, n);
  if (params_.coupling == Coupling::kDense) g.setOnes();
  if (params_.coupling == Coupling::kCorners) {
    g(0, n - 1) = 1.0;
    g(n - 1, 0) = 1.0;
  }
  g(0, 0) = k * d;
  for (Eigen::Index i = 1; i < n; ++i) g(i, i) = k * (1.0 - d);
  return g;
}

Vector LinearGaussianModel::do_forward(const Vector& z, const Vector& d) const {
  const Eigen::Index n = params_.n;
  const double k = params_.gain;
  Vector g(n);
  for (Eigen::Index i = 0; i < n; ++i) g[i] = k * (1.0 - d[0]) * z[i];
  g[0] = k * d[0] * z[0];
  if (params_.coupling == Coupling::kDense) {
    const double total = z.sum();
    for (Eigen::Index i = 0; i < n; ++i) g[i] += total - z[i];
  } else if (params_.coupling == Coupling::kCorners) {
    g[0] += z[n - 1];
    g[n - 1] += z[0];
  }
  return g;
}

std::optional<GaussianMoments> LinearGaussianModel::exact_posterior(const Vector& y, const Vector& d) const {
  return lg_posterior(*this, y, d[0]);
}

namespace {

// S = G Gamma_pr G^T + Gamma_obs, factored.
numkit::CholeskyFactor predictive_factor(const LinearGaussianModel& model, const Matrix& g) {
  const double s2 = model.noise_sigma() * model.noise_sigma();
  Matrix s = g * model.prior().cov * g.transpose();
  s.diagonal().array() += s2;
  s = 0.5 * (s + s.transpose());
  try {
    return numkit::cholesky(s);
  } catch (const Error& e) {
    throw Error(ErrorCode::kSingularSystem, e.what());
  }
}

}  // namespace

GaussianMoments lg_posterior(const LinearGaussianModel& model, const Vector& y, double d) {
  if (y.size() != model.n_y()) throw Error(ErrorCode::kDimensionMismatch, "lg_posterior: bad y size");
  const Matrix g = model.design_matrix(d);
  const GaussianMoments& pr = model.prior();
  const auto f = predictive_factor(model, g);
  const auto l = f.lower.triangularView<Eigen::Lower>();
  // Gamma_post = Gamma_pr - B^T B with B = L^{-1} G Gamma_pr.
  const Matrix b = l.solve(Matrix(g * pr.cov));
  const Vector r = l.solve(Vector(y - g * pr.mean));
  GaussianMoments post;
  post.mean = pr.mean + b.transpose() * r;
  Matrix cov = pr.cov - b.transpose() * b;
  post.cov = 0.5 * (cov + cov.transpose());
  return post;
}

double lg_eig_closed_form(const LinearGaussianModel& model, double d, EigMode mode) {
  const Vector y = Vector::Zero(model.n_y());
  const GaussianMoments post = lg_posterior(model, y, d);
  const Eigen::Index k = mode == EigMode::kJoint ? model.n_params() : model.n_theta();
  const Matrix pr_block = model.prior().cov.topLeftCorner(k, k);
  const Matrix post_block = post.cov.topLeftCorner(k, k);
  return 0.5 * (numkit::cholesky(pr_block).log_det() - numkit::cholesky(post_block).log_det());
}

double lg_marginal_likelihood(const LinearGaussianModel& model, const Vector& y, double d) {
  if (y.size() != model.n_y()) throw Error(ErrorCode::kDimensionMismatch, "lg_marginal_likelihood: bad y size");
  const Matrix g = model.design_matrix(d);
  const auto f = predictive_factor(model, g);
  const Vector mean = g * model.prior().mean;
  const double q = numkit::mahalanobis_sq(f.lower, mean, std::span(y.data(), y.size()));
  return -0.5 * (static_cast<double>(y.size()) * kLogTwoPi + f.log_det() + q);
}

double lg_conditional_likelihood(const LinearGaussianModel& model, const Vector& y, const Vector& theta, double d) {
  const Eigen::Index nt = model.n_theta();
  const Eigen::Index ny = model.n_y();
  if (y.size() != ny || theta.size() != nt) {
    throw Error(ErrorCode::kDimensionMismatch, "lg_conditional_likelihood: bad sizes");
  }
  const Matrix g = model.design_matrix(d);
  const GaussianMoments& pr = model.prior();
  const double s2 = model.noise_sigma() * model.noise_sigma();
  // Joint of (theta, y).
  GaussianMoments joint;
  joint.mean.resize(nt + ny);
  joint.mean.head(nt) = pr.mean.head(nt);
  joint.mean.tail(ny) = g * pr.mean;
  joint.cov.resize(nt + ny, nt + ny);
  const Matrix cross = g * pr.cov.leftCols(nt);  // Cov(y, theta)
  joint.cov.topLeftCorner(nt, nt) = pr.cov.topLeftCorner(nt, nt);
  joint.cov.bottomLeftCorner(ny, nt) = cross;
  joint.cov.topRightCorner(nt, ny) = cross.transpose();
  Matrix syy = g * pr.cov * g.transpose();
  syy.diagonal().array() += s2;
  joint.cov.bottomRightCorner(ny, ny) = 0.5 * (syy + syy.transpose());
  GaussianMoments cond;
  try {
    cond = numkit::gaussian_condition(joint, nt, theta);
  } catch (const Error& e) {
    throw Error(ErrorCode::kSingularSystem, e.what());
  }
  try {
    return numkit::mvn_logpdf(cond, y);
  } catch (const Error& e) {
    throw Error(ErrorCode::kSingularSystem, e.what());
  }
}

// ---------------------------------------------------------------------------
// Mossbauer

namespace {

constexpr std::array<double, 4> kPriorMean{0.0, 0.0, 0.0, 1.0};
constexpr std::array<double, 4> kPriorSd{1.0, 0.3, 0.3, 0.2};

std::array<int, 4> interest_order(MossbauerParam interest) {
  std::array<int, 4> order{};
  order[0] = static_cast<int>(interest);
  int k = 1;
  for (int i = 0; i < 4; ++i) {
    if (i != static_cast<int>(interest)) order[static_cast<std::size_t>(k++)] = i;
  }
  return order;
}

GaussianMoments mossbauer_prior(MossbauerParam interest) {
  const auto order = interest_order(interest);
  GaussianMoments m{Vector(4), Matrix::Zero(4, 4)};
  for (int i = 0; i < 4; ++i) {
    const auto nat = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    m.mean[i] = kPriorMean[nat];
    m.cov(i, i) = kPriorSd[nat] * kPriorSd[nat];
  }
  return m;
}

DesignBounds velocity_box(Eigen::Index n_d) {
  if (n_d < 1) throw Error(ErrorCode::kInvalidConfig, "Mossbauer needs at least one velocity");
  return DesignBounds{Vector::Constant(n_d, -3.0), Vector::Constant(n_d, 3.0)};
}

}  // namespace

MossbauerModel::MossbauerModel(Params params)
    : GaussianPriorModel(params.n_theta, mossbauer_prior(params.interest), params.n_d, params.sigma,
                         velocity_box(params.n_d)),
      params_(params),
      order_(interest_order(params.interest)) {}

std::unique_ptr<Model> MossbauerModel::with_interest_dim(Eigen::Index n_theta) const {
  Params p = params_;
  p.n_theta = n_theta;
  return std::make_unique<MossbauerModel>(p);
}

std::array<double, 4> MossbauerModel::natural(const Vector& z) const {
  std::array<double, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto nat = static_cast<std::size_t>(order_[i]);
    out[nat] = nat == 0 ? z[static_cast<Eigen::Index>(i)] : std::exp(z[static_cast<Eigen::Index>(i)]);
  }
  return out;
}

Vector MossbauerModel::do_forward(const Vector& z, const Vector& d) const {
  const auto [center, width, height, offset] = natural(z);
  const double w2 = width * width;
  Vector g(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double u = center - d[i];
    g[i] = offset - height * w2 / (w2 + u * u);
  }
  return g;
}

std::optional<MossbauerParam> parse_mossbauer_param(std::string_view name) {
  if (name == "center") return MossbauerParam::kCenter;
  if (name == "width") return MossbauerParam::kWidth;
  if (name == "height") return MossbauerParam::kHeight;
  if (name == "offset") return MossbauerParam::kOffset;
  return std::nullopt;
}

}  // namespace bedkit::model
