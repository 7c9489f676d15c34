#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "bedkit/error.hpp"
#include "bedkit/model.hpp"

using namespace bedkit;
using namespace bedkit::model;

namespace {

LinearGaussianModel lg(Eigen::Index n, double k = 1.0, double sigma = 0.4, Eigen::Index n_theta = 1) {
  LinearGaussianModel::Params p;
  p.n = n;
  p.gain = k;
  p.sigma = sigma;
  p.n_theta = n_theta;
  p.coupling = default_coupling(n);
  return LinearGaussianModel(p);
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (const double x : v) out[i++] = x;
  return out;
}

double eq_joint(double d, double s) {
  const double s2 = s * s;
  return 0.5 * std::log(((1 - d) * (1 - d) + s2) * (d * d + s2) / (s2 * s2));
}
double eq_marg(double d, double s) { return 0.5 * std::log(1 + d * d / (s * s)); }

}  // namespace

TEST_CASE("model construction is validated") {
  LinearGaussianModel::Params p;
  p.sigma = 0.0;
  CHECK_THROWS_AS(LinearGaussianModel{p}, Error);
  p.sigma = 0.4;
  p.n_theta = 3;
  CHECK_THROWS_AS(LinearGaussianModel{p}, Error);
  const auto m = lg(2);
  CHECK_THROWS_AS(m.check_design(vec({1.5})), Error);
  CHECK_THROWS_AS(m.check_design(vec({0.5, 0.5})), Error);
  CHECK_NOTHROW(m.check_design(vec({1.0})));
}

TEST_CASE("linear-Gaussian forward") {
  const auto m = lg(2);
  const Vector g = m.forward(vec({1, 1}), vec({1.0}));
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);

  // Every off-diagonal entry is 1 for n > 2; matches the explicit matrix.
  const auto m4 = lg(4, 5.0);
  const Vector z = vec({0.3, -1.2, 0.7, 2.0});
  const Vector direct = m4.design_matrix(0.37) * z;
  CHECK((m4.forward(z, vec({0.37})) - direct).norm() < 1e-13);
  const Matrix g4 = m4.design_matrix(0.5);
  CHECK(g4(0, 0) == 2.5);
  CHECK(g4(1, 1) == 2.5);
  CHECK(g4(0, 3) == 1.0);
  CHECK(g4(2, 1) == 1.0);

  LinearGaussianModel::Params pc;
  pc.n = 4;
  pc.coupling = Coupling::kCorners;
  const LinearGaussianModel corners(pc);
  const Matrix gc = corners.design_matrix(0.2);
  CHECK(gc(0, 3) == 1.0);
  CHECK(gc(3, 0) == 1.0);
  CHECK(gc(1, 2) == 0.0);
  CHECK((corners.forward(z, vec({0.2})) - gc * z).norm() < 1e-13);
}

TEST_CASE("forward counts evaluations and the cache counts misses only") {
  const auto m = lg(2);
  EvalCounter c;
  const auto before = m.total_evaluations();
  (void)m.forward(vec({1, 2}), vec({0.3}), &c);
  (void)m.forward(vec({1, 2}), vec({0.3}), &c);
  CHECK(c.value() == 2);
  CHECK(m.total_evaluations() - before == 2);

  ForwardCache cache;
  EvalCounter cc;
  const Vector a = cache.get(m, vec({1, 2}), vec({0.3}), &cc);
  const Vector b = cache.get(m, vec({1, 2}), vec({0.3}), &cc);
  CHECK(cc.value() == 1);
  CHECK(a == b);
  (void)cache.get(m, vec({1, 2.0000000000000004}), vec({0.3}), &cc);
  CHECK(cc.value() == 2);
  CHECK(cache.size() == 2);
}

TEST_CASE("loglike") {
  const auto m = lg(2);
  const Vector g = vec({0.3, -0.1});
  CHECK(m.loglike(g, g) == doctest::Approx(-std::log(2 * std::numbers::pi * 0.16)).epsilon(1e-14));
  const Vector y = vec({0.5, 0.2});
  const Vector shift = vec({3.0, -2.0});
  CHECK(m.loglike(y, g) == doctest::Approx(m.loglike(y + shift, g + shift)).epsilon(1e-13));

  const GaussianMoments noise{g, 0.16 * Matrix::Identity(2, 2)};
  Rng rng(1, 0);
  for (int i = 0; i < 20; ++i) {
    const Vector yy = m.sample_observation(g, rng);
    CHECK(std::abs(m.loglike(yy, g) - numkit::mvn_logpdf(noise, yy)) < 1e-12);
  }
}

TEST_CASE("Mossbauer forward and prior") {
  const MossbauerModel m({});
  CHECK(m.n_d() == 3);
  CHECK(m.bounds().lo[0] == -3.0);
  CHECK(m.bounds().hi[2] == 3.0);
  Rng rng(2, 0);
  const Vector z = m.sample_prior(rng);
  const auto nat = m.natural(z);  // center, width, height, offset
  const double c = nat[0];
  const Vector at_center = m.forward(z, Vector::Constant(3, std::clamp(c, -3.0, 3.0)));
  if (std::abs(c) <= 3.0) CHECK(at_center[0] == doctest::Approx(nat[3] - nat[2]).epsilon(1e-12));

  // Far tail, using a center pushed away from the design box.
  Vector zf = z;
  for (Eigen::Index i = 0; i < 4; ++i) {
    if (m.natural_index(i) == 0) zf[i] = 1e7;
  }
  const Vector tail = m.forward(zf, vec({-3, 0, 3}));
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(tail[i] == doctest::Approx(nat[3]).epsilon(1e-10));
}

TEST_CASE("Mossbauer prior draws are positive with the stated log-moments") {
  const MossbauerModel m({});
  Rng rng(3, 0);
  constexpr int n = 100000;
  std::array<double, 4> s{}, s2{};
  bool positive = true;
  for (int i = 0; i < n; ++i) {
    const auto nat = m.natural(m.sample_prior(rng));
    for (int j = 1; j < 4; ++j) positive = positive && nat[static_cast<std::size_t>(j)] > 0.0;
    const std::array<double, 4> v{nat[0], std::log(nat[1]), std::log(nat[2]), std::log(nat[3])};
    for (std::size_t j = 0; j < 4; ++j) {
      s[j] += v[j];
      s2[j] += v[j] * v[j];
    }
  }
  CHECK(positive);
  const std::array<double, 4> mean{0.0, 0.0, 0.0, 1.0};
  const std::array<double, 4> sd{1.0, 0.3, 0.3, 0.2};
  for (std::size_t j = 0; j < 4; ++j) {
    const double mu = s[j] / n;
    const double var = s2[j] / n - mu * mu;
    CHECK(std::abs(mu - mean[j]) < 3.0 * sd[j] / std::sqrt(n));
    // SE of a sample variance is about sd^2 sqrt(2/n).
    CHECK(std::abs(var - sd[j] * sd[j]) < 3.0 * sd[j] * sd[j] * std::sqrt(2.0 / n));
  }
}

TEST_CASE("Mossbauer interest parameter comes first") {
  for (const auto* name : {"center", "width", "height", "offset"}) {
    const auto p = parse_mossbauer_param(name);
    REQUIRE(p.has_value());
    MossbauerModel::Params params;
    params.interest = *p;
    const MossbauerModel m(params);
    CHECK(m.natural_index(0) == static_cast<int>(*p));
  }
  CHECK_FALSE(parse_mossbauer_param("bogus").has_value());
}

TEST_CASE("linear-Gaussian posterior") {
  const auto wide = lg(2, 1.0, 1e6);
  const auto post = lg_posterior(wide, vec({1, 2}), 0.5);
  CHECK((post.cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-6);

  const auto m = lg(4, 5.0);
  const auto a = lg_posterior(m, vec({1, 2, 3, 4}), 0.3);
  const auto b = lg_posterior(m, vec({-5, 0, 2, 9}), 0.3);
  CHECK((a.cov - b.cov).cwiseAbs().maxCoeff() < 1e-14);

  const auto m2 = lg(2);
  const auto p2 = lg_posterior(m2, vec({0, 0}), 0.5);
  CHECK(-0.5 * std::log(p2.cov.determinant()) == doctest::Approx(0.9410).epsilon(1e-4));
  CHECK(-0.5 * std::log(p2.cov.determinant()) ==
        doctest::Approx(0.5 * std::log(0.41 * 0.41 / std::pow(0.4, 4))).epsilon(1e-12));

  // Matches the Kalman form with an explicit inverse.
  const Matrix G = m.design_matrix(0.7);
  const Matrix S = G * G.transpose() + 0.16 * Matrix::Identity(4, 4);
  const Matrix cov = Matrix::Identity(4, 4) - G.transpose() * S.inverse() * G;
  const Vector y = vec({0.2, -1, 3, 0.5});
  const Vector mean = G.transpose() * S.inverse() * y;
  const auto pk = lg_posterior(m, y, 0.7);
  CHECK((pk.cov - cov).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((pk.mean - mean).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("closed-form EIG on n = 2") {
  const auto m = lg(2);
  CHECK(lg_eig_closed_form(m, 0.0, EigMode::kMarginal) == doctest::Approx(0.0));
  CHECK(lg_eig_closed_form(m, 1.0, EigMode::kMarginal) == doctest::Approx(0.9905).epsilon(1e-4));
  double best_j = -1, best_m = -1;
  int arg_j = -1, arg_m = -1;
  for (int i = 0; i <= 100; ++i) {
    const double d = i / 100.0;
    const double uj = lg_eig_closed_form(m, d, EigMode::kJoint);
    const double um = lg_eig_closed_form(m, d, EigMode::kMarginal);
    CHECK(std::abs(uj - eq_joint(d, 0.4)) < 1e-10);
    CHECK(std::abs(um - eq_marg(d, 0.4)) < 1e-10);
    if (uj > best_j) best_j = uj, arg_j = i;
    if (um > best_m) best_m = um, arg_m = i;
  }
  CHECK(arg_m == 100);
  // At sigma = 0.4 the joint EIG peaks at both ends (the first wins ties); d = 1/2 is only a local maximum.
  CHECK(arg_j == 0);
  CHECK(lg_eig_closed_form(m, 0.0, EigMode::kJoint) == doctest::Approx(lg_eig_closed_form(m, 1.0, EigMode::kJoint)));
  CHECK(lg_eig_closed_form(m, 0.5, EigMode::kJoint) > lg_eig_closed_form(m, 0.45, EigMode::kJoint));
  CHECK(lg_eig_closed_form(m, 0.5, EigMode::kJoint) < lg_eig_closed_form(m, 0.0, EigMode::kJoint));
}

TEST_CASE("joint optimum moves to d = 1/2 once sigma^2 < 1/8") {
  for (const double sigma : {0.1, 0.3, 0.35}) {
    const auto m = lg(2, 1.0, sigma);
    int arg = -1;
    double best = -1;
    for (int i = 0; i <= 100; ++i) {
      const double u = lg_eig_closed_form(m, i / 100.0, EigMode::kJoint);
      if (u > best) best = u, arg = i;
    }
    CHECK(arg == 50);
  }
}

TEST_CASE("closed-form EIG on n = 4, k = 5") {
  const auto m = lg(4, 5.0);
  double best_j = -1, best_m = -1;
  int arg_j = -1, arg_m = -1;
  for (int i = 0; i <= 100; ++i) {
    const double d = i / 100.0;
    const double uj = lg_eig_closed_form(m, d, EigMode::kJoint);
    const double um = lg_eig_closed_form(m, d, EigMode::kMarginal);
    if (uj > best_j) best_j = uj, arg_j = i;
    if (um > best_m) best_m = um, arg_m = i;
  }
  CHECK(arg_j == 0);
  CHECK(std::abs(arg_m / 100.0 - 0.93) <= 0.02 + 1e-12);
}

TEST_CASE("closed-form likelihoods") {
  const auto m = lg(2);
  // At d = 1 the second row of G vanishes: that coordinate is pure noise.
  const Vector y = vec({0.4, -0.3});
  const double lm = lg_marginal_likelihood(m, y, 1.0);
  const GaussianMoments first{Vector::Zero(1), Matrix::Constant(1, 1, 1.0 + 0.16)};
  const GaussianMoments noise{Vector::Zero(1), Matrix::Constant(1, 1, 0.16)};
  CHECK(lm == doctest::Approx(numkit::mvn_logpdf(first, Vector::Constant(1, 0.4)) +
                              numkit::mvn_logpdf(noise, Vector::Constant(1, -0.3)))
                  .epsilon(1e-12));

  // Prior Monte Carlo average of the likelihood.
  const auto m4 = lg(4, 5.0);
  const Vector d = vec({0.6});
  const Vector y4 = vec({1.0, 2.0, -0.5, 1.5});
  Rng rng(4, 0);
  constexpr int n = 1000000;
  double s = 0, s2 = 0;
  const double ref = lg_marginal_likelihood(m4, y4, 0.6);
  for (int i = 0; i < n; ++i) {
    const Vector z = m4.sample_prior(rng);
    const double w = std::exp(m4.loglike(y4, m4.forward(z, d)) - ref);
    s += w;
    s2 += w * w;
  }
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  CHECK(std::abs(mean - 1.0) < 3.0 * se);

  // Conditional: brute force over eta given theta.
  const double theta = 0.3;
  const double lc = lg_conditional_likelihood(m4, y4, Vector::Constant(1, theta), 0.6);
  double sc = 0, sc2 = 0;
  for (int i = 0; i < n / 4; ++i) {
    Vector z = m4.sample_prior(rng);
    z[0] = theta;
    const double w = std::exp(m4.loglike(y4, m4.forward(z, d)) - lc);
    sc += w;
    sc2 += w * w;
  }
  const double mc = sc / (n / 4);
  const double sec = std::sqrt((sc2 / (n / 4) - mc * mc) / (n / 4));
  CHECK(std::abs(mc - 1.0) < 3.0 * sec);

  // With every parameter of interest the conditional likelihood is the likelihood.
  const auto joint = lg(4, 5.0, 0.4, 4);
  const Vector z = vec({0.1, -0.2, 0.3, 0.9});
  CHECK(lg_conditional_likelihood(joint, y4, z, 0.6) ==
        doctest::Approx(joint.loglike(y4, joint.forward(z, d))).epsilon(1e-10));
}

TEST_CASE("re-splitting keeps the model and moves the interest boundary") {
  const auto m = lg(4, 5.0);
  const auto j = m.with_interest_dim(4);
  CHECK(j->n_theta() == 4);
  CHECK(j->n_eta() == 0);
  const Vector z = vec({0.1, 0.2, 0.3, 0.4});
  CHECK((j->forward(z, vec({0.4})) - m.forward(z, vec({0.4}))).norm() == 0.0);
  CHECK(j->log_prior(std::span(z.data(), 4)) == m.log_prior(std::span(z.data(), 4)));
}
