#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include "bedkit/error.hpp"
#include "bedkit/numkit.hpp"
#include "bedkit/rng.hpp"

using namespace bedkit;
using namespace bedkit::numkit;

namespace {

Matrix random_spd(Eigen::Index p, Rng& rng) {
  Matrix a(p, p);
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) a(i, j) = rng.normal();
  }
  return a * a.transpose() + 0.1 * Matrix::Identity(p, p);
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kIoError;
}

}  // namespace

TEST_CASE("philox streams are reproducible and distinct") {
  Rng a(7, 3);
  Rng b(7, 3);
  Rng c(7, 4);
  Rng d(8, 3);
  int same_c = 0;
  int same_d = 0;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x > 0.0);
    CHECK(x < 1.0);
    same_c += x == c.uniform();
    same_d += x == d.uniform();
  }
  CHECK(same_c == 0);
  CHECK(same_d == 0);
}

TEST_CASE("stream factory separates replicates, designs and purposes") {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t r = 0; r < 4; ++r) {
    for (std::uint64_t di = 0; di < 4; ++di) {
      const StreamFactory f(42, r, di);
      for (std::uint64_t i = 0; i < 4; ++i) {
        for (auto p : {StreamPurpose::kOuter, StreamPurpose::kMarginal, StreamPurpose::kConditional}) {
          firsts.insert(f.stream(i, p).engine()());
        }
      }
    }
  }
  CHECK(firsts.size() == 4 * 4 * 4 * 3);
}

TEST_CASE("normal and chi-square moments") {
  Rng rng(1, 0);
  constexpr int n = 200000;
  double s = 0, s2 = 0, c = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
    c += rng.chi_square(2.5);
  }
  CHECK(std::abs(s / n) < 0.015);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
  CHECK(std::abs(c / n - 2.5) < 0.05);
}

TEST_CASE("cholesky") {
  SUBCASE("identity") {
    const auto f = cholesky(Matrix::Identity(3, 3));
    CHECK(f.lower.isApprox(Matrix::Identity(3, 3)));
    CHECK(f.jitter == 0.0);
  }
  SUBCASE("diagonal") {
    Matrix a(2, 2);
    a << 4, 0, 0, 9;
    Matrix l(2, 2);
    l << 2, 0, 0, 3;
    CHECK((cholesky(a).lower - l).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("random SPD round trip") {
    Rng rng(3, 0);
    for (int t = 0; t < 50; ++t) {
      const Matrix a = random_spd(5, rng);
      const auto f = cholesky(a);
      const Matrix back = f.lower * f.lower.transpose();
      const Matrix target = a + f.jitter * Matrix::Identity(5, 5);
      CHECK((back - target).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("singular matrix is rescued by jitter") {
    Matrix a = Matrix::Ones(3, 3);
    const auto f = cholesky(a);
    CHECK(f.jitter > 0.0);
    CHECK((f.lower * f.lower.transpose() - (a + f.jitter * Matrix::Identity(3, 3))).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("errors") {
    Matrix ns(2, 2);
    ns << 1, 0.5, 0.4, 1;
    CHECK(code_of([&] { (void)cholesky(ns); }) == ErrorCode::kNotSymmetric);
    Matrix neg(2, 2);
    neg << 1, 0, 0, -1;
    CHECK(code_of([&] { (void)cholesky(neg); }) == ErrorCode::kNotPDAfterMaxJitter);
  }
}

TEST_CASE("multivariate normal") {
  const GaussianMoments std1{Vector::Zero(1), Matrix::Identity(1, 1)};
  CHECK(mvn_logpdf(std1, Vector::Zero(1)) == doctest::Approx(-0.918938533204673).epsilon(1e-14));

  Rng rng(5, 0);
  const GaussianMoments m2{Vector::Zero(2), Matrix::Identity(2, 2)};
  const Mvn mvn(m2);
  Vector mean = Vector::Zero(2);
  constexpr int n = 100000;
  for (int i = 0; i < n; ++i) mean += mvn.sample(rng);
  mean /= n;
  CHECK(std::abs(mean[0]) < 0.02);
  CHECK(std::abs(mean[1]) < 0.02);

  const Matrix s = random_spd(3, rng);
  const GaussianMoments g{Vector::Random(3), s};
  for (int t = 0; t < 20; ++t) {
    const Vector v = Vector::Random(3) * 3.0;
    CHECK(mvn_logpdf(g, g.mean + v) == doctest::Approx(mvn_logpdf(g, g.mean - v)).epsilon(1e-12));
  }
}

TEST_CASE("normal densities integrate to one") {
  const GaussianMoments g1{Vector::Constant(1, 0.3), Matrix::Constant(1, 1, 2.0)};
  double s1 = 0;
  const double h1 = 1e-3;
  for (double x = -30; x <= 30; x += h1) s1 += std::exp(mvn_logpdf(g1, Vector::Constant(1, x))) * h1;
  CHECK(std::abs(s1 - 1.0) < 1e-4);

  Matrix c(2, 2);
  c << 1.0, 0.3, 0.3, 0.5;
  const Mvn g2({Vector::Zero(2), c});
  double s2 = 0;
  const double h2 = 0.02;
  Vector x(2);
  for (double a = -8; a <= 8; a += h2) {
    for (double b = -8; b <= 8; b += h2) {
      x << a, b;
      s2 += std::exp(g2.log_density(x)) * h2 * h2;
    }
  }
  CHECK(std::abs(s2 - 1.0) < 1e-4);
}

TEST_CASE("multivariate t") {
  Rng rng(9, 0);
  const StudentTParams t3{Vector::Random(3), random_spd(3, rng), 2.5};
  for (int i = 0; i < 20; ++i) {
    const Vector v = Vector::Random(3) * 4.0;
    CHECK(mvt_logpdf(t3, t3.location + v) == doctest::Approx(mvt_logpdf(t3, t3.location - v)).epsilon(1e-12));
  }

  const StudentTParams t1{Vector::Zero(1), Matrix::Identity(1, 1), 2.5};
  const Mvt mvt1(t1);
  double s = 0;
  const double h = 1e-3;
  for (double x = -50; x <= 50; x += h) s += std::exp(mvt1.log_density(Vector::Constant(1, x))) * h;
  CHECK(std::abs(s - 1.0) < 1e-4);

  const StudentTParams big{Vector::Zero(2), Matrix::Identity(2, 2), 1e6};
  const GaussianMoments n2{Vector::Zero(2), Matrix::Identity(2, 2)};
  for (int i = 0; i < 100; ++i) {
    const Vector x = Vector::Random(2) * 3.0;
    CHECK(std::abs(mvt_logpdf(big, x) - mvn_logpdf(n2, x)) < 1e-3);
  }
}

TEST_CASE("multivariate t covariance") {
  Rng rng(11, 0);
  const Mvt t({Vector::Zero(2), Matrix::Identity(2, 2), 5.0});
  Matrix cov = Matrix::Zero(2, 2);
  constexpr int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const Vector x = t.sample(rng);
    cov += x * x.transpose();
  }
  cov /= n;
  const double expect = 5.0 / 3.0;
  CHECK(std::abs(cov(0, 0) / expect - 1.0) < 0.05);
  CHECK(std::abs(cov(1, 1) / expect - 1.0) < 0.05);
  CHECK(std::abs(cov(0, 1)) < 0.05 * expect);
}

TEST_CASE("gaussian conditioning") {
  Matrix s(2, 2);
  s << 1, 0.5, 0.5, 1;
  const GaussianMoments m{Vector::Zero(2), s};
  const auto c = gaussian_condition(m, 1, Vector::Constant(1, 2.0));
  CHECK(c.mean[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(c.cov(0, 0) == doctest::Approx(0.75).epsilon(1e-14));
  const auto c2 = gaussian_condition(m, 1, Vector::Constant(1, -7.0));
  CHECK(c2.cov(0, 0) == doctest::Approx(0.75).epsilon(1e-14));

  Matrix bd = Matrix::Zero(3, 3);
  bd(0, 0) = 2.0;
  bd.bottomRightCorner(2, 2) << 1.5, 0.2, 0.2, 0.7;
  const GaussianMoments ind{Vector(Eigen::Vector3d(1, 2, 3)), bd};
  const auto ci = gaussian_condition(ind, 1, Vector::Constant(1, 5.0));
  const auto mi = gaussian_marginal(ind, 1, 2);
  CHECK((ci.mean - mi.mean).norm() < 1e-14);
  CHECK((ci.cov - mi.cov).norm() < 1e-14);

  // Brute force: log p(eta | theta) = log p(theta, eta) - log p(theta).
  Rng rng(13, 0);
  const GaussianMoments joint{Vector::Random(4), random_spd(4, rng)};
  const auto theta_marg = gaussian_marginal(joint, 0, 2);
  for (int t = 0; t < 20; ++t) {
    const Vector z = joint.mean + Vector::Random(4);
    const auto cond = gaussian_condition(joint, 2, z.head(2));
    const double direct = mvn_logpdf(cond, z.tail(2));
    const double ratio = mvn_logpdf(joint, z) - mvn_logpdf(theta_marg, z.head(2));
    CHECK(std::abs(direct - ratio) < 1e-8 * std::max(1.0, std::abs(ratio)));
  }
}

TEST_CASE("logsumexp") {
  const std::vector<double> zeros{0.0, 0.0};
  CHECK(logsumexp(zeros) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  const std::vector<double> low{-1000.0, -1000.0};
  CHECK(logsumexp(low) == doctest::Approx(-1000.0 + std::numbers::ln2).epsilon(1e-15));
  Rng rng(17, 0);
  std::vector<double> v(100);
  double naive = 0;
  for (auto& x : v) {
    x = rng.normal();
    naive += std::exp(x);
  }
  CHECK(std::abs(logsumexp(v) - std::log(naive)) < 1e-12);
  CHECK(code_of([] { (void)logsumexp(std::vector<double>{}); }) == ErrorCode::kEmptyInput);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(logsumexp(std::vector<double>{-inf, -inf}) == -inf);
}

TEST_CASE("eigenvalue floor") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 1.0;
  const Matrix f = floor_eigenvalues(a, 1e-6);
  Eigen::SelfAdjointEigenSolver<Matrix> es(f);
  CHECK(es.eigenvalues().minCoeff() >= 1e-6 * (1 - 1e-12));
  CHECK(f(0, 0) == doctest::Approx(1.0));
}
