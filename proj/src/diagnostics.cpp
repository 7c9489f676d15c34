#include "bedkit/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "bedkit/error.hpp"

namespace bedkit::diagnostics {

double cess(std::span<const double> weights) {
  double mx = 0.0;
  for (const double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw Error(ErrorCode::kInvalidConfig, "weights must be finite and >= 0");
    mx = std::max(mx, w);
  }
  if (!(mx > 0.0)) throw Error(ErrorCode::kAllZero, "no positive weights");
  double s = 0.0;
  double s2 = 0.0;
  for (const double w : weights) {
    s += w / mx;
    s2 += (w / mx) * (w / mx);
  }
  return s * s / s2;
}

ReplicateStats replicate_stats(std::span<const double> values, double reference) {
  const std::size_t r = values.size();
  if (r < 2) throw Error(ErrorCode::kTooFewReplicates, "need at least two replicates");
  ReplicateStats st;
  st.R = r;
  st.reference = reference;
  const auto rd = static_cast<double>(r);
  double sum = 0.0;
  for (const double v : values) sum += v;
  st.mean = sum / rd;
  double m2 = 0.0;
  double m4 = 0.0;
  double e2 = 0.0;
  double e4 = 0.0;
  for (const double v : values) {
    const double c = v - st.mean;
    m2 += c * c;
    m4 += c * c * c * c;
    const double e = v - reference;
    e2 += e * e;
    e4 += e * e * e * e;
  }
  st.variance = m2 / (rd - 1.0);
  st.bias = st.mean - reference;
  st.mse = st.bias * st.bias + st.variance;
  st.se_mean = std::sqrt(st.variance / rd);
  st.se_bias = st.se_mean;
  // Var(s^2) ~ (mu4 - sigma^4 (R-3)/(R-1)) / R.
  const double mu4 = m4 / rd;
  const double s4 = st.variance * st.variance;
  st.se_variance = std::sqrt(std::max(0.0, (mu4 - s4 * (rd - 3.0) / (rd - 1.0)) / rd));
  // Squared errors are iid; their sample spread gives the MSE error bar.
  const double mean_sq = e2 / rd;
  st.se_mse = std::sqrt(std::max(0.0, (e4 / rd - mean_sq * mean_sq) / (rd - 1.0)));
  return st;
}

DeltaConstants estimate_delta_constants(const estimator::EigEstimate& est) {
  const std::size_t n = est.log_cond.size();
  if (n == 0) throw Error(ErrorCode::kEmptyInput, "estimate has no outer samples");
  DeltaConstants dc;
  double c1 = 0.0;
  double c2 = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double rm = est.relvar_marg[i];
    if (std::isnan(rm)) throw Error(ErrorCode::kInsufficientInnerSamples, "marginal estimator needs M1 >= 2");
    c1 += rm;
    d2 += rm * rm;
    if (est.n_eta > 0) {
      const double rc = est.relvar_cond[i];
      if (std::isnan(rc)) throw Error(ErrorCode::kInsufficientInnerSamples, "conditional estimator needs M2 >= 2");
      c2 += rc;
      d1 += rc * rc;
    }
  }
  const auto nd = static_cast<double>(n);
  dc.C1 = 0.5 * c1 / nd;
  dc.C2 = 0.5 * c2 / nd;
  dc.D1 = d1 / nd;
  dc.D2 = d2 / nd;
  if (n > 1) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += est.log_cond[i] - est.log_marg[i];
    mean /= nd;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = est.log_cond[i] - est.log_marg[i] - mean;
      ss += r * r;
    }
    dc.D3 = ss / (nd - 1.0);
  }
  return dc;
}

namespace {

void check_budget(double W) {
  if (!(W >= 8.0) || !std::isfinite(W)) throw Error(ErrorCode::kInvalidBudget, "budget W must be finite and >= 8");
}

// Shrinks N until the plan fits the budget.
void fit(ScalingPlan& plan) {
  plan.M = std::max<std::int64_t>(1, std::min<std::int64_t>(plan.M, static_cast<std::int64_t>(plan.W / 2.0)));
  plan.N = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(plan.W / (2.0 * static_cast<double>(plan.M)))));
}

}  // namespace

ScalingPlan optimal_alpha(double c_tilde, double d3, double W) {
  check_budget(W);
  if (!(c_tilde >= 0.0) || !(d3 > 0.0)) throw Error(ErrorCode::kInvalidBudget, "need c_tilde >= 0 and d3 > 0");
  ScalingPlan plan;
  plan.W = W;
  plan.alpha = 2.0 * std::cbrt(c_tilde / d3) * std::pow(W, -1.0 / 6.0);
  if (plan.alpha == 0.0) {
    plan.M = 1;
  } else {
    const double n = std::max(1.0, std::round(std::sqrt(W) / plan.alpha));
    plan.M = std::max<std::int64_t>(1, std::llround(n * plan.alpha * plan.alpha / 2.0));
  }
  fit(plan);
  return plan;
}

ScalingPlan fixed_ratio_plan(double ratio, double W) {
  check_budget(W);
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw Error(ErrorCode::kInvalidBudget, "ratio must be positive");
  ScalingPlan plan;
  plan.W = W;
  plan.alpha = std::sqrt(2.0 * ratio);
  plan.N = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(std::sqrt(W / (2.0 * ratio)))));
  plan.M = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(W / (2.0 * static_cast<double>(plan.N)))));
  plan.N = std::min<std::int64_t>(plan.N, static_cast<std::int64_t>(std::floor(W / (2.0 * static_cast<double>(plan.M)))));
  return plan;
}

ScalingPlan scaled_ratio_plan(double anchor_ratio, double anchor_W, double W) {
  check_budget(anchor_W);
  const double ratio = W == anchor_W ? anchor_ratio : anchor_ratio * std::cbrt(anchor_W / W);
  return fixed_ratio_plan(ratio, W);
}

double lg_paired_reference(const model::LinearGaussianModel& model, double d, const estimator::EigEstimate& est) {
  if (est.outer.empty()) throw Error(ErrorCode::kEmptyInput, "estimate has no outer samples");
  double sum = 0.0;
  for (const auto& s : est.outer) {
    const model::Vector theta = s.z.head(model.n_theta());
    sum += model::lg_conditional_likelihood(model, s.y, theta, d) - model::lg_marginal_likelihood(model, s.y, d);
  }
  return sum / static_cast<double>(est.outer.size());
}

}  // namespace bedkit::diagnostics
