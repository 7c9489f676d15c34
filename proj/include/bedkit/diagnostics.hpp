#pragma once

#include <cstdint>
#include <span>

#include "bedkit/estimator.hpp"
#include "bedkit/model.hpp"

namespace bedkit::diagnostics {

/// Customized effective sample size 1 / sum(w~^2) of weights normalized to
/// sum to one. Accepts unnormalized non-negative weights. Throws kAllZero.
double cess(std::span<const double> weights);

struct ReplicateStats {
  std::size_t R = 0;
  double reference = 0.0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased, divides by R - 1
  double bias = 0.0;
  double mse = 0.0;  // bias^2 + variance
  double se_mean = 0.0;
  double se_bias = 0.0;
  double se_variance = 0.0;
  double se_mse = 0.0;
};

/// Throws kTooFewReplicates when fewer than two values are given.
ReplicateStats replicate_stats(std::span<const double> values, double reference);

/// Leading-order bias and variance constants:
///   bias     ~ C1/M1 - C2/M2
///   variance ~ D3/N + D1/(N M2) + D2/(N M1)
struct DeltaConstants {
  double C1 = 0.0;
  double C2 = 0.0;
  double D1 = 0.0;
  double D2 = 0.0;
  double D3 = 0.0;

  [[nodiscard]] double predicted_bias(double M1, double M2) const { return C1 / M1 - C2 / M2; }
  [[nodiscard]] double predicted_variance(double N, double M1, double M2) const {
    return D3 / N + D1 / (N * M2) + D2 / (N * M1);
  }
};

/// Plug-in estimates from the per-outer inner statistics of one run.
/// Throws kInsufficientInnerSamples when M1 < 2, or M2 < 2 with nuisance parameters.
DeltaConstants estimate_delta_constants(const estimator::EigEstimate& est);

/// Integer allocation (N outer, M inner with M1 = M2 = M) for a budget W = 2MN.
struct ScalingPlan {
  double W = 0.0;
  double alpha = 0.0;  // requested alpha, alpha^2 = 2M/N
  std::int64_t N = 1;
  std::int64_t M = 1;

  [[nodiscard]] double alpha_sq() const { return 2.0 * static_cast<double>(M) / static_cast<double>(N); }
  [[nodiscard]] double ratio() const { return static_cast<double>(M) / static_cast<double>(N); }
};

/// alpha* = 2 (C~/D3)^(1/3) W^(-1/6). Throws kInvalidBudget.
ScalingPlan optimal_alpha(double c_tilde, double d3, double W);

/// Largest N with M/N near `ratio` and 2MN <= W < 2(M+1)(N+1). Throws kInvalidBudget.
ScalingPlan fixed_ratio_plan(double ratio, double W);

/// Ratio M/N scaled as W^(-1/3) from `anchor_ratio` at `anchor_W`.
ScalingPlan scaled_ratio_plan(double anchor_ratio, double anchor_W, double W);

/// EIG summand average with both likelihoods replaced by their closed forms
/// at the same outer samples. Subtracting it from the estimate removes the
/// outer-sampling noise and leaves the inner-estimator error.
double lg_paired_reference(const model::LinearGaussianModel& model, double d, const estimator::EigEstimate& est);

}  // namespace bedkit::diagnostics
