#pragma once

#include <string>
#include <vector>

#include "protofuse/common.hpp"

namespace protofuse {

inline constexpr double kDefaultVarianceFloor = 1e-6;
inline constexpr double kDefaultLambda = 10.0;

/// Diagonal Gaussian. The variance is floored at construction so products
/// stay well-defined (a 1-shot class can produce zero variance).
struct DiagonalGaussian {
  Vector mean;
  Vector variance;

  static DiagonalGaussian make(Vector mean, Vector variance, double floor = kDefaultVarianceFloor);
  [[nodiscard]] int dim() const { return static_cast<int>(mean.size()); }
};

/// Responsibilities P(y = k | x), one row per sample.
struct SoftAssignment {
  RowMatrix responsibility;
  std::vector<bool> labeled;
};

/// Unlabeled rows: softmax over classes of lambda * cos(x, p_c).
/// Labeled rows (label >= 0, an index into `prototypes`) are one-hot.
SoftAssignment soft_assign(const RowMatrix& samples, const RowMatrix& prototypes, const std::vector<int>& labels,
                           double lambda = kDefaultLambda);

/// Responsibility-weighted mean and (population) variance of class `class_index`.
DiagonalGaussian weighted_gaussian_estimate(const RowMatrix& samples, const SoftAssignment& assignment,
                                            int class_index, double variance_floor = kDefaultVarianceFloor);

/// Closed-form product of two diagonal Gaussians (mean and variance only; the
/// scalar normalizer is not needed downstream).
DiagonalGaussian gaussian_product(const DiagonalGaussian& prior, const DiagonalGaussian& likelihood);

struct FusionConfig {
  double lambda = kDefaultLambda;
  double variance_floor = kDefaultVarianceFloor;
};

struct FusionResult {
  RowMatrix fused;
  SoftAssignment mean_assignment;
  SoftAssignment completed_assignment;
  std::vector<DiagonalGaussian> mean_based;  // likelihood
  std::vector<DiagonalGaussian> completed;   // prior
  std::vector<DiagonalGaussian> posterior;
  // Raw (unfloored) variance of the completed-prototype Gaussians.
  std::vector<Vector> completed_raw_variance;
};

/// Transductive fusion over the episode samples (support and query rows).
/// The completed-prototype Gaussian is the prior, the mean-based one the likelihood.
FusionResult fuse_prototypes(const RowMatrix& samples, const std::vector<int>& labels,
                             const RowMatrix& mean_prototypes, const RowMatrix& completed_prototypes,
                             const FusionConfig& config = {});

/// Gradient of a loss with respect to the completed prototypes, given its
/// gradient with respect to the fused prototypes. Mean-based quantities carry
/// no parameter dependence; the completed-prototype responsibilities are
/// differentiated through their softmax.
RowMatrix fuse_backward(const FusionResult& result, const RowMatrix& samples, const std::vector<int>& labels,
                        const RowMatrix& completed_prototypes, const RowMatrix& fused_grad,
                        const FusionConfig& config = {});

Vector mean_fuse(const Vector& mean_prototype, const Vector& completed_prototype);

/// Per-episode diagnostic dump (both Gaussians, posterior, responsibilities).
std::string fusion_to_json(const FusionResult& result);

}  // namespace protofuse
