#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eqsep/linalg.hpp"

namespace eqsep {

struct ForwardTrace;

/// Relative eigenvalue cutoff for the pseudoinverse of the between-class
/// scatter: keep lambda_j > rel_tol * lambda_max, at most K - 1 of them.
inline constexpr double kDefaultRelTol = 1e-10;

struct ScatterStats {
  std::vector<double> global_mean;   // d
  Matrix class_means;                // K x d (zero rows for absent classes)
  std::vector<std::size_t> counts;   // n_k
  Matrix weighted_means;             // d x K, columns sqrt(n_k / n) (mean_k - mean)
  std::vector<double> eigenvalues;   // retained nonzero SSB eigenvalues, descending
  Matrix eigenvectors;               // d x r, unit columns u_j
};

struct FuzzinessResult {
  double value = 0.0;
  ScatterStats stats;
};

/// Tr(SSW SSB^+) through the K x K Gram matrix of the weighted class means.
/// Labels must lie in [0, num_classes); num_classes 0 means max label + 1.
/// DegenerateError if fewer than two classes are present or there is no
/// between-class signal.
FuzzinessResult fuzziness(const Matrix& x, std::span<const int> labels, double rel_tol = kDefaultRelTol,
                          int num_classes = 0);

/// Same quantity from explicit d x d scatter matrices. Slow; test oracle.
double fuzziness_direct(const Matrix& x, std::span<const int> labels, double rel_tol = kDefaultRelTol,
                        int num_classes = 0);

/// Contribution of class k: Tr(SSW^k SSB^+) with SSW^k normalized by the
/// total n, so the per-class values add up to fuzziness().
double classwise_fuzziness(const Matrix& x, std::span<const int> labels, int k,
                           double rel_tol = kDefaultRelTol, int num_classes = 0);
/// All classes at once, sharing one scatter decomposition.
std::vector<double> classwise_fuzziness(const Matrix& x, std::span<const int> labels,
                                        double rel_tol = kDefaultRelTol, int num_classes = 0);

struct SeparationProfile {
  std::vector<double> values;      // D at each point
  std::vector<std::size_t> indices;  // layer (or block boundary) of each point
  std::string split = "train";
  int epoch = -1;                  // -1 when not tied to a training epoch
  std::string grouping = "layer";  // "layer" or "block"

  friend bool operator==(const SeparationProfile&, const SeparationProfile&) = default;
};

/// D at every capture point of the trace, in order. Errors carry the layer.
SeparationProfile separation_profile(const ForwardTrace& trace, std::span<const int> labels,
                                     double rel_tol = kDefaultRelTol, int num_classes = 0);
SeparationProfile separation_profile(std::span<const Matrix> layers, std::span<const int> labels,
                                     double rel_tol = kDefaultRelTol, int num_classes = 0);

struct LawFit {
  double slope = 0.0;      // of ln D against the point index
  double intercept = 0.0;
  double pearson_r = 0.0;
  double rho = 1.0;        // exp(slope)
  std::optional<double> half_life;  // ln 2 / ln(1 / rho), only when rho < 1
  std::vector<double> residuals;

  friend bool operator==(const LawFit&, const LawFit&) = default;
};

/// Least-squares line of ln D_l against l = 0, 1, ... (positions, not the
/// profile's index labels). A constant profile has r = 0 by convention.
/// DomainError for a non-positive value, InsufficientPointsError below three
/// points.
LawFit fit_law(std::span<const double> values);
LawFit fit_law(const SeparationProfile& profile);

struct Perturbation {
  double ratio = 0.0;        // R = D_last / D_0
  double coefficient = 0.0;  // R * sum_l D_{l-1} / D_l

  friend bool operator==(const Perturbation&, const Perturbation&) = default;
};
Perturbation perturbation_coefficient(std::span<const double> values);

/// D_{l+1} / D_l for consecutive points.
std::vector<double> relative_improvements(std::span<const double> values);

/// Keeps only the boundary points of a layer profile and relabels it as a
/// block profile. Boundaries start at 0 and increase strictly; IndexError
/// otherwise.
SeparationProfile group_blocks(const SeparationProfile& layers, std::span<const std::size_t> boundaries);
SeparationProfile group_blocks(std::span<const Matrix> layers, std::span<const int> labels,
                               std::span<const std::size_t> boundaries, double rel_tol = kDefaultRelTol,
                               int num_classes = 0);

}  // namespace eqsep
