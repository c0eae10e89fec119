#include "eqsep/separation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "eqsep/errors.hpp"
#include "eqsep/network.hpp"

namespace eqsep {

namespace {

int resolve_classes(const Matrix& x, std::span<const int> labels, int num_classes) {
  if (labels.size() != x.rows()) {
    throw DimensionError("fuzziness: " + std::to_string(x.rows()) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (x.cols() == 0) throw DimensionError("fuzziness: features have zero width");
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw LabelError("fuzziness: negative label " + std::to_string(y));
    max_label = std::max(max_label, y);
  }
  if (num_classes <= 0) return max_label + 1;
  if (max_label >= num_classes) {
    throw LabelError("fuzziness: label " + std::to_string(max_label) + " outside [0, " +
                     std::to_string(num_classes) + ")");
  }
  return num_classes;
}

// Means, counts and the weighted mean matrix M; no eigen work yet.
ScatterStats class_statistics(const Matrix& x, std::span<const int> labels, int k_classes) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const auto K = std::size_t(k_classes);
  ScatterStats s;
  s.global_mean.assign(d, 0.0);
  s.class_means = Matrix(K, d);
  s.counts.assign(K, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = std::size_t(labels[i]);
    ++s.counts[k];
    auto row = x.row(i);
    auto cm = s.class_means.row(k);
    for (std::size_t j = 0; j < d; ++j) cm[j] += row[j];
  }
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (s.counts[k] == 0) continue;
    ++present;
    auto cm = s.class_means.row(k);
    for (std::size_t j = 0; j < d; ++j) {
      s.global_mean[j] += cm[j];
      cm[j] /= double(s.counts[k]);
    }
  }
  if (present < 2) {
    throw DegenerateError("fuzziness needs at least two non-empty classes, found " +
                          std::to_string(present));
  }
  for (double& m : s.global_mean) m /= double(n);

  s.weighted_means = Matrix(d, K);
  for (std::size_t k = 0; k < K; ++k) {
    if (s.counts[k] == 0) continue;
    const double w = std::sqrt(double(s.counts[k]) / double(n));
    auto cm = s.class_means.row(k);
    for (std::size_t j = 0; j < d; ++j) s.weighted_means(j, k) = w * (cm[j] - s.global_mean[j]);
  }
  return s;
}

// x_i - mean_{k(i)}, row by row.
Matrix within_residuals(const Matrix& x, std::span<const int> labels, const ScatterStats& s) {
  Matrix r(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto src = x.row(i);
    auto cm = s.class_means.row(std::size_t(labels[i]));
    auto dst = r.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) dst[j] = src[j] - cm[j];
  }
  return r;
}

// Number of leading eigenvalues that survive the pseudoinverse cutoff.
std::size_t retained(std::span<const double> values, double rel_tol, std::size_t cap,
                     double total_scatter) {
  const double lmax = values.empty() ? 0.0 : values.front();
  if (!(lmax > 0.0) || lmax <= 1e-14 * total_scatter) {
    throw DegenerateError("fuzziness: no between-class signal (all class means coincide)");
  }
  std::size_t r = 0;
  while (r < values.size() && r < cap && values[r] > rel_tol * lmax) ++r;
  return r;
}

double total_scatter(const Matrix& x, std::span<const double> mean) {
  double t = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double v = row[j] - mean[j];
      t += v * v;
    }
  }
  return t / double(x.rows());
}

struct Projected {
  FuzzinessResult result;
  Matrix projections;  // n x r, <u_j, x_i - mean_k(i)>
};

Projected project_within(const Matrix& x, std::span<const int> labels, double rel_tol, int num_classes) {
  const int K = resolve_classes(x, labels, num_classes);
  if (!(rel_tol >= 0.0) || rel_tol >= 1.0) throw DimensionError("fuzziness: rel_tol must be in [0, 1)");
  Projected out;
  ScatterStats& s = out.result.stats;
  s = class_statistics(x, labels, K);

  const SymEig gram = sym_eig(matmul_tn(s.weighted_means, s.weighted_means));
  const std::size_t r =
      retained(gram.values, rel_tol, std::size_t(K - 1), total_scatter(x, s.global_mean));

  s.eigenvalues.assign(gram.values.begin(), gram.values.begin() + std::ptrdiff_t(r));
  Matrix v(std::size_t(K), r);
  for (std::size_t k = 0; k < std::size_t(K); ++k) {
    for (std::size_t j = 0; j < r; ++j) v(k, j) = gram.vectors(k, j) / std::sqrt(s.eigenvalues[j]);
  }
  s.eigenvectors = matmul(s.weighted_means, v);

  out.projections = matmul(within_residuals(x, labels, s), s.eigenvectors);
  return out;
}

// (1/n) sum_j lambda_j^-1 p_ij^2 over the rows selected by `take`.
template <class Pred>
double weighted_energy(const Projected& p, Pred take) {
  const auto& lambda = p.result.stats.eigenvalues;
  double total = 0.0;
  for (std::size_t i = 0; i < p.projections.rows(); ++i) {
    if (!take(i)) continue;
    auto row = p.projections.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) total += row[j] * row[j] / lambda[j];
  }
  return total / double(p.projections.rows());
}

}  // namespace

FuzzinessResult fuzziness(const Matrix& x, std::span<const int> labels, double rel_tol, int num_classes) {
  Projected p = project_within(x, labels, rel_tol, num_classes);
  p.result.value = weighted_energy(p, [](std::size_t) { return true; });
  return std::move(p.result);
}

double fuzziness_direct(const Matrix& x, std::span<const int> labels, double rel_tol, int num_classes) {
  const int K = resolve_classes(x, labels, num_classes);
  const ScatterStats s = class_statistics(x, labels, K);
  const std::size_t n = x.rows();

  const Matrix ssb = matmul_nt(s.weighted_means, s.weighted_means);
  const Matrix resid = within_residuals(x, labels, s);
  const Matrix ssw = scale(matmul_tn(resid, resid), 1.0 / double(n));

  const SymEig eig = sym_eig(ssb);
  const std::size_t r = retained(eig.values, rel_tol, std::size_t(K - 1), trace(ssb) + trace(ssw));
  const std::size_t d = x.cols();
  Matrix pinv(d, d);
  for (std::size_t j = 0; j < r; ++j) {
    const double inv = 1.0 / eig.values[j];
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) pinv(a, b) += inv * eig.vectors(a, j) * eig.vectors(b, j);
    }
  }
  return trace(matmul(ssw, pinv));
}

double classwise_fuzziness(const Matrix& x, std::span<const int> labels, int k, double rel_tol,
                           int num_classes) {
  const Projected p = project_within(x, labels, rel_tol, num_classes);
  const auto& counts = p.result.stats.counts;
  if (k < 0 || std::size_t(k) >= counts.size() || counts[std::size_t(k)] == 0) {
    throw DegenerateError("class-wise fuzziness: class " + std::to_string(k) + " is empty");
  }
  return weighted_energy(p, [&](std::size_t i) { return labels[i] == k; });
}

std::vector<double> classwise_fuzziness(const Matrix& x, std::span<const int> labels, double rel_tol,
                                        int num_classes) {
  const Projected p = project_within(x, labels, rel_tol, num_classes);
  const auto& lambda = p.result.stats.eigenvalues;
  std::vector<double> out(p.result.stats.counts.size(), 0.0);
  for (std::size_t i = 0; i < p.projections.rows(); ++i) {
    auto row = p.projections.row(i);
    double e = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) e += row[j] * row[j] / lambda[j];
    out[std::size_t(labels[i])] += e;
  }
  for (double& v : out) v /= double(p.projections.rows());
  return out;
}

// ---------------------------------------------------------------------------
// Profiles

namespace {

[[noreturn]] void rethrow_at_layer(std::size_t layer) {
  rethrow_with_context("layer " + std::to_string(layer) + ": ");
}

}  // namespace

SeparationProfile separation_profile(std::span<const Matrix> layers, std::span<const int> labels,
                                     double rel_tol, int num_classes) {
  SeparationProfile p;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    try {
      p.values.push_back(fuzziness(layers[l], labels, rel_tol, num_classes).value);
    } catch (const Error&) {
      rethrow_at_layer(l);
    }
    p.indices.push_back(l);
  }
  return p;
}

SeparationProfile separation_profile(const ForwardTrace& trace, std::span<const int> labels, double rel_tol,
                                     int num_classes) {
  return separation_profile(std::span<const Matrix>(trace.layers), labels, rel_tol, num_classes);
}

LawFit fit_law(std::span<const double> values) {
  if (values.size() < 3) {
    throw InsufficientPointsError("law fit needs at least 3 points, got " + std::to_string(values.size()));
  }
  std::vector<double> xs(values.size());
  std::vector<double> ys(values.size());
  for (std::size_t l = 0; l < values.size(); ++l) {
    if (!(values[l] > 0.0) || !std::isfinite(values[l])) {
      throw DomainError("law fit: D at point " + std::to_string(l) + " is " + std::to_string(values[l]) +
                        ", log undefined");
    }
    xs[l] = double(l);
    ys[l] = std::log(values[l]);
  }

  LawFit fit;
  const LineFit line = fit_line(xs, ys);
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  const bool flat = std::all_of(ys.begin(), ys.end(), [&](double y) { return y == ys.front(); });
  fit.pearson_r = flat ? 0.0 : pearson(xs, ys);
  fit.rho = std::exp(fit.slope);
  if (fit.rho < 1.0) fit.half_life = std::log(2.0) / -fit.slope;
  fit.residuals.resize(ys.size());
  for (std::size_t l = 0; l < ys.size(); ++l) fit.residuals[l] = ys[l] - (fit.slope * xs[l] + fit.intercept);
  return fit;
}

LawFit fit_law(const SeparationProfile& profile) { return fit_law(profile.values); }

namespace {

void require_positive(std::span<const double> values, const char* what) {
  for (std::size_t l = 0; l < values.size(); ++l) {
    if (!(values[l] > 0.0) || !std::isfinite(values[l])) {
      throw DomainError(std::string(what) + ": D at point " + std::to_string(l) + " must be positive");
    }
  }
}

}  // namespace

Perturbation perturbation_coefficient(std::span<const double> values) {
  if (values.size() < 2) throw InsufficientPointsError("perturbation coefficient needs at least 2 points");
  require_positive(values, "perturbation coefficient");
  Perturbation p;
  p.ratio = values.back() / values.front();
  double sum = 0.0;
  for (std::size_t l = 1; l < values.size(); ++l) sum += values[l - 1] / values[l];
  p.coefficient = p.ratio * sum;
  return p;
}

std::vector<double> relative_improvements(std::span<const double> values) {
  require_positive(values, "relative improvement");
  std::vector<double> out;
  for (std::size_t l = 1; l < values.size(); ++l) out.push_back(values[l] / values[l - 1]);
  return out;
}

SeparationProfile group_blocks(const SeparationProfile& layers, std::span<const std::size_t> boundaries) {
  if (boundaries.empty() || boundaries.front() != 0) {
    throw IndexError("block boundaries must start at 0");
  }
  for (std::size_t b = 0; b < boundaries.size(); ++b) {
    if (boundaries[b] >= layers.values.size()) {
      throw IndexError("block boundary " + std::to_string(boundaries[b]) + " beyond the last point " +
                       std::to_string(layers.values.size() - 1));
    }
    if (b > 0 && boundaries[b] <= boundaries[b - 1]) {
      throw IndexError("block boundaries must increase strictly");
    }
  }
  SeparationProfile out;
  out.split = layers.split;
  out.epoch = layers.epoch;
  out.grouping = "block";
  for (std::size_t b = 0; b < boundaries.size(); ++b) {
    out.values.push_back(layers.values[boundaries[b]]);
    out.indices.push_back(b);
  }
  return out;
}

SeparationProfile group_blocks(std::span<const Matrix> layers, std::span<const int> labels,
                               std::span<const std::size_t> boundaries, double rel_tol, int num_classes) {
  // Validate against the layer count first so no fuzziness work is wasted.
  SeparationProfile shape;
  shape.values.assign(layers.size(), 1.0);
  group_blocks(shape, boundaries);

  SeparationProfile out;
  out.grouping = "block";
  for (std::size_t b = 0; b < boundaries.size(); ++b) {
    try {
      out.values.push_back(fuzziness(layers[boundaries[b]], labels, rel_tol, num_classes).value);
    } catch (const Error&) {
      rethrow_at_layer(boundaries[b]);
    }
    out.indices.push_back(b);
  }
  return out;
}

}  // namespace eqsep
