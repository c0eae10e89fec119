#include "eqsep/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "eqsep/errors.hpp"
#include "eqsep/rng.hpp"

namespace eqsep {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }
MutMap view(Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Largest-magnitude entry made positive, so eigenvectors and principal
// directions come out with a reproducible sign.
void canonical_sign(std::span<double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (!v.empty() && v[best] < 0.0) {
    for (double& x : v) x = -x;
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows_ * cols_));
  }
  if (!all_finite()) throw FormatError("matrix data contains non-finite entries");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Matrix(rows.size(), cols, std::move(data));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) throw DimensionError("row slice out of range");
  Matrix out(count, cols_);
  std::copy_n(data_.begin() + std::ptrdiff_t(begin * cols_), count * cols_, out.data_.begin());
  return out;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw DimensionError("row index out of range");
    std::copy_n(data_.begin() + std::ptrdiff_t(indices[i] * cols_), cols_,
                out.data_.begin() + std::ptrdiff_t(i * cols_));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Arithmetic

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape(a) + " times " + shape(b));
  }
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape(a) + "^T times " + shape(b));
  }
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape(a) + " times " + shape(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("add: " + shape(a) + " vs " + shape(b));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("subtract: " + shape(a) + " vs " + shape(b));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

double trace(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("trace of non-square " + shape(a));
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

double frobenius_norm(const Matrix& a) { return norm(a.values()); }

// ---------------------------------------------------------------------------
// Symmetric eigensolver

SymEig sym_eig(const Matrix& input) {
  const std::size_t n = input.rows();
  if (input.cols() != n) throw DimensionError("sym_eig: non-square " + shape(input));

  const double fro = frobenius_norm(input);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(input(i, j) - input(j, i)) > 1e-12 * fro) {
        throw DimensionError("sym_eig: input is not symmetric at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
      }
    }
  }

  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
  }
  Matrix v = Matrix::identity(n);

  auto off_diagonal = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) s += a(i, j) * a(i, j);
      }
    }
    return std::sqrt(s);
  };

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    if (off_diagonal() <= 1e-12 * fro) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = a(p, k) = c * akp - s * akq;
          a(k, q) = a(q, k) = s * akp + c * akq;
        }
        a(p, p) -= t * apq;
        a(q, q) += t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymEig out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  std::vector<double> column(n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) column[k] = v(k, order[j]);
    canonical_sign(column);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = column[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

PrincipalComponents top_k_components(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2) throw DimensionError("top_k_components: need at least 2 rows");
  if (k == 0 || k > std::min(n, d)) {
    throw DimensionError("top_k_components: k = " + std::to_string(k) + " out of range for " +
                         shape(x));
  }

  PrincipalComponents out;
  out.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += x(i, j);
  }
  for (double& m : out.mean) m /= double(n);

  Matrix centered = x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= out.mean[j];
  }
  const double denom = double(n - 1);
  double total = 0.0;
  for (double v : centered.values()) total += v * v;
  total /= denom;
  if (!(total > 0.0)) throw DegenerateError("top_k_components: data has zero variance");

  const ConstMap xc = view(std::as_const(centered));
  auto apply_cov = [&](const std::vector<double>& v) {
    Eigen::Map<const Eigen::VectorXd> vv(v.data(), Eigen::Index(d));
    Eigen::VectorXd proj = xc * vv;
    Eigen::VectorXd w = xc.transpose() * proj;
    std::vector<double> out_w(w.data(), w.data() + d);
    for (double& e : out_w) e /= denom;
    return out_w;
  };

  std::vector<std::vector<double>> comps;
  auto deflate = [&](std::vector<double>& v) {
    for (const auto& c : comps) {
      const double proj = dot(v, c);
      for (std::size_t j = 0; j < d; ++j) v[j] -= proj * c[j];
    }
  };

  constexpr double kTol = 1e-10;
  constexpr int kMaxIter = 10000;
  Xoshiro256ss rng(0x9e3779b97f4a7c15ULL);
  for (std::size_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(d);
    double nv = 0.0;
    // A random start has probability zero of being orthogonal to the target;
    // retry in the measure-zero event that deflation wipes it out.
    for (int attempt = 0; attempt < 16 && !(nv > 0.0); ++attempt) {
      for (double& e : v) e = rng.normal();
      deflate(v);
      nv = norm(v);
    }
    for (double& e : v) e /= nv;

    for (int it = 0; it < kMaxIter; ++it) {
      std::vector<double> w = apply_cov(v);
      deflate(w);
      const double nw = norm(w);
      if (!(nw > 0.0)) break;  // remaining subspace carries no variance
      for (double& e : w) e /= nw;
      double diff = 0.0;
      for (std::size_t j = 0; j < d; ++j) diff += (w[j] - v[j]) * (w[j] - v[j]);
      v = std::move(w);
      if (std::sqrt(diff) <= kTol) break;
    }
    // Re-orthogonalize once more so the basis is orthonormal to rounding.
    deflate(v);
    const double nfinal = norm(v);
    for (double& e : v) e /= nfinal;
    canonical_sign(v);
    comps.push_back(std::move(v));
  }

  std::vector<double> variances;
  for (const auto& c : comps) variances.push_back(dot(c, apply_cov(c)));

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return variances[i] > variances[j]; });
  out.components = Matrix(k, d);
  for (std::size_t r = 0; r < k; ++r) {
    std::copy(comps[order[r]].begin(), comps[order[r]].end(), out.components.row(r).begin());
    out.variances.push_back(std::max(0.0, variances[order[r]]));
  }
  return out;
}

Matrix project(const Matrix& x, const PrincipalComponents& pcs) {
  if (x.cols() != pcs.mean.size()) throw DimensionError("project: feature dimension mismatch");
  Matrix centered = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) centered(i, j) -= pcs.mean[j];
  }
  return matmul_nt(centered, pcs.components);
}

// ---------------------------------------------------------------------------
// Scalar statistics

namespace {

struct Moments {
  double mean_x = 0.0, mean_y = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
};

Moments centered_moments(std::span<const double> xs, std::span<const double> ys) {
  const double n = double(xs.size());
  Moments m;
  m.mean_x = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  m.mean_y = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - m.mean_x;
    const double dy = ys[i] - m.mean_y;
    m.sxx += dx * dx;
    m.syy += dy * dy;
    m.sxy += dx * dy;
  }
  return m;
}

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
}

void check_pair(std::span<const double> xs, std::span<const double> ys, const char* who) {
  if (xs.size() != ys.size()) {
    throw DimensionError(std::string(who) + ": length mismatch " + std::to_string(xs.size()) +
                         " vs " + std::to_string(ys.size()));
  }
  if (xs.size() < 2) throw DimensionError(std::string(who) + ": need at least 2 points");
}

}  // namespace

double pearson(std::span<const double> xs, std::span<const double> ys) {
  check_pair(xs, ys, "pearson");
  if (is_constant(xs) || is_constant(ys)) throw DegenerateError("pearson: constant input");
  const Moments m = centered_moments(xs, ys);
  if (!(m.sxx > 0.0) || !(m.syy > 0.0)) throw DegenerateError("pearson: zero variance");
  const double r = m.sxy / std::sqrt(m.sxx * m.syy);
  return std::clamp(r, -1.0, 1.0);
}

LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
  check_pair(xs, ys, "fit_line");
  if (is_constant(xs)) throw DegenerateError("fit_line: constant abscissa");
  const Moments m = centered_moments(xs, ys);
  LineFit fit;
  fit.slope = m.sxy / m.sxx;
  fit.intercept = m.mean_y - fit.slope * m.mean_x;
  return fit;
}

}  // namespace eqsep
