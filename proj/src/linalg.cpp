#include "lrtp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace lrtp {

namespace {

std::string dims(const DenseMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::kShape, std::string(what) + ": " + dims(a) + " vs " + dims(b));
  }
}

}  // namespace

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::kShape, "data length " + std::to_string(data_.size()) +
                                       " does not match " + std::to_string(rows_) + "x" +
                                       std::to_string(cols_));
  }
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw Error(ErrorCode::kShape, "ragged initializer list");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(std::span<const double> values) {
  DenseMatrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

DenseMatrix DenseMatrix::transpose() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

DenseMatrix DenseMatrix::columns(std::size_t begin, std::size_t end) const {
  if (begin > end || end > cols_) {
    throw Error(ErrorCode::kShape, "column range [" + std::to_string(begin) + "," +
                                       std::to_string(end) + ") outside " + dims(*this));
  }
  DenseMatrix out(rows_, end - begin);
  for (std::size_t r = 0; r < rows_; ++r) {
    const auto src = row(r).subspan(begin, end - begin);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

DenseMatrix DenseMatrix::row_range(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) {
    throw Error(ErrorCode::kShape, "row range [" + std::to_string(begin) + "," +
                                       std::to_string(end) + ") outside " + dims(*this));
  }
  std::vector<double> data(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                           data_.begin() + static_cast<std::ptrdiff_t>(end * cols_));
  return DenseMatrix(end - begin, cols_, std::move(data));
}

bool DenseMatrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

DenseMatrix hconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error(ErrorCode::kShape, "hconcat row mismatch");
    cols += p.cols();
  }
  DenseMatrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row(r).begin();
    for (const auto& p : parts) dst = std::copy(p.row(r).begin(), p.row(r).end(), dst);
  }
  return out;
}

DenseMatrix vconcat(std::span<const DenseMatrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error(ErrorCode::kShape, "vconcat column mismatch");
    data.insert(data.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return DenseMatrix(rows, cols, std::move(data));
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::kShape, "matmul " + dims(a) + " x " + dims(b));
  }
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

std::vector<DenseMatrix> batched_matmul(
    std::span<const std::pair<DenseMatrix, DenseMatrix>> batch) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].first.cols() != batch[i].second.rows()) {
      throw Error(ErrorCode::kShape, "batched_matmul pair " + std::to_string(i) + ": " +
                                         dims(batch[i].first) + " x " + dims(batch[i].second));
    }
  }
  std::vector<DenseMatrix> out;
  out.reserve(batch.size());
  for (const auto& [a, b] : batch) out.push_back(matmul(a, b));
  return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "add");
  DenseMatrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] += bd[i];
  return c;
}

DenseMatrix subtract(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "subtract");
  DenseMatrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return c;
}

double squared_frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

double frobenius_norm(const DenseMatrix& m) { return std::sqrt(squared_frobenius_norm(m)); }

double relative_frobenius_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "relative_frobenius_diff");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    diff += d * d;
  }
  const double denom = std::max(frobenius_norm(b), 1e-300);
  return std::sqrt(diff) / denom;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

namespace {

// One-sided Jacobi on a tall (rows >= cols) matrix.
SvdResult jacobi_svd_tall(const DenseMatrix& w) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  // Work column-major so column rotations touch contiguous memory.
  std::vector<double> u(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) u[c * m + r] = w(r, c);
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  constexpr double kTol = 1e-15;
  constexpr int kMaxSweeps = 80;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double* ui = &u[i * m];
        double* uj = &u[j * m];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          alpha += ui[r] * ui[r];
          beta += uj[r] * uj[r];
          gamma += ui[r] * uj[r];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < m; ++r) {
          const double x = ui[r];
          const double y = uj[r];
          ui[r] = c * x - s * y;
          uj[r] = s * x + c * y;
        }
        double* vi = &v[i * n];
        double* vj = &v[j * n];
        for (std::size_t r = 0; r < n; ++r) {
          const double x = vi[r];
          const double y = vj[r];
          vi[r] = c * x - s * y;
          vj[r] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t c = 0; c < n; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < m; ++r) s += u[c * m + r] * u[c * m + r];
    sigma[c] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult out{DenseMatrix(m, n), std::vector<double>(n), DenseMatrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = order[k];
    const double s = sigma[c];
    out.singular_values[k] = s;
    for (std::size_t r = 0; r < m; ++r) out.left(r, k) = s > 0.0 ? u[c * m + r] / s : 0.0;
    for (std::size_t r = 0; r < n; ++r) out.right_t(k, r) = v[c * n + r];
  }
  return out;
}

}  // namespace

SvdResult thin_svd(const DenseMatrix& w) {
  if (!w.all_finite()) throw Error(ErrorCode::kInput, "SVD input contains non-finite entries");
  if (w.rows() >= w.cols()) return jacobi_svd_tall(w);
  SvdResult t = jacobi_svd_tall(w.transpose());
  return SvdResult{t.right_t.transpose(), std::move(t.singular_values), t.left.transpose()};
}

TruncatedSVDResult truncated_svd(const DenseMatrix& w, std::size_t k) {
  const std::size_t max_rank = std::min(w.rows(), w.cols());
  if (k < 1 || k > max_rank) {
    throw Error(ErrorCode::kRank, "rank " + std::to_string(k) + " outside [1, " +
                                      std::to_string(max_rank) + "]");
  }
  if (!w.all_finite()) throw Error(ErrorCode::kInput, "SVD input contains non-finite entries");
  SvdResult svd = thin_svd(w);

  TruncatedSVDResult out;
  out.left_factor = DenseMatrix(w.rows(), k);
  out.right_factor = DenseMatrix(k, w.cols());
  out.retained_singular_values.assign(svd.singular_values.begin(),
                                      svd.singular_values.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t i = 0; i < k; ++i) {
    const double root = std::sqrt(svd.singular_values[i]);
    for (std::size_t r = 0; r < w.rows(); ++r) out.left_factor(r, i) = svd.left(r, i) * root;
    for (std::size_t c = 0; c < w.cols(); ++c) out.right_factor(i, c) = svd.right_t(i, c) * root;
  }
  for (std::size_t i = k; i < svd.singular_values.size(); ++i) {
    out.discarded_energy += svd.singular_values[i] * svd.singular_values[i];
  }
  return out;
}

std::uint64_t Rng::next_u64() {
  // SplitMix64
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw Error(ErrorCode::kParameter, "uniform_index over empty range");
  return static_cast<std::size_t>(next_u64() % n);
}

DenseMatrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double scale) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = normal() * scale;
  return m;
}

}  // namespace lrtp
