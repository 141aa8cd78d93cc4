#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dist2 {

enum class ErrorKind {
  domain,
  degenerate_embedding,
  range,
  config,
  numeric,
  shape,
  contract,
  cannot_sample,
  io,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::domain: return "domain";
    case ErrorKind::degenerate_embedding: return "degenerate_embedding";
    case ErrorKind::range: return "range";
    case ErrorKind::config: return "config";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::shape: return "shape";
    case ErrorKind::contract: return "contract";
    case ErrorKind::cannot_sample: return "cannot_sample";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

/// Dense row-major matrix of doubles. Rows are positions, columns vocabulary
/// entries (or features) throughout the library.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline double logsumexp(std::span<const double> xs) {
  require(!xs.empty(), ErrorKind::shape, "logsumexp of empty row");
  const double m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) {
    require(m == -std::numeric_limits<double>::infinity(), ErrorKind::numeric,
            "non-finite value in logsumexp");
    return m;
  }
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// Max-subtracted log-softmax of one row.
inline std::vector<double> log_softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorKind::shape, "log_softmax of empty row");
  require(all_finite(logits), ErrorKind::numeric, "non-finite logit");
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  const double lse = m + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto ls = log_softmax(logits.row(r));
    std::copy(ls.begin(), ls.end(), out.row(r).begin());
  }
  return out;
}

/// Softmax of -values/temperature, stabilized by subtracting the row minimum.
inline std::vector<double> boltzmann(std::span<const double> energies, double temperature) {
  require(temperature > 0.0, ErrorKind::config, "temperature must be positive");
  require(!energies.empty(), ErrorKind::shape, "empty energy row");
  double lo = std::numeric_limits<double>::infinity();
  for (double e : energies) {
    require(!std::isnan(e) && e != -std::numeric_limits<double>::infinity(), ErrorKind::numeric,
            "non-finite distance");
    lo = std::min(lo, e);
  }
  require(std::isfinite(lo), ErrorKind::numeric, "all distances infinite");
  std::vector<double> p(energies.size());
  double z = 0.0;
  for (std::size_t i = 0; i < energies.size(); ++i) {
    p[i] = std::exp(-(energies[i] - lo) / temperature);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size(), ErrorKind::shape, "total_variation size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

/// Sample mean and (n-1) standard deviation; std is 0 for a single value.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

/// FNV-1a over raw bytes; used for content hashes of problem sets and codebooks.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace dist2
