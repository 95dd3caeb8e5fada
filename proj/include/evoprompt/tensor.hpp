#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evoprompt/errors.hpp"

namespace evoprompt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles. Rank 1 tensors behave as 1 x n
/// matrices wherever a matrix is expected.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
    values_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
    if (values_.size() != count(shape_)) {
      throw DimensionError("value count " + std::to_string(values_.size()) + " does not match shape " +
                           shape_str(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  /// Builds a matrix from nested row lists, e.g. {{3, 0}, {0, 4}}.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    if (rows.size() == 0) throw DimensionError("from_rows: no rows");
    const std::size_t c = rows.begin()->size();
    std::vector<double> v;
    v.reserve(rows.size() * c);
    for (const auto& r : rows) {
      if (r.size() != c) throw DimensionError("from_rows: ragged rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), c}, std::move(v));
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  template <class Rng>
  static Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values_) v = dist(rng);
    return t;
  }

  const Shape& shape() const { return shape_; }
  bool empty() const { return values_.empty(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  bool is_scalar() const { return values_.size() == 1; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor " + shape_str(shape_));
    return values_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on) {
      grad_.assign(values_.size(), 0.0);
    } else {
      grad_.clear();
      grad_.shrink_to_fit();
    }
  }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

/// FNV-1a over the little-endian byte image of the values.
inline std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::uint64_t checksum(const Tensor& t) { return checksum(t.values()); }

/// splitmix64 step; used to derive independent sub-seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt) {
  std::uint64_t s = mix_seed(base);
  for (auto v : salt) s = mix_seed(s ^ mix_seed(v + 0x632be59bd9b4e019ULL));
  return s;
}

}  // namespace evoprompt
