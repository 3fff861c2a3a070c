#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moba/errors.hpp"
#include "moba/partition.hpp"

namespace moba {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_volume(const Shape& shape);

// Dense row-major array. Real is double (verification) or float (benchmarks).
template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape);
  BasicTensor(Shape shape, std::vector<Real> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  const std::vector<Real>& values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  Real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const Real& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  Real& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const Real& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row i of a 2-D tensor.
  std::span<Real> row(std::size_t i);
  std::span<const Real> row(std::size_t i) const;

  // Same data, new shape of equal volume.
  BasicTensor reshaped(Shape shape) const;

  template <typename Other>
  BasicTensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return BasicTensor<Other>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

Tensor make_matrix(std::initializer_list<std::initializer_list<double>> rows);

// Throws NonFiniteError naming `context` if any element is NaN or Inf.
template <typename Real>
void require_finite(const BasicTensor<Real>& t, const char* context);

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a);

// Row softmax with max subtraction. `mask` entries are 0 (keep) or -inf
// (drop); dropped entries come out exactly 0. A row with nothing kept
// raises DegenerateRowError.
template <typename Real>
BasicTensor<Real> stable_softmax_rows(const BasicTensor<Real>& x,
                                      const std::optional<BasicTensor<Real>>& mask = std::nullopt);

// Row i of the result is the mean of K rows in block i. A ragged final
// block averages over its true length.
template <typename Real>
BasicTensor<Real> block_mean_pool(const BasicTensor<Real>& keys, const BlockPartition& partition);

// Head slice [N, h, d] -> [N, d] and its inverse.
template <typename Real>
BasicTensor<Real> head_slice(const BasicTensor<Real>& x, std::size_t head);
template <typename Real>
void set_head_slice(BasicTensor<Real>& x, std::size_t head, const BasicTensor<Real>& slice);

template <typename Real>
Real max_abs_diff(const BasicTensor<Real>& a, const BasicTensor<Real>& b);

// Deterministic standard-normal generator: SplitMix64 bit stream
// (golden-gamma increment 0x9E3779B97F4A7C15, mixing constants
// 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB), uniforms u = (x >> 11) * 2^-53,
// normals by the Box-Muller cosine branch on (1 - u1, u2). One normal is
// consumed per pair of uniforms so the stream is trivial to replay.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  double uniform();  // [0, 1)
  double normal();
  // Uniform integer in [lo, hi], inclusive (64-bit output modulo range).
  std::size_t uniform_index(std::size_t lo, std::size_t hi);

 private:
  std::uint64_t state_;
};

template <typename Real = double>
BasicTensor<Real> seeded_random(const Shape& shape, std::uint64_t seed);

}  // namespace moba
