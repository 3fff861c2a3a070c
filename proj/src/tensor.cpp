#include "moba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace moba {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_volume(const Shape& shape) {
  std::size_t v = 1;
  for (auto s : shape) v *= s;
  return v;
}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape)
    : shape_(std::move(shape)), data_(shape_volume(shape_), Real(0)) {}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_volume(shape_) != data_.size()) {
    std::ostringstream msg;
    msg << "tensor shape " << shape_string(shape_) << " holds " << shape_volume(shape_)
        << " values but " << data_.size() << " were given";
    throw DimensionError(msg.str());
  }
}

template <typename Real>
std::size_t BasicTensor<Real>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape_));
  }
  return shape_[axis];
}

template <typename Real>
std::span<Real> BasicTensor<Real>::row(std::size_t i) {
  const std::size_t cols = shape_.size() == 2 ? shape_[1] : 0;
  return std::span<Real>(data_).subspan(i * cols, cols);
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::row(std::size_t i) const {
  const std::size_t cols = shape_.size() == 2 ? shape_[1] : 0;
  return std::span<const Real>(data_).subspan(i * cols, cols);
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::reshaped(Shape shape) const {
  if (shape_volume(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return BasicTensor(std::move(shape), data_);
}

Tensor make_matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("make_matrix: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

template <typename Real>
void require_finite(const BasicTensor<Real>& t, const char* context) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      std::ostringstream msg;
      msg << context << ": non-finite value " << t[i] << " at flat index " << i;
      throw NonFiniteError(msg.str());
    }
  }
}

namespace {

template <typename Real>
void require_matrix(const BasicTensor<Real>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a 2-D tensor, got " +
                         shape_string(t.shape()));
  }
}

}  // namespace

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<double> acc(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a(i, t);
      for (std::size_t j = 0; j < p; ++j) acc[i * p + j] += av * static_cast<double>(b(t, j));
    }
  }
  BasicTensor<Real> c({m, p}, std::vector<Real>(acc.begin(), acc.end()));
  require_finite(c, "matmul");
  return c;
}

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  BasicTensor<Real> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

template <typename Real>
BasicTensor<Real> stable_softmax_rows(const BasicTensor<Real>& x,
                                      const std::optional<BasicTensor<Real>>& mask) {
  require_matrix(x, "stable_softmax_rows");
  if (mask && mask->shape() != x.shape()) {
    throw DimensionError("softmax mask shape " + shape_string(mask->shape()) +
                         " differs from input " + shape_string(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  BasicTensor<Real> out({m, n});
  std::vector<double> logits(n);
  std::vector<char> keep(n);
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double bias = mask ? static_cast<double>((*mask)(i, j)) : 0.0;
      keep[j] = !(std::isinf(bias) && bias < 0);
      if (!keep[j]) continue;
      logits[j] = static_cast<double>(x(i, j)) + bias;
      row_max = std::max(row_max, logits[j]);
      any = true;
    }
    if (!any) {
      throw DegenerateRowError("softmax row " + std::to_string(i) + " is fully masked");
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep[j]) denom += std::exp(logits[j] - row_max);
    }
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = keep[j] ? static_cast<Real>(std::exp(logits[j] - row_max) / denom) : Real(0);
    }
  }
  require_finite(out, "stable_softmax_rows");
  return out;
}

template <typename Real>
BasicTensor<Real> block_mean_pool(const BasicTensor<Real>& keys, const BlockPartition& partition) {
  require_matrix(keys, "block_mean_pool");
  if (partition.context_length() != keys.dim(0)) {
    std::ostringstream msg;
    msg << "partition covers " << partition.context_length() << " rows but keys have "
        << keys.dim(0);
    throw PartitionError(msg.str());
  }
  const std::size_t n = partition.num_blocks(), d = keys.dim(1);
  BasicTensor<Real> pooled({n, d});
  std::vector<double> acc(d);
  for (std::size_t b = 0; b < n; ++b) {
    const BlockRange& r = partition.ranges()[b];
    if (r.last < r.first) throw PartitionError("empty block " + std::to_string(b + 1));
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = r.begin0(); t < r.end0(); ++t)
      for (std::size_t j = 0; j < d; ++j) acc[j] += keys(t, j);
    const double len = static_cast<double>(r.length());
    for (std::size_t j = 0; j < d; ++j) pooled(b, j) = static_cast<Real>(acc[j] / len);
  }
  return pooled;
}

template <typename Real>
BasicTensor<Real> head_slice(const BasicTensor<Real>& x, std::size_t head) {
  if (x.rank() != 3 || head >= x.dim(1)) {
    throw DimensionError("head_slice expects [N, h, d] and a valid head, got " +
                         shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(2);
  BasicTensor<Real> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = x(i, head, j);
  return out;
}

template <typename Real>
void set_head_slice(BasicTensor<Real>& x, std::size_t head, const BasicTensor<Real>& slice) {
  if (x.rank() != 3 || head >= x.dim(1) || slice.rank() != 2 || slice.dim(0) != x.dim(0) ||
      slice.dim(1) != x.dim(2)) {
    throw DimensionError("set_head_slice shape mismatch: " + shape_string(x.shape()) + " <- " +
                         shape_string(slice.shape()));
  }
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(2); ++j) x(i, head, j) = slice(i, j);
}

template <typename Real>
Real max_abs_diff(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t SplitMix64::uniform_index(std::size_t lo, std::size_t hi) {
  if (hi < lo) throw ParameterError("uniform_index: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::size_t>(next() % span);
}

template <typename Real>
BasicTensor<Real> seeded_random(const Shape& shape, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Real> data(shape_volume(shape));
  for (auto& v : data) v = static_cast<Real>(rng.normal());
  return BasicTensor<Real>(shape, std::move(data));
}

#define MOBA_INSTANTIATE_TENSOR(Real)                                                           \
  template class BasicTensor<Real>;                                                             \
  template void require_finite(const BasicTensor<Real>&, const char*);                          \
  template BasicTensor<Real> matmul(const BasicTensor<Real>&, const BasicTensor<Real>&);        \
  template BasicTensor<Real> transpose(const BasicTensor<Real>&);                               \
  template BasicTensor<Real> stable_softmax_rows(const BasicTensor<Real>&,                      \
                                                 const std::optional<BasicTensor<Real>>&);      \
  template BasicTensor<Real> block_mean_pool(const BasicTensor<Real>&, const BlockPartition&);  \
  template BasicTensor<Real> head_slice(const BasicTensor<Real>&, std::size_t);                 \
  template void set_head_slice(BasicTensor<Real>&, std::size_t, const BasicTensor<Real>&);      \
  template Real max_abs_diff(const BasicTensor<Real>&, const BasicTensor<Real>&);               \
  template BasicTensor<Real> seeded_random<Real>(const Shape&, std::uint64_t);

MOBA_INSTANTIATE_TENSOR(float)
MOBA_INSTANTIATE_TENSOR(double)

#undef MOBA_INSTANTIATE_TENSOR

}  // namespace moba
