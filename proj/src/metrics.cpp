#include "moba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "moba/errors.hpp"

namespace moba {

Fraction reduced(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw DomainError("fraction with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Fraction{0, 1} : Fraction{num / g, den / g};
}

Fraction sparsity_ratio(std::uint64_t context_length, std::uint64_t block_size,
                        std::uint64_t top_k) {
  if (context_length == 0 || block_size == 0 || top_k == 0) {
    throw ParameterError("sparsity_ratio needs N, B, k >= 1");
  }
  if (block_size > context_length) {
    throw ParameterError("sparsity_ratio needs N >= B");
  }
  const std::uint64_t attended = std::min(block_size * top_k, context_length);
  return reduced(context_length - attended, context_length);
}

namespace {

void check_batch(std::span<const std::vector<double>> losses, std::span<const std::size_t> lengths) {
  if (losses.size() != lengths.size()) {
    throw DimensionError("loss batch has " + std::to_string(losses.size()) + " sequences but " +
                         std::to_string(lengths.size()) + " lengths");
  }
  for (std::size_t s = 0; s < losses.size(); ++s) {
    if (losses[s].size() < lengths[s]) {
      throw DimensionError("sequence " + std::to_string(s) + " has fewer losses than its length");
    }
  }
}

}  // namespace

PositionwiseLoss positionwise_lm_loss(std::span<const std::vector<double>> losses,
                                      std::span<const std::size_t> lengths,
                                      std::span<const BucketSpec> buckets) {
  check_batch(losses, lengths);
  PositionwiseLoss result;
  std::size_t prev_hi = 0;
  for (const BucketSpec& spec : buckets) {
    if (spec.hi <= spec.lo) throw ParameterError("bucket with hi <= lo");
    if (spec.lo < prev_hi) throw ParameterError("buckets must be disjoint and ordered");
    if (spec.min_length < spec.hi) {
      throw ParameterError("bucket min_length must cover the bucket end");
    }
    prev_hi = spec.hi;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < losses.size(); ++s) {
      if (lengths[s] < spec.min_length) continue;
      for (std::size_t t = spec.lo; t < spec.hi; ++t) {
        total += losses[s][t];
        ++count;
      }
    }
    if (count == 0) {
      result.omitted.push_back(spec);
      continue;
    }
    result.buckets.push_back(
        {spec.lo, spec.hi, total / static_cast<double>(count), count, spec.min_length});
  }
  return result;
}

PositionwiseLoss positionwise_lm_loss(std::span<const std::vector<double>> losses,
                                      std::span<const std::size_t> lengths,
                                      std::size_t bucket_size) {
  if (bucket_size == 0) throw ParameterError("bucket_size must be >= 1");
  check_batch(losses, lengths);
  const std::size_t longest =
      lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
  std::vector<BucketSpec> specs;
  for (std::size_t lo = 0; lo < longest; lo += bucket_size) {
    const std::size_t hi = std::min(lo + bucket_size, longest);
    specs.push_back({lo, hi, hi});
  }
  return positionwise_lm_loss(losses, lengths, specs);
}

double trailing_lm_loss(std::span<const std::vector<double>> losses,
                        std::span<const std::size_t> lengths, std::size_t max_len,
                        std::size_t tail_len) {
  if (tail_len == 0 || tail_len > max_len) {
    throw ParameterError("trailing_lm_loss needs 1 <= tail_len <= max_len");
  }
  check_batch(losses, lengths);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < losses.size(); ++s) {
    if (lengths[s] != max_len) continue;
    for (std::size_t t = max_len - tail_len; t < max_len; ++t) {
      total += losses[s][t];
      ++count;
    }
  }
  if (count == 0) {
    throw DegenerateRowError("trailing_lm_loss: no sequence reaches length " +
                             std::to_string(max_len));
  }
  return total / static_cast<double>(count);
}

PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2) throw DomainError("fit_power_law needs at least 2 points");
  const double n = static_cast<double>(points.size());
  double mean_x = 0.0, mean_y = 0.0;
  for (auto [c, l] : points) {
    if (!(c > 0) || !(l > 0)) {
      std::ostringstream msg;
      msg << "fit_power_law: compute and loss must be positive (got C=" << c << ", L=" << l << ")";
      throw DomainError(msg.str());
    }
    mean_x += std::log(c);
    mean_y += std::log(l);
  }
  mean_x /= n;
  mean_y /= n;
  double sxx = 0.0, sxy = 0.0;
  for (auto [c, l] : points) {
    const double dx = std::log(c) - mean_x;
    sxx += dx * dx;
    sxy += dx * (std::log(l) - mean_y);
  }
  if (!(sxx > 0)) throw DomainError("fit_power_law: all compute values are equal");
  PowerLawFit fit;
  fit.b = sxy / sxx;
  const double intercept = mean_y - fit.b * mean_x;
  fit.a = std::exp(intercept);
  double ss = 0.0;
  for (auto [c, l] : points) {
    const double r = std::log(l) - (intercept + fit.b * std::log(c));
    ss += r * r;
  }
  fit.residual = std::sqrt(ss / n);
  fit.count = points.size();
  return fit;
}

std::string loss_bucket_csv_header() { return "lo,hi,mean_loss,token_count,min_length"; }

std::string to_csv_row(const LossBucket& b) {
  std::ostringstream out;
  out.precision(17);
  out << b.lo << ',' << b.hi << ',' << b.mean_loss << ',' << b.token_count << ',' << b.min_length;
  return out.str();
}

std::string power_law_csv_header() { return "a,b,residual,count"; }

std::string to_csv_row(const PowerLawFit& f) {
  std::ostringstream out;
  out.precision(17);
  out << f.a << ',' << f.b << ',' << f.residual << ',' << f.count;
  return out.str();
}

}  // namespace moba
