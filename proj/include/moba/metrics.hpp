#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace moba {

// Exact fraction num / den in lowest terms.
struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Fraction&) const = default;
};

Fraction reduced(std::uint64_t num, std::uint64_t den);

// 1 - min(B * k, N) / N as an exact fraction.
Fraction sparsity_ratio(std::uint64_t context_length, std::uint64_t block_size,
                        std::uint64_t top_k);

struct LossBucket {
  std::size_t lo = 0;  // first position, 0-based
  std::size_t hi = 0;  // one past the last position
  double mean_loss = 0.0;
  std::size_t token_count = 0;
  std::size_t min_length = 0;  // sequences shorter than this were skipped
};

struct BucketSpec {
  std::size_t lo = 0;
  std::size_t hi = 0;
  std::size_t min_length = 0;
};

struct PositionwiseLoss {
  std::vector<LossBucket> buckets;
  // Requested buckets that no sequence populated.
  std::vector<BucketSpec> omitted;
};

// losses[s][t] is the loss of sequence s at position t; only the first
// lengths[s] entries are read.
PositionwiseLoss positionwise_lm_loss(std::span<const std::vector<double>> losses,
                                      std::span<const std::size_t> lengths,
                                      std::span<const BucketSpec> buckets);

// Consecutive buckets [0, w), [w, 2w), ... up to the longest sequence; a
// bucket [lo, hi) only averages sequences of length >= hi.
PositionwiseLoss positionwise_lm_loss(std::span<const std::vector<double>> losses,
                                      std::span<const std::size_t> lengths,
                                      std::size_t bucket_size = 2048);

// Mean loss over positions [max_len - tail_len, max_len) of sequences whose
// length equals max_len.
double trailing_lm_loss(std::span<const std::vector<double>> losses,
                        std::span<const std::size_t> lengths, std::size_t max_len,
                        std::size_t tail_len);

// L(C) = a * C^b fitted by least squares of log L on log C.
struct PowerLawFit {
  double a = 0.0;
  double b = 0.0;
  double residual = 0.0;  // RMS of log-space residuals
  std::size_t count = 0;
};

PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points);

std::string loss_bucket_csv_header();
std::string to_csv_row(const LossBucket& bucket);
std::string power_law_csv_header();
std::string to_csv_row(const PowerLawFit& fit);

}  // namespace moba
