#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moba/attention.hpp"
#include "moba/gating.hpp"
#include "moba/metrics.hpp"
#include "moba/model.hpp"

namespace moba {

// Multiply-add counts for one attention call over N positions, all heads.
// A logit and its value accumulation cost 2 * d each, counted twice as
// multiply plus add, so one attended key costs 4 * d per head.
struct FlopReport {
  std::size_t context_length = 0;
  std::string config;
  std::uint64_t dense_flops = 0;      // sum_p 4 * p * d * h
  std::uint64_t attention_flops = 0;  // 4 * d * h per gathered key
  std::uint64_t gating_flops = 0;     // N * n * d * h affinity scores, moba mode only
  std::uint64_t moba_flops = 0;       // attention_flops + gating_flops
  double ratio = 0.0;                 // attention_flops / dense_flops
  double gating_ratio = 0.0;          // gating_flops / dense_flops
  Fraction sparsity;                  // zero for dense mode
  double theoretical_ratio = 1.0;     // 1 - sparsity
};

// Counts from block structure alone. Every past block is full, so the
// number of gathered keys does not depend on the scores.
FlopReport flop_report(const AttentionConfig& config, std::size_t context_length);

// Counts the keys an actual routing table gathers, current block truncated
// at the query.
FlopReport flop_report(const AttentionConfig& config, const RoutingTable& routing);

std::string flop_csv_header();
std::string to_csv_row(const FlopReport& report);

struct SweepOptions {
  bool strict = true;  // require block_count | N
  std::size_t num_heads = 1;
  std::size_t head_dim = 16;
  // Runs a seeded forward pass and records the max deviation from dense.
  bool forward_check = false;
  // Trains a toy model at each granularity (seq_len = N) when set.
  std::optional<TrainSchedule> train;
  std::vector<std::size_t> corpus;  // used when training
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::size_t block_count = 0;
  std::size_t block_size = 0;
  std::size_t top_k = 0;
  Fraction sparsity;
  FlopReport flops;
  std::optional<double> max_abs_gap_vs_dense;
  std::optional<double> final_loss;  // mean over the last tenth of steps
};

// One row per block count with k = (1 - sparsity_target) * block_count.
SweepRow sweep_row(std::size_t context_length, double sparsity_target, std::size_t block_count,
                   const SweepOptions& options = {});
std::vector<SweepRow> segmentation_sweep(std::size_t context_length, double sparsity_target,
                                         std::span<const std::size_t> block_counts,
                                         const SweepOptions& options = {});

std::string sweep_csv_header();
std::string to_csv_row(const SweepRow& row);

// Reference loss-versus-compute curves L(C) = a * C^b.
struct ReferenceCurve {
  std::string label;
  double a = 0.0;
  double b = 0.0;
};

std::span<const ReferenceCurve> reference_curves();

}  // namespace moba
