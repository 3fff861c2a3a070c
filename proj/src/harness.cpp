#include "moba/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "moba/errors.hpp"

namespace moba {

namespace {

std::uint64_t dense_count(std::size_t n, std::size_t d, std::size_t h) {
  const std::uint64_t keys = static_cast<std::uint64_t>(n) * (n + 1) / 2;
  return 4 * keys * d * h;
}

void finish(FlopReport& r, const AttentionConfig& config) {
  r.config = config.summary();
  r.dense_flops = dense_count(r.context_length, config.head_dim, config.num_heads);
  r.moba_flops = r.attention_flops + r.gating_flops;
  r.ratio = static_cast<double>(r.attention_flops) / static_cast<double>(r.dense_flops);
  r.gating_ratio = static_cast<double>(r.gating_flops) / static_cast<double>(r.dense_flops);
  if (config.mode == AttentionMode::moba && *config.block_size <= r.context_length) {
    r.sparsity = sparsity_ratio(r.context_length, *config.block_size, *config.top_k);
  }
  r.theoretical_ratio = 1.0 - r.sparsity.value();
}

std::uint64_t gating_count(const AttentionConfig& config, std::size_t n) {
  if (config.mode != AttentionMode::moba) return 0;
  const std::size_t blocks = (n + *config.block_size - 1) / *config.block_size;
  return static_cast<std::uint64_t>(n) * blocks * config.head_dim * config.num_heads;
}

}  // namespace

FlopReport flop_report(const AttentionConfig& config, std::size_t context_length) {
  config.validate();
  if (context_length == 0) throw ParameterError("flop_report: N must be >= 1");
  FlopReport r;
  r.context_length = context_length;
  const std::uint64_t per_key = 4ull * config.head_dim * config.num_heads;
  if (config.mode == AttentionMode::dense_causal) {
    r.attention_flops = dense_count(context_length, config.head_dim, config.num_heads);
    finish(r, config);
    return r;
  }
  const BlockPartition partition(context_length, *config.block_size);
  for (std::size_t b = 1; b <= partition.num_blocks(); ++b) {
    const BlockRange range = partition.range(b);
    std::size_t selected = 0;
    switch (config.mode) {
      case AttentionMode::moba:
        selected = std::min(*config.top_k, b);
        break;
      case AttentionMode::swa:
        selected = swa_gate(range.first, partition, *config.window_blocks).selected.size();
        break;
      case AttentionMode::sink:
        selected = sink_gate(range.first, partition, *config.sink_blocks, *config.recent_blocks)
                       .selected.size();
        break;
      case AttentionMode::dense_causal:
        break;
    }
    const std::uint64_t history = static_cast<std::uint64_t>(selected - 1) * partition.block_size();
    // Query at offset t within the block sees t + 1 current keys.
    const std::uint64_t len = range.length();
    r.attention_flops += per_key * (len * history + len * (len + 1) / 2);
  }
  r.gating_flops = gating_count(config, context_length);
  finish(r, config);
  return r;
}

FlopReport flop_report(const AttentionConfig& config, const RoutingTable& routing) {
  config.validate();
  if (config.mode == AttentionMode::dense_causal) {
    throw ConfigError("flop_report: a routing table needs a block-sparse mode");
  }
  if (routing.num_heads() != config.num_heads) {
    throw ConfigError("flop_report: routing has " + std::to_string(routing.num_heads()) +
                      " heads, config " + std::to_string(config.num_heads));
  }
  const BlockPartition& partition = routing.partition();
  FlopReport r;
  r.context_length = routing.context_length();
  std::uint64_t gathered = 0;
  for (const RoutingRow& row : routing.rows()) {
    for (std::size_t b : row.selected) {
      const BlockRange range = partition.range(b);
      gathered += std::min(range.last, row.query_pos) - range.first + 1;
    }
  }
  r.attention_flops = 4ull * config.head_dim * gathered;
  r.gating_flops = gating_count(config, r.context_length);
  finish(r, config);
  return r;
}

std::string flop_csv_header() {
  return "context_length,config,dense_flops,attention_flops,gating_flops,moba_flops,ratio,"
         "gating_ratio,sparsity,theoretical_ratio";
}

std::string to_csv_row(const FlopReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << r.context_length << ",\"" << r.config << "\"," << r.dense_flops << ','
      << r.attention_flops << ',' << r.gating_flops << ',' << r.moba_flops << ',' << r.ratio << ','
      << r.gating_ratio << ',' << r.sparsity.value() << ',' << r.theoretical_ratio;
  return out.str();
}

SweepRow sweep_row(std::size_t context_length, double sparsity_target, std::size_t block_count,
                   const SweepOptions& options) {
  if (context_length == 0 || block_count == 0 || block_count > context_length) {
    throw ConfigError("segmentation: need 1 <= block_count <= N");
  }
  if (!(sparsity_target >= 0.0 && sparsity_target < 1.0)) {
    throw ConfigError("segmentation: sparsity target must lie in [0, 1)");
  }
  if (options.strict && context_length % block_count != 0) {
    throw ConfigError("segmentation: " + std::to_string(block_count) + " blocks do not divide N=" +
                      std::to_string(context_length));
  }
  const double exact_k = (1.0 - sparsity_target) * static_cast<double>(block_count);
  const auto k = static_cast<std::size_t>(std::llround(exact_k));
  if (k == 0 || std::abs(exact_k - static_cast<double>(k)) > 1e-9 * block_count) {
    std::ostringstream msg;
    msg << "segmentation: sparsity " << sparsity_target << " needs a fractional selection of "
        << exact_k << " out of " << block_count << " blocks";
    throw ConfigError(msg.str());
  }
  SweepRow row;
  row.block_count = block_count;
  row.block_size = (context_length + block_count - 1) / block_count;
  row.top_k = k;
  row.sparsity = sparsity_ratio(context_length, row.block_size, k);
  const AttentionConfig config =
      AttentionConfig::moba(options.num_heads, options.head_dim, row.block_size, k);
  row.flops = flop_report(config, context_length);

  if (options.forward_check) {
    const Shape shape{context_length, options.num_heads, options.head_dim};
    const Tensor q = seeded_random<double>(shape, options.seed * 3 + 1);
    const Tensor kk = seeded_random<double>(shape, options.seed * 3 + 2);
    const Tensor v = seeded_random<double>(shape, options.seed * 3 + 3);
    row.max_abs_gap_vs_dense =
        max_abs_diff(moba_attention_pipeline(q, kk, v, config), dense_attention(q, kk, v, true));
  }
  if (options.train) {
    TrainSchedule schedule = *options.train;
    schedule.seq_len = context_length;
    LayerStackConfig stack;
    stack.num_heads = options.num_heads;
    stack.d_model = options.num_heads * options.head_dim;
    stack.max_context = std::max(stack.max_context, context_length);
    stack.block_size = row.block_size;
    stack.top_k = k;
    const TrainResult result = train_run(options.corpus, stack, schedule);
    const std::size_t tail = std::max<std::size_t>(1, result.records.size() / 10);
    double total = 0.0;
    for (std::size_t i = result.records.size() - tail; i < result.records.size(); ++i) {
      total += result.records[i].loss;
    }
    row.final_loss = total / static_cast<double>(tail);
  }
  return row;
}

std::vector<SweepRow> segmentation_sweep(std::size_t context_length, double sparsity_target,
                                         std::span<const std::size_t> block_counts,
                                         const SweepOptions& options) {
  std::vector<SweepRow> rows;
  for (std::size_t count : block_counts) {
    rows.push_back(sweep_row(context_length, sparsity_target, count, options));
  }
  return rows;
}

std::string sweep_csv_header() {
  return "block_count,block_size,top_k,sparsity,attention_flops,gating_flops,ratio,"
         "max_abs_gap_vs_dense,final_loss";
}

std::string to_csv_row(const SweepRow& r) {
  std::ostringstream out;
  out.precision(17);
  out << r.block_count << ',' << r.block_size << ',' << r.top_k << ',' << r.sparsity.value() << ','
      << r.flops.attention_flops << ',' << r.flops.gating_flops << ',' << r.flops.ratio << ',';
  if (r.max_abs_gap_vs_dense) out << *r.max_abs_gap_vs_dense;
  out << ',';
  if (r.final_loss) out << *r.final_loss;
  return out.str();
}

std::span<const ReferenceCurve> reference_curves() {
  static const std::array<ReferenceCurve, 36> curves{{
      {"lm_loss_8k/moba", 2.625, -0.063},        {"lm_loss_8k/full", 2.622, -0.063},
      {"trailing_32k_last_2k/moba", 1.546, -0.108}, {"trailing_32k_last_2k/full", 1.464, -0.097},
      {"pos_0k_2k/moba", 3.075, -0.078},         {"pos_0k_2k/full", 3.068, -0.078},
      {"pos_2k_4k/moba", 2.415, -0.084},         {"pos_2k_4k/full", 2.411, -0.083},
      {"pos_4k_6k/moba", 2.085, -0.081},         {"pos_4k_6k/full", 2.077, -0.081},
      {"pos_6k_8k/moba", 1.899, -0.092},         {"pos_6k_8k/full", 1.894, -0.092},
      {"pos_8k_10k/moba", 1.789, -0.091},        {"pos_8k_10k/full", 1.774, -0.089},
      {"pos_10k_12k/moba", 1.721, -0.092},       {"pos_10k_12k/full", 1.697, -0.087},
      {"pos_12k_14k/moba", 1.670, -0.089},       {"pos_12k_14k/full", 1.645, -0.088},
      {"pos_14k_16k/moba", 1.630, -0.089},       {"pos_14k_16k/full", 1.600, -0.087},
      {"pos_16k_18k/moba", 1.607, -0.090},       {"pos_16k_18k/full", 1.567, -0.087},
      {"pos_18k_20k/moba", 1.586, -0.091},       {"pos_18k_20k/full", 1.542, -0.087},
      {"pos_20k_22k/moba", 1.571, -0.093},       {"pos_20k_22k/full", 1.519, -0.086},
      {"pos_22k_24k/moba", 1.566, -0.089},       {"pos_22k_24k/full", 1.513, -0.085},
      {"pos_24k_26k/moba", 1.565, -0.091},       {"pos_24k_26k/full", 1.502, -0.085},
      {"pos_26k_28k/moba", 1.562, -0.095},       {"pos_26k_28k/full", 1.493, -0.088},
      {"pos_28k_30k/moba", 1.547, -0.097},       {"pos_28k_30k/full", 1.471, -0.091},
      {"pos_30k_32k/moba", 1.546, -0.108},       {"pos_30k_32k/full", 1.464, -0.097},
  }};
  return curves;
}

}  // namespace moba
