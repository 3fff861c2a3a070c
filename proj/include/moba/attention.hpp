#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moba/gating.hpp"
#include "moba/tensor.hpp"

namespace moba {

enum class AttentionMode { dense_causal, moba, swa, sink };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& name);

// Hyperparameters of one attention call. Mode-specific fields must be set
// exactly when the mode needs them:
//   moba  -> block_size, top_k
//   swa   -> block_size, window_blocks
//   sink  -> block_size, sink_blocks, recent_blocks
struct AttentionConfig {
  AttentionMode mode = AttentionMode::dense_causal;
  std::optional<std::size_t> block_size;
  std::optional<std::size_t> top_k;
  std::optional<std::size_t> window_blocks;
  std::optional<std::size_t> sink_blocks;
  std::optional<std::size_t> recent_blocks;
  bool scale = true;  // multiply logits by 1/sqrt(head_dim)
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;

  static AttentionConfig dense(std::size_t num_heads, std::size_t head_dim);
  static AttentionConfig moba(std::size_t num_heads, std::size_t head_dim, std::size_t block_size,
                              std::size_t top_k);
  static AttentionConfig swa(std::size_t num_heads, std::size_t head_dim, std::size_t block_size,
                             std::size_t window_blocks);
  static AttentionConfig sink(std::size_t num_heads, std::size_t head_dim, std::size_t block_size,
                              std::size_t sink_blocks, std::size_t recent_blocks);

  void validate() const;  // throws ConfigError
  double softmax_scale() const;
  std::string summary() const;
};

inline double softmax_scale(bool scale, std::size_t head_dim) {
  return scale ? 1.0 / std::sqrt(static_cast<double>(head_dim)) : 1.0;
}

// Un-normalized attention of a group of query rows against one key group:
// out = sum_j exp(logit_j - row_max) * v_j and normalizer = sum_j
// exp(logit_j - row_max). A row that saw no key has row_max = -inf,
// normalizer = 0 and a zero output row.
struct PartialAttention {
  Tensor out;
  std::vector<double> row_max;
  std::vector<double> normalizer;

  std::size_t rows() const { return row_max.size(); }
};

// Absolute offsets of the first query row and first key of a group; with a
// window set, key t is visible to query r iff key_offset + t <= query_offset + r.
struct CausalWindow {
  std::size_t query_offset = 0;
  std::size_t key_offset = 0;
};

PartialAttention partial_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   double scale, std::optional<CausalWindow> causal = std::nullopt);

// Online-softmax merge of two partials over the same query rows.
PartialAttention merge_partials(const PartialAttention& a, const PartialAttention& b);

// Folds parts in the given order and normalizes: one softmax over the union
// of the parts' logits.
Tensor online_softmax_combine(std::span<const PartialAttention> parts);

// Softmax(scale * Q K^T + mask) V per head, Q/K/V of shape [N, h, d].
template <typename Real>
BasicTensor<Real> dense_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                  const BasicTensor<Real>& v, bool causal, bool scale = true);

// (head, query, key) -> visible; all indices 0-based.
using KeyMask = std::function<bool(std::size_t, std::size_t, std::size_t)>;

// Dense attention under an explicit additive -inf mask built from `visible`.
template <typename Real>
BasicTensor<Real> masked_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                   const BasicTensor<Real>& v, const KeyMask& visible,
                                   bool scale = true);

// Gather-based reference: for each (p, h) collect the keys of every selected
// block (current block truncated at p) and take one softmax over them.
template <typename Real>
BasicTensor<Real> moba_attention_oracle(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                        const BasicTensor<Real>& v, const RoutingTable& routing,
                                        bool scale = true);

struct PipelineStats {
  // Keys each (p, h) attended to, index (p - 1) * h + head.
  std::vector<std::size_t> gathered_keys;
  // Total rows in the reordered history buffer, summed over heads.
  std::size_t history_rows = 0;
  // Selected block sets produced by the pipeline's own gate, same indexing.
  std::vector<std::vector<std::size_t>> selected_blocks;
};

// Block-sparse path: split KV into blocks, score against mean-pooled keys,
// top-k under the causal block mask, reorder queries by assigned history
// block, attend each block's query group (current block causally, history
// blocks without a mask), restore the order and merge with online softmax.
template <typename Real>
BasicTensor<Real> moba_attention_pipeline(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                          const BasicTensor<Real>& v, const AttentionConfig& config,
                                          PipelineStats* stats = nullptr);

// Dispatch on config.mode.
template <typename Real>
BasicTensor<Real> attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                            const BasicTensor<Real>& v, const AttentionConfig& config);

}  // namespace moba
