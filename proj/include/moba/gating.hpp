#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moba/partition.hpp"
#include "moba/tensor.hpp"

namespace moba {

// Gate decision for one (query position, head). Block indices are 1-based.
struct RoutingRow {
  std::size_t query_pos = 0;  // 1-based
  std::size_t head = 0;       // 0-based
  std::size_t top_k = 0;
  // Ascending selected block indices; always contains the current block.
  std::vector<std::size_t> selected;
  // gates[i - 1] == 1 iff block i is selected.
  std::vector<std::uint8_t> gates;
  // Affinity per block with future blocks set to -inf. The current block
  // keeps its raw affinity here; selection treats it as +inf.
  std::vector<double> scores;

  bool operator==(const RoutingRow&) const = default;
};

// Routing for every (position, head) of one attention call.
class RoutingTable {
 public:
  RoutingTable() = default;
  RoutingTable(BlockPartition partition, std::size_t num_heads, std::size_t top_k);

  const BlockPartition& partition() const { return partition_; }
  std::size_t context_length() const { return partition_.context_length(); }
  std::size_t num_heads() const { return num_heads_; }
  std::size_t top_k() const { return top_k_; }

  // pos is 1-based, head 0-based.
  const RoutingRow& row(std::size_t pos, std::size_t head) const;
  void set_row(RoutingRow row);

  const std::vector<RoutingRow>& rows() const { return rows_; }

  bool operator==(const RoutingTable&) const = default;

 private:
  BlockPartition partition_;
  std::size_t num_heads_ = 0;
  std::size_t top_k_ = 0;
  std::vector<RoutingRow> rows_;  // index (pos - 1) * num_heads + head
};

// s_i = <q, pooled_keys[i]> for every block; no masking.
std::vector<double> affinity_scores(std::span<const double> query, const Tensor& pooled_keys);

// Top-k gate with causality: future blocks are masked, the current block is
// always selected and counts toward k, the remaining k - 1 slots go to the
// highest-scoring past blocks with ties resolved toward the lower index.
RoutingRow moba_gate(std::span<const double> scores, std::size_t query_pos,
                     const BlockPartition& partition, std::size_t top_k, std::size_t head = 0);

// The `window` most recent visible blocks, ending at the current block.
RoutingRow swa_gate(std::size_t query_pos, const BlockPartition& partition, std::size_t window,
                    std::size_t head = 0);

// First `num_sink` visible blocks together with the last `num_recent`.
RoutingRow sink_gate(std::size_t query_pos, const BlockPartition& partition, std::size_t num_sink,
                     std::size_t num_recent, std::size_t head = 0);

// Per-head MoBA routing for Q, K of shape [N, h, d]: mean-pool each head's
// keys per block, score every query, gate.
template <typename Real>
RoutingTable route_moba(const BasicTensor<Real>& queries, const BasicTensor<Real>& keys,
                        const BlockPartition& partition, std::size_t top_k);

RoutingTable route_swa(const BlockPartition& partition, std::size_t num_heads, std::size_t window);
RoutingTable route_sink(const BlockPartition& partition, std::size_t num_heads,
                        std::size_t num_sink, std::size_t num_recent);

// Checks the structural invariants of a row: current block selected, no
// future block, |S| == min(k, block(p)), gates consistent with `selected`.
// Throws RoutingError describing the first violation.
void validate_row(const RoutingRow& row, const BlockPartition& partition);

}  // namespace moba
