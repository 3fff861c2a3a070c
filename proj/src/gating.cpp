#include "moba/gating.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>

namespace moba {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

RoutingRow make_row(std::size_t query_pos, std::size_t head, std::size_t top_k,
                    std::size_t num_blocks, std::vector<std::size_t> selected) {
  RoutingRow row;
  row.query_pos = query_pos;
  row.head = head;
  row.top_k = top_k;
  std::sort(selected.begin(), selected.end());
  selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
  row.gates.assign(num_blocks, 0);
  for (auto b : selected) row.gates[b - 1] = 1;
  row.selected = std::move(selected);
  return row;
}

// Indicator scores for static gates: 1 for selected, 0 for visible but
// unselected, -inf for future blocks.
void fill_indicator_scores(RoutingRow& row, std::size_t current) {
  row.scores.assign(row.gates.size(), kNegInf);
  for (std::size_t i = 1; i <= current; ++i) row.scores[i - 1] = row.gates[i - 1] ? 1.0 : 0.0;
}

}  // namespace

RoutingTable::RoutingTable(BlockPartition partition, std::size_t num_heads, std::size_t top_k)
    : partition_(std::move(partition)), num_heads_(num_heads), top_k_(top_k) {
  rows_.resize(partition_.context_length() * num_heads_);
}

const RoutingRow& RoutingTable::row(std::size_t pos, std::size_t head) const {
  if (pos == 0 || pos > context_length() || head >= num_heads_) {
    std::ostringstream msg;
    msg << "routing lookup (pos=" << pos << ", head=" << head << ") outside table of "
        << context_length() << " positions x " << num_heads_ << " heads";
    throw RoutingError(msg.str());
  }
  return rows_[(pos - 1) * num_heads_ + head];
}

void RoutingTable::set_row(RoutingRow row) {
  if (row.query_pos == 0 || row.query_pos > context_length() || row.head >= num_heads_) {
    throw RoutingError("routing row does not fit the table");
  }
  validate_row(row, partition_);
  const std::size_t idx = (row.query_pos - 1) * num_heads_ + row.head;
  rows_[idx] = std::move(row);
}

std::vector<double> affinity_scores(std::span<const double> query, const Tensor& pooled_keys) {
  if (pooled_keys.rank() != 2 || pooled_keys.dim(1) != query.size()) {
    std::ostringstream msg;
    msg << "affinity_scores: query has d=" << query.size() << " but pooled keys are "
        << shape_string(pooled_keys.shape());
    throw DimensionError(msg.str());
  }
  std::vector<double> scores(pooled_keys.dim(0));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) s += query[j] * pooled_keys(i, j);
    scores[i] = s;
  }
  return scores;
}

RoutingRow moba_gate(std::span<const double> scores, std::size_t query_pos,
                     const BlockPartition& partition, std::size_t top_k, std::size_t head) {
  if (top_k == 0) throw ParameterError("moba_gate: top_k must be >= 1 to keep the current block");
  if (scores.size() != partition.num_blocks()) {
    std::ostringstream msg;
    msg << "moba_gate: " << scores.size() << " scores for " << partition.num_blocks()
        << " blocks";
    throw DimensionError(msg.str());
  }
  const std::size_t current = partition.block_of(query_pos);

  // Past blocks ranked by (score desc, index asc); the current block takes
  // the first slot unconditionally.
  std::vector<std::size_t> past(current - 1);
  std::iota(past.begin(), past.end(), std::size_t{1});
  const std::size_t history = std::min(top_k - 1, past.size());
  std::partial_sort(past.begin(), past.begin() + static_cast<std::ptrdiff_t>(history), past.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = scores[a - 1], sb = scores[b - 1];
                      return sa > sb || (sa == sb && a < b);
                    });
  std::vector<std::size_t> selected(past.begin(),
                                    past.begin() + static_cast<std::ptrdiff_t>(history));
  selected.push_back(current);

  RoutingRow row = make_row(query_pos, head, top_k, partition.num_blocks(), std::move(selected));
  row.scores.assign(scores.begin(), scores.end());
  for (std::size_t i = current + 1; i <= partition.num_blocks(); ++i) row.scores[i - 1] = kNegInf;
  return row;
}

RoutingRow swa_gate(std::size_t query_pos, const BlockPartition& partition, std::size_t window,
                    std::size_t head) {
  if (window == 0) throw ParameterError("swa_gate: window must be >= 1 block");
  const std::size_t current = partition.block_of(query_pos);
  const std::size_t first = current >= window ? current - window + 1 : 1;
  std::vector<std::size_t> selected;
  for (std::size_t b = first; b <= current; ++b) selected.push_back(b);
  RoutingRow row = make_row(query_pos, head, window, partition.num_blocks(), std::move(selected));
  fill_indicator_scores(row, current);
  return row;
}

RoutingRow sink_gate(std::size_t query_pos, const BlockPartition& partition, std::size_t num_sink,
                     std::size_t num_recent, std::size_t head) {
  if (num_sink == 0 || num_recent == 0) {
    throw ParameterError("sink_gate: num_sink and num_recent must be >= 1");
  }
  const std::size_t current = partition.block_of(query_pos);
  std::vector<std::size_t> selected;
  for (std::size_t b = 1; b <= std::min(num_sink, current); ++b) selected.push_back(b);
  const std::size_t first_recent = current >= num_recent ? current - num_recent + 1 : 1;
  for (std::size_t b = first_recent; b <= current; ++b) selected.push_back(b);
  RoutingRow row =
      make_row(query_pos, head, num_sink + num_recent, partition.num_blocks(), std::move(selected));
  fill_indicator_scores(row, current);
  return row;
}

template <typename Real>
RoutingTable route_moba(const BasicTensor<Real>& queries, const BasicTensor<Real>& keys,
                        const BlockPartition& partition, std::size_t top_k) {
  if (queries.rank() != 3 || keys.shape() != queries.shape()) {
    throw DimensionError("route_moba expects Q and K of equal shape [N, h, d], got " +
                         shape_string(queries.shape()) + " and " + shape_string(keys.shape()));
  }
  if (top_k == 0) throw ParameterError("route_moba: top_k must be >= 1");
  const std::size_t n = queries.dim(0), heads = queries.dim(1), d = queries.dim(2);
  if (partition.context_length() != n) {
    throw PartitionError("route_moba: partition length " +
                         std::to_string(partition.context_length()) + " != N " +
                         std::to_string(n));
  }
  RoutingTable table(partition, heads, top_k);
  std::vector<double> q(d);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor pooled = block_mean_pool(head_slice(keys, h), partition).template cast<double>();
    for (std::size_t p = 1; p <= n; ++p) {
      for (std::size_t j = 0; j < d; ++j) q[j] = queries(p - 1, h, j);
      table.set_row(moba_gate(affinity_scores(q, pooled), p, partition, top_k, h));
    }
  }
  return table;
}

template RoutingTable route_moba(const Tensor&, const Tensor&, const BlockPartition&, std::size_t);
template RoutingTable route_moba(const TensorF&, const TensorF&, const BlockPartition&,
                                 std::size_t);

RoutingTable route_swa(const BlockPartition& partition, std::size_t num_heads, std::size_t window) {
  RoutingTable table(partition, num_heads, window);
  for (std::size_t p = 1; p <= partition.context_length(); ++p)
    for (std::size_t h = 0; h < num_heads; ++h) table.set_row(swa_gate(p, partition, window, h));
  return table;
}

RoutingTable route_sink(const BlockPartition& partition, std::size_t num_heads,
                        std::size_t num_sink, std::size_t num_recent) {
  RoutingTable table(partition, num_heads, num_sink + num_recent);
  for (std::size_t p = 1; p <= partition.context_length(); ++p)
    for (std::size_t h = 0; h < num_heads; ++h)
      table.set_row(sink_gate(p, partition, num_sink, num_recent, h));
  return table;
}

void validate_row(const RoutingRow& row, const BlockPartition& partition) {
  const std::size_t current = partition.block_of(row.query_pos);
  auto fail = [&](const std::string& what) {
    std::ostringstream msg;
    msg << "routing row (pos=" << row.query_pos << ", head=" << row.head << "): " << what;
    throw RoutingError(msg.str());
  };
  if (row.gates.size() != partition.num_blocks()) fail("gate vector length mismatch");
  if (!std::is_sorted(row.selected.begin(), row.selected.end())) fail("selection not ascending");
  if (std::find(row.selected.begin(), row.selected.end(), current) == row.selected.end()) {
    fail("current block " + std::to_string(current) + " not selected");
  }
  if (!row.selected.empty() && row.selected.back() > current) {
    fail("future block " + std::to_string(row.selected.back()) + " selected");
  }
  if (row.selected.size() != std::min(row.top_k, current)) {
    fail("selected " + std::to_string(row.selected.size()) + " blocks, expected min(k, " +
         std::to_string(current) + ")");
  }
  std::size_t ones = 0;
  for (std::size_t i = 0; i < row.gates.size(); ++i) {
    if (row.gates[i] > 1) fail("gate value outside {0, 1}");
    ones += row.gates[i];
  }
  if (ones != row.selected.size()) fail("gate vector disagrees with selection");
  for (auto b : row.selected)
    if (row.gates[b - 1] != 1) fail("gate vector disagrees with selection");
}

}  // namespace moba
