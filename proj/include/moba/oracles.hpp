#pragma once

// Reference implementations written as plain loops. They share no code with
// the library paths they check beyond the tensor container.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moba/gating.hpp"
#include "moba/tensor.hpp"

namespace moba::oracle {

// (head, query, key) -> visible, 0-based.
using Visible = std::function<bool(std::size_t, std::size_t, std::size_t)>;

// Per (query, head): softmax over visible keys of scale * <q, k>, then the
// weighted sum of values. Q/K/V are [N, h, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Visible& visible,
                 double scale);

// Sum of keys in each block divided by its length, [n, d] for one head of
// a [N, h, d] tensor.
Tensor mean_pool(const Tensor& keys, std::size_t head, std::size_t block_size);

// Enumerates every subset of past blocks of size min(k - 1, current - 1)
// and keeps the one with the best descending score list, ties going to the
// lexicographically smallest index list. Adds the current block. 1-based.
std::vector<std::size_t> brute_force_gate(std::span<const double> scores, std::size_t current,
                                          std::size_t top_k);

// Full MoBA reference: pool, score, brute-force gate, then attention over
// the union of selected blocks truncated at the query.
Tensor moba_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_size,
                      std::size_t top_k, double scale);

// sum_j softmax(logits)_j * values[j], values [len, dv].
std::vector<double> softmax_weighted_sum(std::span<const double> logits, const Tensor& values);

// log sum_j exp(logits_j) - logits[target].
double cross_entropy(std::span<const double> logits, std::size_t target);

// Keys gathered by a routing table, counted per selected block.
std::uint64_t gathered_keys(const RoutingTable& routing);

}  // namespace moba::oracle
