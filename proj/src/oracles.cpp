#include "moba/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "moba/errors.hpp"

namespace moba::oracle {

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Visible& visible,
                 double scale) {
  const std::size_t n = q.dim(0), heads = q.dim(1), d = q.dim(2);
  Tensor out(q.shape());
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!visible(h, i, j)) continue;
        double dot = 0.0;
        for (std::size_t t = 0; t < d; ++t) dot += q(i, h, t) * k(j, h, t);
        logits[j] = scale * dot;
        mx = std::max(mx, logits[j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) {
        throw OracleError("oracle attention: query row sees no key");
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (visible(h, i, j)) denom += std::exp(logits[j] - mx);
      for (std::size_t j = 0; j < n; ++j) {
        if (!visible(h, i, j)) continue;
        const double w = std::exp(logits[j] - mx) / denom;
        for (std::size_t t = 0; t < d; ++t) out(i, h, t) += w * v(j, h, t);
      }
    }
  }
  return out;
}

Tensor mean_pool(const Tensor& keys, std::size_t head, std::size_t block_size) {
  const std::size_t n = keys.dim(0), d = keys.dim(2);
  const std::size_t blocks = (n + block_size - 1) / block_size;
  Tensor pooled({blocks, d});
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * block_size, hi = std::min(n, lo + block_size);
    for (std::size_t t = 0; t < d; ++t) {
      double s = 0.0;
      for (std::size_t j = lo; j < hi; ++j) s += keys(j, head, t);
      pooled(b, t) = s / static_cast<double>(hi - lo);
    }
  }
  return pooled;
}

std::vector<std::size_t> brute_force_gate(std::span<const double> scores, std::size_t current,
                                          std::size_t top_k) {
  const std::size_t past = current - 1;
  if (past > 24) throw OracleError("brute_force_gate: too many past blocks to enumerate");
  const std::size_t want = std::min(top_k - 1, past);
  std::vector<std::size_t> best;
  std::vector<double> best_scores;
  bool have = false;
  for (std::uint32_t mask = 0; mask < (1u << past); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != want) continue;
    std::vector<std::size_t> subset;
    std::vector<double> subset_scores;
    for (std::size_t b = 0; b < past; ++b) {
      if (mask & (1u << b)) {
        subset.push_back(b + 1);
        subset_scores.push_back(scores[b]);
      }
    }
    std::sort(subset_scores.begin(), subset_scores.end(), std::greater<>());
    const bool better = !have || subset_scores > best_scores ||
                        (subset_scores == best_scores && subset < best);
    if (better) {
      best = subset;
      best_scores = subset_scores;
      have = true;
    }
  }
  best.push_back(current);
  return best;
}

Tensor moba_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t block_size,
                      std::size_t top_k, double scale) {
  const std::size_t n = q.dim(0), heads = q.dim(1), d = q.dim(2);
  // selected[h][i] = 1-based blocks for query i of head h.
  std::vector<std::vector<std::vector<std::size_t>>> selected(heads,
                                                              std::vector<std::vector<std::size_t>>(n));
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor pooled = mean_pool(k, h, block_size);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t current = i / block_size + 1;
      std::vector<double> scores(current - 1);
      for (std::size_t b = 0; b + 1 < current; ++b) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += q(i, h, t) * pooled(b, t);
        scores[b] = s;
      }
      selected[h][i] = brute_force_gate(scores, current, top_k);
    }
  }
  return attention(
      q, k, v,
      [&](std::size_t h, std::size_t i, std::size_t j) {
        if (j > i) return false;
        const auto& s = selected[h][i];
        return std::find(s.begin(), s.end(), j / block_size + 1) != s.end();
      },
      scale);
}

std::vector<double> softmax_weighted_sum(std::span<const double> logits, const Tensor& values) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double x : logits) denom += std::exp(x - mx);
  std::vector<double> out(values.dim(1), 0.0);
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double w = std::exp(logits[j] - mx) / denom;
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += w * values(j, t);
  }
  return out;
}

double cross_entropy(std::span<const double> logits, std::size_t target) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double x : logits) denom += std::exp(x - mx);
  return mx + std::log(denom) - logits[target];
}

std::uint64_t gathered_keys(const RoutingTable& routing) {
  const std::size_t b = routing.partition().block_size();
  std::uint64_t total = 0;
  for (const RoutingRow& row : routing.rows()) {
    for (std::size_t j = 1; j <= row.query_pos; ++j) {
      if (row.gates[(j - 1) / b] == 1) ++total;
    }
  }
  return total;
}

}  // namespace moba::oracle
