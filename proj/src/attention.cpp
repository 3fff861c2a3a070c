#include "moba/attention.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <sstream>

namespace moba {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <typename Real>
void check_qkv(const BasicTensor<Real>& q, const BasicTensor<Real>& k, const BasicTensor<Real>& v,
               const char* what) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError(std::string(what) + " expects Q, K, V of equal shape [N, h, d], got " +
                         shape_string(q.shape()) + ", " + shape_string(k.shape()) + ", " +
                         shape_string(v.shape()));
  }
  if (q.dim(0) == 0) throw DimensionError(std::string(what) + ": empty input (N = 0)");
}

void check_config_dims(const AttentionConfig& config, const Shape& shape) {
  if (config.num_heads != shape[1] || config.head_dim != shape[2]) {
    std::ostringstream msg;
    msg << "attention config (h=" << config.num_heads << ", d=" << config.head_dim
        << ") does not match input " << shape_string(shape);
    throw ConfigError(msg.str());
  }
}

// One un-normalized row of a partial: running max, normalizer and a span
// into the weighted value sum.
struct PartialRow {
  double row_max;
  double normalizer;
  std::span<const double> out;
};

// Online-softmax fold over rows in the given order, then normalize.
void combine_rows(std::span<const PartialRow> parts, std::span<double> result) {
  double m = -kInf;
  for (const auto& p : parts)
    if (p.normalizer > 0) m = std::max(m, p.row_max);
  std::fill(result.begin(), result.end(), 0.0);
  double l = 0.0;
  for (const auto& p : parts) {
    if (!(p.normalizer > 0)) continue;
    const double c = std::exp(p.row_max - m);
    l += c * p.normalizer;
    for (std::size_t j = 0; j < result.size(); ++j) result[j] += c * p.out[j];
  }
  if (!(l > 0)) throw DegenerateRowError("online softmax row has zero total normalizer");
  for (auto& x : result) x /= l;
}

}  // namespace

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::dense_causal: return "dense-causal";
    case AttentionMode::moba: return "moba";
    case AttentionMode::swa: return "swa";
    case AttentionMode::sink: return "sink";
  }
  return "unknown";
}

AttentionMode parse_attention_mode(const std::string& name) {
  if (name == "dense-causal" || name == "dense" || name == "full") return AttentionMode::dense_causal;
  if (name == "moba") return AttentionMode::moba;
  if (name == "swa") return AttentionMode::swa;
  if (name == "sink") return AttentionMode::sink;
  throw ConfigError("unknown attention mode '" + name + "'");
}

AttentionConfig AttentionConfig::dense(std::size_t num_heads, std::size_t head_dim) {
  AttentionConfig c;
  c.num_heads = num_heads;
  c.head_dim = head_dim;
  return c;
}

AttentionConfig AttentionConfig::moba(std::size_t num_heads, std::size_t head_dim,
                                      std::size_t block_size, std::size_t top_k) {
  AttentionConfig c = dense(num_heads, head_dim);
  c.mode = AttentionMode::moba;
  c.block_size = block_size;
  c.top_k = top_k;
  return c;
}

AttentionConfig AttentionConfig::swa(std::size_t num_heads, std::size_t head_dim,
                                     std::size_t block_size, std::size_t window_blocks) {
  AttentionConfig c = dense(num_heads, head_dim);
  c.mode = AttentionMode::swa;
  c.block_size = block_size;
  c.window_blocks = window_blocks;
  return c;
}

AttentionConfig AttentionConfig::sink(std::size_t num_heads, std::size_t head_dim,
                                      std::size_t block_size, std::size_t sink_blocks,
                                      std::size_t recent_blocks) {
  AttentionConfig c = dense(num_heads, head_dim);
  c.mode = AttentionMode::sink;
  c.block_size = block_size;
  c.sink_blocks = sink_blocks;
  c.recent_blocks = recent_blocks;
  return c;
}

void AttentionConfig::validate() const {
  auto need = [&](const std::optional<std::size_t>& field, bool required, const char* name) {
    if (required && !field) {
      throw ConfigError(to_string(mode) + " attention requires " + name);
    }
    if (!required && field) {
      throw ConfigError(std::string(name) + " is not a parameter of " + to_string(mode) +
                        " attention");
    }
    if (field && *field == 0) throw ConfigError(std::string(name) + " must be >= 1");
  };
  const bool blocked = mode != AttentionMode::dense_causal;
  need(block_size, blocked, "block_size");
  need(top_k, mode == AttentionMode::moba, "top_k");
  need(window_blocks, mode == AttentionMode::swa, "window_blocks");
  need(sink_blocks, mode == AttentionMode::sink, "sink_blocks");
  need(recent_blocks, mode == AttentionMode::sink, "recent_blocks");
  if (num_heads == 0 || head_dim == 0) throw ConfigError("num_heads and head_dim must be >= 1");
}

double AttentionConfig::softmax_scale() const { return moba::softmax_scale(scale, head_dim); }

std::string AttentionConfig::summary() const {
  std::ostringstream out;
  out << to_string(mode) << " h=" << num_heads << " d=" << head_dim;
  if (block_size) out << " B=" << *block_size;
  if (top_k) out << " k=" << *top_k;
  if (window_blocks) out << " window=" << *window_blocks;
  if (sink_blocks) out << " sink=" << *sink_blocks;
  if (recent_blocks) out << " recent=" << *recent_blocks;
  out << (scale ? " scaled" : " unscaled");
  return out.str();
}

PartialAttention partial_attention(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   double scale, std::optional<CausalWindow> causal) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 ||
      keys.dim(0) != values.dim(0) || queries.dim(1) != keys.dim(1)) {
    throw DimensionError("partial_attention shape mismatch: q " + shape_string(queries.shape()) +
                         ", k " + shape_string(keys.shape()) + ", v " +
                         shape_string(values.shape()));
  }
  const std::size_t m = queries.dim(0), nk = keys.dim(0), d = queries.dim(1), dv = values.dim(1);
  PartialAttention part{Tensor({m, dv}), std::vector<double>(m, -kInf),
                        std::vector<double>(m, 0.0)};
  std::vector<double> logits(nk);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t visible = nk;
    if (causal) {
      const std::size_t qpos = causal->query_offset + r;
      visible = qpos < causal->key_offset ? 0 : std::min(nk, qpos - causal->key_offset + 1);
    }
    if (visible == 0) continue;
    double row_max = -kInf;
    for (std::size_t t = 0; t < visible; ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += queries(r, j) * keys(t, j);
      logits[t] = s * scale;
      row_max = std::max(row_max, logits[t]);
    }
    double l = 0.0;
    auto out = part.out.row(r);
    for (std::size_t t = 0; t < visible; ++t) {
      const double w = std::exp(logits[t] - row_max);
      l += w;
      for (std::size_t j = 0; j < dv; ++j) out[j] += w * values(t, j);
    }
    part.row_max[r] = row_max;
    part.normalizer[r] = l;
  }
  return part;
}

PartialAttention merge_partials(const PartialAttention& a, const PartialAttention& b) {
  if (a.rows() != b.rows() || a.out.shape() != b.out.shape()) {
    throw DimensionError("merge_partials: partials cover different row sets");
  }
  PartialAttention merged{Tensor(a.out.shape()), std::vector<double>(a.rows(), -kInf),
                          std::vector<double>(a.rows(), 0.0)};
  const std::size_t dv = a.out.rank() == 2 ? a.out.dim(1) : 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const bool has_a = a.normalizer[r] > 0, has_b = b.normalizer[r] > 0;
    if (!has_a && !has_b) continue;
    const double m = std::max(has_a ? a.row_max[r] : -kInf, has_b ? b.row_max[r] : -kInf);
    const double ca = has_a ? std::exp(a.row_max[r] - m) : 0.0;
    const double cb = has_b ? std::exp(b.row_max[r] - m) : 0.0;
    merged.row_max[r] = m;
    merged.normalizer[r] = ca * a.normalizer[r] + cb * b.normalizer[r];
    for (std::size_t j = 0; j < dv; ++j) {
      merged.out(r, j) = (has_a ? ca * a.out(r, j) : 0.0) + (has_b ? cb * b.out(r, j) : 0.0);
    }
  }
  return merged;
}

Tensor online_softmax_combine(std::span<const PartialAttention> parts) {
  if (parts.empty()) throw DegenerateRowError("online_softmax_combine: no parts");
  const PartialAttention& first = parts.front();
  for (const auto& p : parts) {
    if (p.rows() != first.rows() || p.out.shape() != first.out.shape() ||
        p.normalizer.size() != p.rows()) {
      throw DimensionError("online_softmax_combine: parts disagree on rows or value width");
    }
  }
  const std::size_t rows = first.rows(), dv = first.out.dim(1);
  Tensor result({rows, dv});
  std::vector<PartialRow> row_parts(parts.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      row_parts[i] = {parts[i].row_max[r], parts[i].normalizer[r], parts[i].out.row(r)};
    }
    try {
      combine_rows(row_parts, result.row(r));
    } catch (const DegenerateRowError&) {
      throw DegenerateRowError("online_softmax_combine: row " + std::to_string(r) +
                               " has no attended key in any part");
    }
  }
  return result;
}

template <typename Real>
BasicTensor<Real> masked_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                   const BasicTensor<Real>& v, const KeyMask& visible,
                                   bool scale) {
  check_qkv(q, k, v, "masked_attention");
  const std::size_t n = q.dim(0), heads = q.dim(1), d = q.dim(2);
  const double s = softmax_scale(scale, d);
  BasicTensor<Real> out(q.shape());
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = head_slice(q, h).template cast<double>();
    const Tensor kh = head_slice(k, h).template cast<double>();
    const Tensor vh = head_slice(v, h).template cast<double>();
    Tensor logits = matmul(qh, transpose(kh));
    Tensor mask({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        logits(i, j) *= s;
        mask(i, j) = visible(h, i, j) ? 0.0 : -kInf;
      }
    }
    const Tensor probs = stable_softmax_rows(logits, std::optional<Tensor>(std::move(mask)));
    set_head_slice(out, h, matmul(probs, vh).template cast<Real>());
  }
  return out;
}

template <typename Real>
BasicTensor<Real> dense_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                  const BasicTensor<Real>& v, bool causal, bool scale) {
  check_qkv(q, k, v, "dense_attention");
  if (causal) {
    return masked_attention(
        q, k, v, [](std::size_t, std::size_t i, std::size_t j) { return j <= i; }, scale);
  }
  return masked_attention(
      q, k, v, [](std::size_t, std::size_t, std::size_t) { return true; }, scale);
}

template <typename Real>
BasicTensor<Real> moba_attention_oracle(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                        const BasicTensor<Real>& v, const RoutingTable& routing,
                                        bool scale) {
  check_qkv(q, k, v, "moba_attention_oracle");
  const std::size_t n = q.dim(0), heads = q.dim(1), d = q.dim(2);
  if (routing.context_length() != n || routing.num_heads() != heads) {
    std::ostringstream msg;
    msg << "routing table covers " << routing.context_length() << " positions x "
        << routing.num_heads() << " heads but input is " << shape_string(q.shape());
    throw RoutingError(msg.str());
  }
  const BlockPartition& partition = routing.partition();
  const double s = softmax_scale(scale, d);
  BasicTensor<Real> out(q.shape());
  std::vector<std::size_t> gathered;
  std::vector<double> logits;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t p = 1; p <= n; ++p) {
      const RoutingRow& row = routing.row(p, h);
      const std::size_t current = partition.block_of(p);
      gathered.clear();
      for (auto b : row.selected) {
        const BlockRange& r = partition.range(b);
        if (b > current) throw RoutingError("oracle: routing selects a future block");
        const std::size_t end = b == current ? p : r.last;  // causal inside current block
        for (std::size_t t = r.first; t <= end; ++t) gathered.push_back(t - 1);
      }
      if (gathered.empty()) throw RoutingError("oracle: query gathered no keys");
      logits.resize(gathered.size());
      double row_max = -kInf;
      for (std::size_t i = 0; i < gathered.size(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j)
          acc += static_cast<double>(q(p - 1, h, j)) * k(gathered[i], h, j);
        logits[i] = acc * s;
        row_max = std::max(row_max, logits[i]);
      }
      double denom = 0.0;
      for (auto& x : logits) {
        x = std::exp(x - row_max);
        denom += x;
      }
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gathered.size(); ++i) acc += logits[i] * v(gathered[i], h, j);
        out(p - 1, h, j) = static_cast<Real>(acc / denom);
      }
    }
  }
  require_finite(out, "moba_attention_oracle");
  return out;
}

template <typename Real>
BasicTensor<Real> moba_attention_pipeline(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                                          const BasicTensor<Real>& v, const AttentionConfig& config,
                                          PipelineStats* stats) {
  check_qkv(q, k, v, "moba_attention_pipeline");
  config.validate();
  if (config.mode != AttentionMode::moba) {
    throw ConfigError("moba_attention_pipeline requires mode moba, got " + to_string(config.mode));
  }
  check_config_dims(config, q.shape());
  const std::size_t n = q.dim(0), heads = q.dim(1), d = q.dim(2);
  const std::size_t top_k = *config.top_k;
  const BlockPartition partition = make_partition(n, *config.block_size);
  const std::size_t nb = partition.num_blocks();
  const double scale = config.softmax_scale();

  if (stats) {
    stats->gathered_keys.assign(n * heads, 0);
    stats->selected_blocks.assign(n * heads, {});
    stats->history_rows = 0;
  }

  BasicTensor<Real> out(q.shape());
  std::vector<std::size_t> order(nb);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = head_slice(q, h).template cast<double>();
    const Tensor kh = head_slice(k, h).template cast<double>();
    const Tensor vh = head_slice(v, h).template cast<double>();

    // Split KV into blocks.
    std::vector<Tensor> key_blocks, value_blocks;
    key_blocks.reserve(nb);
    value_blocks.reserve(nb);
    for (const BlockRange& r : partition.ranges()) {
      Tensor kb({r.length(), d}), vb({r.length(), d});
      for (std::size_t t = 0; t < r.length(); ++t)
        for (std::size_t j = 0; j < d; ++j) {
          kb(t, j) = kh(r.begin0() + t, j);
          vb(t, j) = vh(r.begin0() + t, j);
        }
      key_blocks.push_back(std::move(kb));
      value_blocks.push_back(std::move(vb));
    }

    // Gate scores S = Q * mean_pool(K)^T, then the causal block mask M:
    // +inf on the current block, -inf on future blocks.
    Tensor gate_scores = matmul(qh, transpose(block_mean_pool(kh, partition)));
    for (std::size_t row = 0; row < n; ++row) {
      const std::size_t current = row / *config.block_size;  // 0-based block
      gate_scores(row, current) = kInf;
      for (std::size_t b = current + 1; b < nb; ++b) gate_scores(row, b) = -kInf;
    }

    // G = topk(S + M, k); rows of `assigned[b]` are queries routed to history block b.
    std::vector<std::vector<std::size_t>> assigned(nb);
    for (std::size_t row = 0; row < n; ++row) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return gate_scores(row, a) > gate_scores(row, b);
      });
      std::size_t taken = 0;
      for (std::size_t i = 0; i < nb && taken < top_k; ++i) {
        const std::size_t b = order[i];
        if (gate_scores(row, b) == -kInf) break;
        ++taken;
        if (gate_scores(row, b) != kInf) assigned[b].push_back(row);
        if (stats) stats->selected_blocks[row * heads + h].push_back(b + 1);
      }
      if (stats) {
        auto& sel = stats->selected_blocks[row * heads + h];
        std::sort(sel.begin(), sel.end());
      }
    }

    // Reorder queries by assigned history block: contiguous buffer plus the
    // permutation (reordered row -> original query) and per-block offsets.
    std::vector<std::size_t> permutation;
    std::vector<std::size_t> offsets{0};
    for (std::size_t b = 0; b < nb; ++b) {
      permutation.insert(permutation.end(), assigned[b].begin(), assigned[b].end());
      offsets.push_back(permutation.size());
    }
    const std::size_t history_rows = permutation.size();
    Tensor reordered_q({history_rows, d});
    for (std::size_t r = 0; r < history_rows; ++r)
      for (std::size_t j = 0; j < d; ++j) reordered_q(r, j) = qh(permutation[r], j);

    // Varlen attention. History groups carry no mask; each block's own
    // queries attend to it causally.
    Tensor history_out({history_rows, d});
    std::vector<double> history_max(history_rows), history_norm(history_rows);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t rows = offsets[b + 1] - offsets[b];
      if (rows == 0) continue;
      Tensor group({rows, d});
      std::copy_n(reordered_q.data().begin() + static_cast<std::ptrdiff_t>(offsets[b] * d),
                  rows * d, group.data().begin());
      const PartialAttention part = partial_attention(group, key_blocks[b], value_blocks[b], scale);
      for (std::size_t r = 0; r < rows; ++r) {
        history_max[offsets[b] + r] = part.row_max[r];
        history_norm[offsets[b] + r] = part.normalizer[r];
        std::copy_n(part.out.row(r).begin(), d, history_out.row(offsets[b] + r).begin());
      }
    }
    std::vector<PartialAttention> self_parts;
    self_parts.reserve(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const BlockRange& r = partition.ranges()[b];
      Tensor group({r.length(), d});
      std::copy_n(qh.data().begin() + static_cast<std::ptrdiff_t>(r.begin0() * d), r.length() * d,
                  group.data().begin());
      self_parts.push_back(partial_attention(group, key_blocks[b], value_blocks[b], scale,
                                             CausalWindow{r.begin0(), r.begin0()}));
    }

    // Inverse permutation: original query -> reordered rows in ascending block order.
    std::vector<std::vector<std::size_t>> inverse(n);
    for (std::size_t r = 0; r < history_rows; ++r) inverse[permutation[r]].push_back(r);

    // Online-softmax combine per query: history blocks ascending, then the current block.
    std::vector<PartialRow> row_parts;
    std::vector<double> combined(d);
    for (std::size_t row = 0; row < n; ++row) {
      const std::size_t current = row / *config.block_size;
      const std::size_t local = row - partition.ranges()[current].begin0();
      row_parts.clear();
      std::size_t keys_seen = local + 1;
      for (auto r : inverse[row]) {
        row_parts.push_back({history_max[r], history_norm[r], history_out.row(r)});
        const std::size_t block = std::upper_bound(offsets.begin(), offsets.end(), r) -
                                  offsets.begin() - 1;
        keys_seen += partition.ranges()[block].length();
      }
      const PartialAttention& self = self_parts[current];
      row_parts.push_back({self.row_max[local], self.normalizer[local], self.out.row(local)});
      if (!(self.normalizer[local] > 0)) {
        throw PipelineError("pipeline: query " + std::to_string(row + 1) + " (head " +
                            std::to_string(h) + ") was assigned no attention group");
      }
      combine_rows(row_parts, combined);
      for (std::size_t j = 0; j < d; ++j) out(row, h, j) = static_cast<Real>(combined[j]);
      if (stats) stats->gathered_keys[row * heads + h] = keys_seen;
    }
    if (stats) stats->history_rows += history_rows;
  }
  require_finite(out, "moba_attention_pipeline");
  return out;
}

template <typename Real>
BasicTensor<Real> attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k,
                            const BasicTensor<Real>& v, const AttentionConfig& config) {
  config.validate();
  check_qkv(q, k, v, "attention");
  check_config_dims(config, q.shape());
  const std::size_t n = q.dim(0);
  switch (config.mode) {
    case AttentionMode::dense_causal: return dense_attention(q, k, v, true, config.scale);
    case AttentionMode::moba: return moba_attention_pipeline(q, k, v, config);
    case AttentionMode::swa:
      return moba_attention_oracle(
          q, k, v, route_swa(make_partition(n, *config.block_size), config.num_heads,
                             *config.window_blocks),
          config.scale);
    case AttentionMode::sink:
      return moba_attention_oracle(
          q, k, v, route_sink(make_partition(n, *config.block_size), config.num_heads,
                              *config.sink_blocks, *config.recent_blocks),
          config.scale);
  }
  throw ConfigError("unhandled attention mode");
}

#define MOBA_INSTANTIATE_ATTENTION(Real)                                                        \
  template BasicTensor<Real> dense_attention(const BasicTensor<Real>&, const BasicTensor<Real>&, \
                                             const BasicTensor<Real>&, bool, bool);              \
  template BasicTensor<Real> masked_attention(const BasicTensor<Real>&,                          \
                                              const BasicTensor<Real>&,                          \
                                              const BasicTensor<Real>&, const KeyMask&, bool);   \
  template BasicTensor<Real> moba_attention_oracle(const BasicTensor<Real>&,                     \
                                                   const BasicTensor<Real>&,                     \
                                                   const BasicTensor<Real>&,                     \
                                                   const RoutingTable&, bool);                   \
  template BasicTensor<Real> moba_attention_pipeline(                                            \
      const BasicTensor<Real>&, const BasicTensor<Real>&, const BasicTensor<Real>&,              \
      const AttentionConfig&, PipelineStats*);                                                   \
  template BasicTensor<Real> attention(const BasicTensor<Real>&, const BasicTensor<Real>&,       \
                                       const BasicTensor<Real>&, const AttentionConfig&);

MOBA_INSTANTIATE_ATTENTION(float)
MOBA_INSTANTIATE_ATTENTION(double)

#undef MOBA_INSTANTIATE_ATTENTION

}  // namespace moba
