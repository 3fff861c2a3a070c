#include "moba/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace moba::ad {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable not on this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable not on this tape");
  return nodes_[v.id];
}

void Tape::ensure_grad(Node& n) const {
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
const std::string& Tape::op(Var v) const { return node(v).op; }

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this || in.id >= nodes_.size()) {
      throw ContractError(n.op + ": input is not an earlier node of this tape");
    }
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match " +
                         n.op + " value " + shape_string(n.value.shape()));
  }
  ensure_grad(n);
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate_at(Var v, std::size_t flat_index, double g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  ensure_grad(n);
  n.grad[flat_index] += g;
}

void Tape::backward(Var root) {
  Node& r = node(root);
  if (r.value.size() != 1) {
    throw ContractError("backward needs a scalar root, got shape " + shape_string(r.value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  ensure_grad(r);
  r.grad[0] = 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.shape() != n.value.shape()) continue;
    // Copy: the callback may grow other nodes' gradients but never this one.
    const Tensor out_grad = n.grad;
    n.backward(*this, out_grad);
  }
}

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& tape = *a.tape;
  Tensor value = moba::matmul(a.value(), b.value());
  return tape.record("matmul", std::move(value), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.accumulate(a, moba::matmul(g, transpose(t.value(b))));
    if (t.requires_grad(b)) t.accumulate(b, moba::matmul(transpose(t.value(a)), g));
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  if (a.value().shape() != b.value().shape()) {
    throw DimensionError("add: shapes " + shape_string(a.value().shape()) + " and " +
                         shape_string(b.value().shape()) + " differ");
  }
  Tensor value = a.value();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] += b.value()[i];
  return a.tape->record("add", std::move(value), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  require_matrix(xv, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: bias of size " + std::to_string(bias.value().size()) +
                         " for " + std::to_string(n) + " columns");
  }
  Tensor value = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) value(i, j) += bias.value()[j];
  return x.tape->record("add_bias", std::move(value), {x, bias},
                        [x, bias, m, n](Tape& t, const Tensor& g) {
                          t.accumulate(x, g);
                          if (!t.requires_grad(bias)) return;
                          Tensor gb(t.value(bias).shape());
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
                          t.accumulate(bias, gb);
                        });
}

Var scale(Var x, double factor) {
  Tensor value = x.value();
  for (auto& e : value.data()) e *= factor;
  return x.tape->record("scale", std::move(value), {x}, [x, factor](Tape& t, const Tensor& g) {
    Tensor gx = g;
    for (auto& e : gx.data()) e *= factor;
    t.accumulate(x, gx);
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t rows = tv.dim(0), d = tv.dim(1);
  std::vector<std::size_t> picked(ids.begin(), ids.end());
  Tensor value({picked.size(), d});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    if (picked[i] >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(picked[i]) + " >= table rows " +
                           std::to_string(rows));
    }
    std::copy_n(tv.row(picked[i]).begin(), d, value.row(i).begin());
  }
  return table.tape->record("gather_rows", std::move(value), {table},
                            [table, picked, d](Tape& t, const Tensor& g) {
                              for (std::size_t i = 0; i < picked.size(); ++i)
                                for (std::size_t j = 0; j < d; ++j)
                                  t.accumulate_at(table, picked[i] * d + j, g(i, j));
                            });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias width does not match input");
  }
  Tensor normalized({m, n});
  std::vector<double> inv_std(m);
  Tensor value({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized(i, j) = (xv(i, j) - mean) * inv_std[i];
      value(i, j) = gain.value()[j] * normalized(i, j) + bias.value()[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(value), {x, gain, bias},
      [x, gain, bias, normalized, inv_std, m, n](Tape& t, const Tensor& g) {
        Tensor gg(t.value(gain).shape()), gb(t.value(bias).shape()), gx({m, n});
        const Tensor& gamma = t.value(gain);
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gg[j] += g(i, j) * normalized(i, j);
            gb[j] += g(i, j);
            dxhat[j] = g(i, j) * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * normalized(i, j);
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx(i, j) = inv_std[i] * (dxhat[j] - mean_d - normalized(i, j) * mean_dx);
          }
        }
        t.accumulate(x, gx);
        t.accumulate(gain, gg);
        t.accumulate(bias, gb);
      });
}

Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double a = 0.044715;
  Tensor value = x.value();
  for (auto& e : value.data()) {
    const double u = c * (e + a * e * e * e);
    e = 0.5 * e * (1.0 + std::tanh(u));
  }
  return x.tape->record("gelu", std::move(value), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double e = xv[i];
      const double th = std::tanh(c * (e + a * e * e * e));
      const double du = c * (1.0 + 3.0 * a * e * e);
      gx[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * e * (1.0 - th * th) * du);
    }
    t.accumulate(x, gx);
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double e : x.value().data()) s += e;
  return x.tape->record("sum", Tensor({1}, {s}), {x}, [x](Tape& t, const Tensor& g) {
    Tensor gx(t.value(x).shape());
    for (auto& e : gx.data()) e = g[0];
    t.accumulate(x, gx);
  });
}

Var sum_squares(Var x) {
  double s = 0.0;
  for (double e : x.value().data()) s += e * e;
  return x.tape->record("sum_squares", Tensor({1}, {s}), {x}, [x](Tape& t, const Tensor& g) {
    Tensor gx = t.value(x);
    for (auto& e : gx.data()) e *= 2.0 * g[0];
    t.accumulate(x, gx);
  });
}

Var weighted_sum(Var x, const Tensor& weights) {
  if (weights.shape() != x.value().shape()) {
    throw DimensionError("weighted_sum: weights " + shape_string(weights.shape()) + " vs input " +
                         shape_string(x.value().shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.value()[i];
  return x.tape->record("weighted_sum", Tensor({1}, {s}), {x},
                        [x, weights](Tape& t, const Tensor& g) {
                          Tensor gx = weights;
                          for (auto& e : gx.data()) e *= g[0];
                          t.accumulate(x, gx);
                        });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets,
                  std::span<const std::uint8_t> mask) {
  const Tensor& z = logits.value();
  require_matrix(z, "cross_entropy");
  const std::size_t n = z.dim(0), vocab = z.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: targets/mask length differs from logits rows");
  }
  std::size_t counted = 0;
  for (auto m : mask) counted += m != 0;
  if (counted == 0) throw DegenerateRowError("cross_entropy: every position is masked");
  Tensor probs({n, vocab});
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= vocab) throw DimensionError("cross_entropy: target id out of vocabulary");
    double mx = -kInf;
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, z(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(z(i, j) - mx);
    for (std::size_t j = 0; j < vocab; ++j) probs(i, j) = std::exp(z(i, j) - mx) / denom;
    if (mask[i]) total += mx + std::log(denom) - z(i, targets[i]);
  }
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  return logits.tape->record(
      "cross_entropy", Tensor({1}, {total * inv}), {logits},
      [logits, probs, tgt, msk, inv, n, vocab](Tape& t, const Tensor& g) {
        Tensor gz({n, vocab});
        for (std::size_t i = 0; i < n; ++i) {
          if (!msk[i]) continue;
          for (std::size_t j = 0; j < vocab; ++j) gz(i, j) = probs(i, j) * inv * g[0];
          gz(i, tgt[i]) -= inv * g[0];
        }
        t.accumulate(logits, gz);
      });
}

namespace {

struct HeadLayout {
  std::size_t n = 0;
  std::size_t heads = 0;
  std::size_t d = 0;
};

HeadLayout check_attention_inputs(Var q, Var k, Var v, std::size_t num_heads, const char* op) {
  require_same_tape(q, k, op);
  require_same_tape(q, v, op);
  const Tensor& qv = q.value();
  require_matrix(qv, op);
  if (k.value().shape() != qv.shape() || v.value().shape() != qv.shape()) {
    throw DimensionError(std::string(op) + ": q, k, v shapes differ");
  }
  if (num_heads == 0 || qv.dim(1) % num_heads != 0) {
    throw DimensionError(std::string(op) + ": width " + std::to_string(qv.dim(1)) +
                         " not divisible into " + std::to_string(num_heads) + " heads");
  }
  if (qv.dim(0) == 0) throw DimensionError(std::string(op) + ": empty input");
  return {qv.dim(0), num_heads, qv.dim(1) / num_heads};
}

double head_dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j, std::size_t col,
                std::size_t d) {
  double s = 0.0;
  for (std::size_t c = 0; c < d; ++c) s += a(i, col + c) * b(j, col + c);
  return s;
}

}  // namespace

Var masked_attention(Var q, Var k, Var v, std::size_t num_heads, const KeyMask& visible,
                     bool scale) {
  const HeadLayout L = check_attention_inputs(q, k, v, num_heads, "masked_attention");
  const double s = softmax_scale(scale, L.d);
  const Tensor &qv = q.value(), &kv = k.value(), &vv = v.value();
  // probs[h] is [N, N] with exact zeros off the mask.
  std::vector<Tensor> probs(L.heads, Tensor({L.n, L.n}));
  Tensor out({L.n, L.heads * L.d});
  for (std::size_t h = 0; h < L.heads; ++h) {
    const std::size_t col = h * L.d;
    Tensor& P = probs[h];
    for (std::size_t i = 0; i < L.n; ++i) {
      double mx = -kInf;
      for (std::size_t j = 0; j < L.n; ++j) {
        if (!visible(h, i, j)) continue;
        P(i, j) = s * head_dot(qv, i, kv, j, col, L.d);
        mx = std::max(mx, P(i, j));
      }
      if (mx == -kInf) {
        throw DegenerateRowError("masked_attention: query " + std::to_string(i) +
                                 " sees no key in head " + std::to_string(h));
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < L.n; ++j) {
        if (!visible(h, i, j)) continue;
        P(i, j) = std::exp(P(i, j) - mx);
        denom += P(i, j);
      }
      for (std::size_t j = 0; j < L.n; ++j) P(i, j) = visible(h, i, j) ? P(i, j) / denom : 0.0;
      for (std::size_t j = 0; j < L.n; ++j) {
        if (P(i, j) == 0.0) continue;
        for (std::size_t c = 0; c < L.d; ++c) out(i, col + c) += P(i, j) * vv(j, col + c);
      }
    }
  }
  return q.tape->record(
      "masked_attention", std::move(out), {q, k, v},
      [q, k, v, probs, L, s](Tape& t, const Tensor& g) {
        const Tensor &qv = t.value(q), &kv = t.value(k), &vv = t.value(v);
        Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
        std::vector<double> dp(L.n);
        for (std::size_t h = 0; h < L.heads; ++h) {
          const std::size_t col = h * L.d;
          const Tensor& P = probs[h];
          for (std::size_t i = 0; i < L.n; ++i) {
            double row_dot = 0.0;
            for (std::size_t j = 0; j < L.n; ++j) {
              dp[j] = head_dot(g, i, vv, j, col, L.d);
              row_dot += P(i, j) * dp[j];
            }
            for (std::size_t j = 0; j < L.n; ++j) {
              if (P(i, j) == 0.0) continue;
              const double ds = P(i, j) * (dp[j] - row_dot);
              for (std::size_t c = 0; c < L.d; ++c) {
                gv(j, col + c) += P(i, j) * g(i, col + c);
                gq(i, col + c) += s * ds * kv(j, col + c);
                gk(j, col + c) += s * ds * qv(i, col + c);
              }
            }
          }
        }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
        t.accumulate(v, gv);
      });
}

Var causal_attention(Var q, Var k, Var v, std::size_t num_heads, bool scale) {
  return masked_attention(
      q, k, v, num_heads, [](std::size_t, std::size_t i, std::size_t j) { return j <= i; }, scale);
}

Var moba_attention(Var q, Var k, Var v, const RoutingTable& routing, bool scale) {
  const HeadLayout L = check_attention_inputs(q, k, v, routing.num_heads(), "moba_attention");
  if (routing.context_length() != L.n) {
    throw RoutingError("moba_attention: routing covers " +
                       std::to_string(routing.context_length()) + " positions, input has " +
                       std::to_string(L.n));
  }
  const double s = softmax_scale(scale, L.d);
  const Tensor &qv = q.value(), &kv = k.value(), &vv = v.value();

  // Key spans [first, last) per (i, h): selected blocks, current one cut at i.
  // Reads the partition from `table` so the backward closure holds no
  // reference into the caller's routing.
  auto key_spans = [](const RoutingTable& table, std::size_t i, std::size_t h) {
    const BlockPartition& partition = table.partition();
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    const std::size_t pos = i + 1, current = partition.block_of(pos);
    for (auto b : table.row(pos, h).selected) {
      const BlockRange& r = partition.range(b);
      spans.emplace_back(r.begin0(), b == current ? pos : r.end0());
    }
    return spans;
  };

  Tensor out({L.n, L.heads * L.d});
  Tensor lse({L.n, L.heads});
  std::vector<double> acc(L.d);
  for (std::size_t h = 0; h < L.heads; ++h) {
    const std::size_t col = h * L.d;
    for (std::size_t i = 0; i < L.n; ++i) {
      // Running online-softmax state across blocks.
      double m = -kInf, l = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (auto [first, last] : key_spans(routing, i, h)) {
        double bm = -kInf;
        for (std::size_t j = first; j < last; ++j)
          bm = std::max(bm, s * head_dot(qv, i, kv, j, col, L.d));
        const double m_new = std::max(m, bm);
        const double carry = m == -kInf ? 0.0 : std::exp(m - m_new);
        l *= carry;
        for (auto& a : acc) a *= carry;
        for (std::size_t j = first; j < last; ++j) {
          const double w = std::exp(s * head_dot(qv, i, kv, j, col, L.d) - m_new);
          l += w;
          for (std::size_t c = 0; c < L.d; ++c) acc[c] += w * vv(j, col + c);
        }
        m = m_new;
      }
      if (!(l > 0)) throw PipelineError("moba_attention: query gathered no keys");
      for (std::size_t c = 0; c < L.d; ++c) out(i, col + c) = acc[c] / l;
      lse(i, h) = m + std::log(l);
    }
  }
  const RoutingTable frozen = routing;
  Tensor saved_out = out;
  return q.tape->record(
      "moba_attention", std::move(out), {q, k, v},
      [q, k, v, frozen, saved_out, lse, L, s, key_spans](Tape& t, const Tensor& g) {
        const Tensor &qv = t.value(q), &kv = t.value(k), &vv = t.value(v);
        Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
        for (std::size_t h = 0; h < L.heads; ++h) {
          const std::size_t col = h * L.d;
          for (std::size_t i = 0; i < L.n; ++i) {
            // D_i = dO_i . O_i replaces sum_j P_ij dP_ij.
            const double delta = head_dot(g, i, saved_out, i, col, L.d);
            for (auto [first, last] : key_spans(frozen, i, h)) {
              for (std::size_t j = first; j < last; ++j) {
                const double p = std::exp(s * head_dot(qv, i, kv, j, col, L.d) - lse(i, h));
                const double dp = head_dot(g, i, vv, j, col, L.d);
                const double ds = p * (dp - delta);
                for (std::size_t c = 0; c < L.d; ++c) {
                  gv(j, col + c) += p * g(i, col + c);
                  gq(i, col + c) += s * ds * kv(j, col + c);
                  gk(j, col + c) += s * ds * qv(i, col + c);
                }
              }
            }
          }
        }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
        t.accumulate(v, gv);
      });
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double eps) {
  if (!(eps > 0)) throw ParameterError("finite_difference_gradient: eps must be > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = f(probe);
    probe[i] = x[i] - eps;
    const double down = f(probe);
    probe[i] = x[i];
    if (std::isnan(up) || std::isnan(down)) {
      std::ostringstream msg;
      msg << "finite_difference_gradient: f returned NaN at coordinate " << i;
      throw OracleError(msg.str());
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace moba::ad
