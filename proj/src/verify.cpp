#include "moba/verify.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "moba/attention.hpp"
#include "moba/autodiff.hpp"
#include "moba/errors.hpp"
#include "moba/gating.hpp"
#include "moba/harness.hpp"
#include "moba/metrics.hpp"
#include "moba/model.hpp"
#include "moba/oracles.hpp"

namespace moba {

namespace {

constexpr std::array<Suite, 11> kSuites{
    Suite::saturation, Suite::pipeline_oracle, Suite::online_softmax, Suite::causality,
    Suite::gating,     Suite::sparsity,        Suite::gradients,      Suite::power_law,
    Suite::flops,      Suite::training,        Suite::metrics,
};

constexpr std::array<const char*, 11> kNames{
    "saturation", "pipeline-oracle", "online-softmax", "causality", "gating",  "sparsity",
    "gradients",  "power-law",       "flops",          "training",  "metrics",
};

// Running worst error plus the first failure message.
struct Tracker {
  double worst = 0.0;
  double tolerance;
  bool ok = true;
  std::string first_failure;

  explicit Tracker(double tol) : tolerance(tol) {}

  void error(double e, const std::string& where) {
    worst = std::max(worst, e);
    if (!(e <= tolerance)) fail(where + ": error " + format(e));
  }
  void check(bool condition, const std::string& where) {
    if (!condition) fail(where);
  }
  void fail(const std::string& why) {
    if (ok) first_failure = why;
    ok = false;
  }
  static std::string format(double e) {
    std::ostringstream s;
    s.precision(3);
    s << e;
    return s.str();
  }
};

Tensor random_tensor(SplitMix64& rng, const Shape& shape) {
  return seeded_random<double>(shape, rng.next());
}

std::string instance(std::size_t i, std::size_t n, std::size_t h, std::size_t d) {
  return "instance " + std::to_string(i) + " (N=" + std::to_string(n) + ", h=" +
         std::to_string(h) + ", d=" + std::to_string(d) + ")";
}

SuiteResult saturation(SplitMix64& rng) {
  Tracker t(1e-10);
  const std::size_t count = 50;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = rng.uniform_index(1, 256), h = rng.uniform_index(1, 4),
                      d = rng.uniform_index(1, 16), b = rng.uniform_index(1, n);
    const std::size_t blocks = (n + b - 1) / b;
    const std::size_t k = blocks + rng.uniform_index(0, 2);
    const Tensor q = random_tensor(rng, {n, h, d}), kk = random_tensor(rng, {n, h, d}),
                 v = random_tensor(rng, {n, h, d});
    const Tensor dense = dense_attention(q, kk, v, true);
    const Tensor pipeline = attention(q, kk, v, AttentionConfig::moba(h, d, b, k));
    const Tensor gathered =
        moba_attention_oracle(q, kk, v, route_moba(q, kk, make_partition(n, b), k));
    t.error(max_abs_diff(pipeline, dense), instance(i, n, h, d) + " pipeline vs dense");
    t.error(max_abs_diff(gathered, dense), instance(i, n, h, d) + " gather vs dense");
  }
  return {"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
}

SuiteResult pipeline_oracle(SplitMix64& rng) {
  Tracker t(1e-10);
  const std::size_t count = 100;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = rng.uniform_index(1, 256), h = rng.uniform_index(1, 4),
                      d = rng.uniform_index(1, 16), b = rng.uniform_index(1, n);
    const std::size_t blocks = (n + b - 1) / b;
    const std::size_t k = rng.uniform_index(1, blocks + 1);
    const Tensor q = random_tensor(rng, {n, h, d}), kk = random_tensor(rng, {n, h, d}),
                 v = random_tensor(rng, {n, h, d});
    PipelineStats stats;
    const Tensor pipeline =
        moba_attention_pipeline(q, kk, v, AttentionConfig::moba(h, d, b, k), &stats);
    const RoutingTable routing = route_moba(q, kk, make_partition(n, b), k);
    const Tensor reference = moba_attention_oracle(q, kk, v, routing);
    t.error(max_abs_diff(pipeline, reference), instance(i, n, h, d) + " B=" + std::to_string(b) +
                                                   " k=" + std::to_string(k));
    for (std::size_t r = 0; r < routing.rows().size(); ++r) {
      if (stats.selected_blocks[r] != routing.rows()[r].selected) {
        t.fail(instance(i, n, h, d) + ": pipeline gate differs from route_moba");
        break;
      }
    }
  }
  return {"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
}

SuiteResult online_softmax(SplitMix64& rng) {
  Tracker t(1e-12);
  const std::size_t count = 1000, dv = 3;
  const std::array<double, 3> spreads{1.0, 10.0, 50.0};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = rng.uniform_index(5, 64), num_parts = rng.uniform_index(2, 5);
    const double spread = spreads[rng.uniform_index(0, spreads.size() - 1)];
    std::vector<double> logits(len);
    for (auto& x : logits) x = spread * rng.normal();
    const Tensor values = random_tensor(rng, {len, dv});

    std::vector<std::size_t> cuts(len - 1);
    std::iota(cuts.begin(), cuts.end(), std::size_t{1});
    for (std::size_t j = 0; j + 1 < num_parts; ++j) {
      std::swap(cuts[j], cuts[rng.uniform_index(j, cuts.size() - 1)]);
    }
    cuts.resize(num_parts - 1);
    std::sort(cuts.begin(), cuts.end());
    cuts.insert(cuts.begin(), 0);
    cuts.push_back(len);

    // A unit query against one-dimensional keys makes each logit a key.
    const Tensor query({1, 1}, {1.0});
    std::vector<PartialAttention> parts;
    for (std::size_t j = 0; j + 1 < cuts.size(); ++j) {
      const std::size_t m = cuts[j + 1] - cuts[j];
      Tensor keys({m, 1}), vals({m, dv});
      for (std::size_t r = 0; r < m; ++r) {
        keys(r, 0) = logits[cuts[j] + r];
        for (std::size_t c = 0; c < dv; ++c) vals(r, c) = values(cuts[j] + r, c);
      }
      parts.push_back(partial_attention(query, keys, vals, 1.0));
    }
    const std::vector<double> expected = oracle::softmax_weighted_sum(logits, values);
    auto gap = [&](const Tensor& out) {
      double e = 0.0;
      for (std::size_t c = 0; c < dv; ++c) e = std::max(e, std::abs(out(0, c) - expected[c]));
      return e;
    };
    const std::string where = "vector " + std::to_string(i);
    t.error(gap(online_softmax_combine(parts)), where + " combine");

    PartialAttention left = parts.front();
    for (std::size_t j = 1; j < parts.size(); ++j) left = merge_partials(left, parts[j]);
    PartialAttention right = parts.back();
    for (std::size_t j = parts.size() - 1; j-- > 0;) right = merge_partials(parts[j], right);
    t.error(gap(online_softmax_combine(std::span(&left, 1))), where + " left fold");
    t.error(gap(online_softmax_combine(std::span(&right, 1))), where + " right fold");

    std::vector<PartialAttention> shuffled = parts;
    for (std::size_t j = shuffled.size(); j > 1; --j) {
      std::swap(shuffled[j - 1], shuffled[rng.uniform_index(0, j - 1)]);
    }
    t.error(gap(online_softmax_combine(shuffled)), where + " permuted");
  }
  return {"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
}

SuiteResult causality(SplitMix64& rng) {
  Tracker t(0.0);
  const std::size_t count = 100;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t n = rng.uniform_index(2, 128), h = rng.uniform_index(1, 3),
                      d = rng.uniform_index(1, 8), b = rng.uniform_index(1, n);
    const std::size_t k = rng.uniform_index(1, (n + b - 1) / b);
    const std::size_t keep = rng.uniform_index(1, n - 1);
    const Tensor q = random_tensor(rng, {n, h, d});
    const Tensor k1 = random_tensor(rng, {n, h, d}), v1 = random_tensor(rng, {n, h, d});
    Tensor k2 = k1, v2 = v1;
    const Tensor noise_k = random_tensor(rng, {n, h, d}), noise_v = random_tensor(rng, {n, h, d});
    for (std::size_t j = keep * h * d; j < n * h * d; ++j) {
      k2[j] = 3.0 * noise_k[j];
      v2[j] = 3.0 * noise_v[j];
    }
    const BlockPartition partition = make_partition(n, b);
    const AttentionConfig config = AttentionConfig::moba(h, d, b, k);
    auto prefix_gap = [&](const Tensor& a, const Tensor& c) {
      double e = 0.0;
      for (std::size_t j = 0; j < keep * h * d; ++j) e = std::max(e, std::abs(a[j] - c[j]));
      return e;
    };
    const std::string where = instance(i, n, h, d) + " prefix " + std::to_string(keep);
    t.error(prefix_gap(dense_attention(q, k1, v1, true), dense_attention(q, k2, v2, true)),
            where + " dense");
    t.error(prefix_gap(moba_attention_oracle(q, k1, v1, route_moba(q, k1, partition, k)),
                       moba_attention_oracle(q, k2, v2, route_moba(q, k2, partition, k))),
            where + " gather");
    t.error(prefix_gap(moba_attention_pipeline(q, k1, v1, config),
                       moba_attention_pipeline(q, k2, v2, config)),
            where + " pipeline");
  }
  return {"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
}

SuiteResult gating(SplitMix64& rng) {
  Tracker t(1e-10);
  const std::size_t n = 64, b = 8, h = 2, d = 4;
  const BlockPartition partition = make_partition(n, b);
  std::size_t instances = 0;
  for (std::size_t dataset = 0; dataset < 20; ++dataset) {
    Tensor q = random_tensor(rng, {n, h, d}), kk = random_tensor(rng, {n, h, d});
    if (dataset % 2 == 1) {
      // Small integers make pooled scores exact, so ties occur and must
      // resolve toward lower block indices.
      for (auto& x : q.data()) x = static_cast<double>(rng.uniform_index(0, 4)) - 2.0;
      for (auto& x : kk.data()) x = static_cast<double>(rng.uniform_index(0, 2)) - 1.0;
    }
    for (std::size_t k = 1; k <= 3; ++k) {
      const RoutingTable routing = route_moba(q, kk, partition, k);
      for (std::size_t head = 0; head < h; ++head) {
        const Tensor pooled = oracle::mean_pool(kk, head, b);
        for (std::size_t p = 1; p <= n; ++p) {
          ++instances;
          const RoutingRow& row = routing.row(p, head);
          const std::size_t current = (p - 1) / b + 1;
          const std::string where = "dataset " + std::to_string(dataset) + " k=" +
                                    std::to_string(k) + " pos=" + std::to_string(p) +
                                    " head=" + std::to_string(head);
          try {
            validate_row(row, partition);
          } catch (const RoutingError& e) {
            t.fail(where + ": " + e.what());
          }
          t.check(std::find(row.selected.begin(), row.selected.end(), current) != row.selected.end(),
                  where + ": current block missing");
          t.check(row.selected.back() <= current, where + ": future block selected");
          t.check(row.selected.size() == std::min(k, current), where + ": wrong selection size");
          std::vector<double> scores(current - 1);
          for (std::size_t blk = 0; blk + 1 < current; ++blk) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q(p - 1, head, c) * pooled(blk, c);
            scores[blk] = s;
          }
          t.check(row.selected == oracle::brute_force_gate(scores, current, k),
                  where + ": selection differs from brute force");
        }
      }
    }
  }
  // Sliding-window and sink patterns against explicitly masked attention.
  for (std::size_t i = 0; i < 40; ++i) {
    const std::size_t nn = rng.uniform_index(1, 128), hh = rng.uniform_index(1, 3),
                      dd = rng.uniform_index(1, 8), bb = rng.uniform_index(1, nn);
    const Tensor q = random_tensor(rng, {nn, hh, dd}), kk = random_tensor(rng, {nn, hh, dd}),
                 v = random_tensor(rng, {nn, hh, dd});
    const double scale = 1.0 / std::sqrt(static_cast<double>(dd));
    const std::size_t blocks = (nn + bb - 1) / bb;
    if (i % 2 == 0) {
      const std::size_t w = rng.uniform_index(1, blocks);
      const Tensor expected = oracle::attention(
          q, kk, v,
          [&](std::size_t, std::size_t qi, std::size_t kj) {
            return kj <= qi && kj / bb + w > qi / bb;
          },
          scale);
      t.error(max_abs_diff(attention(q, kk, v, AttentionConfig::swa(hh, dd, bb, w)), expected),
              instance(i, nn, hh, dd) + " swa");
    } else {
      const std::size_t s = rng.uniform_index(1, blocks), r = rng.uniform_index(1, blocks);
      const Tensor expected = oracle::attention(
          q, kk, v,
          [&](std::size_t, std::size_t qi, std::size_t kj) {
            return kj <= qi && (kj / bb < s || kj / bb + r > qi / bb);
          },
          scale);
      t.error(max_abs_diff(attention(q, kk, v, AttentionConfig::sink(hh, dd, bb, s, r)), expected),
              instance(i, nn, hh, dd) + " sink");
    }
    ++instances;
  }
  return {"", t.ok, t.worst, t.tolerance, instances, 0.0, t.first_failure};
}

SuiteResult sparsity(SplitMix64&) {
  Tracker t(0.0);
  struct Case {
    std::uint64_t n, b, k, num, den;
  };
  const std::array<Case, 4> cases{{
      {8192, 512, 3, 13, 16},
      {32768, 512, 3, 61, 64},
      {1048576, 4096, 12, 61, 64},
      {131072, 4096, 12, 5, 8},
  }};
  for (const Case& c : cases) {
    const Fraction f = sparsity_ratio(c.n, c.b, c.k);
    t.check(f == Fraction{c.num, c.den},
            "sparsity(" + std::to_string(c.n) + ", " + std::to_string(c.b) + ", " +
                std::to_string(c.k) + ") = " + std::to_string(f.num) + "/" + std::to_string(f.den));
  }
  return {"", t.ok, 0.0, 0.0, cases.size(), 0.0, t.first_failure};
}

double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    norm += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-6);
}

bool routing_stable(const Tensor& q, const Tensor& k, const BlockPartition& partition,
                    std::size_t top_k, const RoutingTable& base, double eps) {
  for (const Tensor* x : {&q, &k}) {
    for (std::size_t j = 0; j < x->size(); ++j) {
      for (double sign : {-1.0, 1.0}) {
        Tensor qq = q, kk = k;
        Tensor& target = x == &q ? qq : kk;
        target[j] += sign * eps;
        const RoutingTable moved = route_moba(qq, kk, partition, top_k);
        for (std::size_t r = 0; r < base.rows().size(); ++r)
          if (moved.rows()[r].selected != base.rows()[r].selected) return false;
      }
    }
  }
  return true;
}

SuiteResult gradients(SplitMix64& rng) {
  Tracker t(1e-4);
  const double eps = 1e-5;
  const std::size_t count = 20;
  std::size_t resampled = 0, zero_checked = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t n, h, d, b, k;
    Tensor q, kk, v;
    RoutingTable routing;
    BlockPartition partition(1, 1);
    while (true) {
      n = rng.uniform_index(4, 16), h = rng.uniform_index(1, 2), d = rng.uniform_index(1, 4);
      b = rng.uniform_index(2, 4), k = rng.uniform_index(1, 3);
      partition = make_partition(n, b);
      q = random_tensor(rng, {n, h, d}), kk = random_tensor(rng, {n, h, d}),
      v = random_tensor(rng, {n, h, d});
      routing = route_moba(q, kk, partition, k);
      if (routing_stable(q, kk, partition, k, routing, eps)) break;
      ++resampled;
    }
    const Shape flat{n, h * d};
    const Tensor weights = random_tensor(rng, flat);
    const std::string where = instance(i, n, h, d) + " B=" + std::to_string(b) +
                              " k=" + std::to_string(k);

    for (bool use_moba : {false, true}) {
      auto loss = [&](const Tensor& qx, const Tensor& kx, const Tensor& vx, const Tensor& w,
                      std::array<Tensor, 3>* grads) {
        ad::Tape tape;
        ad::Var vq = tape.leaf(qx.reshaped(flat)), vk = tape.leaf(kx.reshaped(flat)),
                vv = tape.leaf(vx.reshaped(flat));
        ad::Var out = use_moba ? ad::moba_attention(vq, vk, vv, routing)
                               : ad::causal_attention(vq, vk, vv, h);
        ad::Var l = ad::weighted_sum(out, w);
        if (grads) {
          tape.backward(l);
          *grads = {vq.grad().reshaped({n, h, d}), vk.grad().reshaped({n, h, d}),
                    vv.grad().reshaped({n, h, d})};
        }
        return l.value()[0];
      };
      std::array<Tensor, 3> analytic;
      loss(q, kk, v, weights, &analytic);
      const std::array<Tensor, 3> numeric{
          ad::finite_difference_gradient([&](const Tensor& x) { return loss(x, kk, v, weights, nullptr); }, q, eps),
          ad::finite_difference_gradient([&](const Tensor& x) { return loss(q, x, v, weights, nullptr); }, kk, eps),
          ad::finite_difference_gradient([&](const Tensor& x) { return loss(q, kk, x, weights, nullptr); }, v, eps),
      };
      const char* names[] = {"dQ", "dK", "dV"};
      for (std::size_t g = 0; g < 3; ++g) {
        t.error(relative_error(analytic[g], numeric[g]),
                where + (use_moba ? " moba " : " dense ") + names[g]);
      }
    }

    // Loss on the last block only: blocks none of its rows select get no
    // gradient in K or V.
    const std::size_t first_row = partition.range(partition.num_blocks()).begin0();
    Tensor last_weights(flat);
    for (std::size_t r = first_row; r < n; ++r)
      for (std::size_t c = 0; c < h * d; ++c) last_weights(r, c) = weights(r, c);
    ad::Tape tape;
    ad::Var vq = tape.leaf(q.reshaped(flat)), vk = tape.leaf(kk.reshaped(flat)),
            vv = tape.leaf(v.reshaped(flat));
    tape.backward(ad::weighted_sum(ad::moba_attention(vq, vk, vv, routing), last_weights));
    for (std::size_t head = 0; head < h; ++head) {
      std::vector<bool> used(partition.num_blocks(), false);
      for (std::size_t r = first_row; r < n; ++r)
        for (std::size_t blk : routing.row(r + 1, head).selected) used[blk - 1] = true;
      for (std::size_t blk = 1; blk <= partition.num_blocks(); ++blk) {
        if (used[blk - 1]) continue;
        const BlockRange range = partition.range(blk);
        for (std::size_t r = range.begin0(); r < range.end0(); ++r) {
          for (std::size_t c = head * d; c < (head + 1) * d; ++c) {
            ++zero_checked;
            t.check(vk.grad()(r, c) == 0.0 && vv.grad()(r, c) == 0.0,
                    where + ": unselected block " + std::to_string(blk) + " has a gradient");
          }
        }
      }
    }
  }
  t.check(zero_checked > 0, "no instance had an unselected block");
  SuiteResult r{"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
  if (r.passed) {
    r.detail = std::to_string(zero_checked) + " unselected K/V entries exactly zero, " +
               std::to_string(resampled) + " routing-unstable draws resampled";
  }
  return r;
}

SuiteResult power_law(SplitMix64& rng) {
  Tracker t(1e-9);
  const std::size_t seeds = 200;
  double worst_rate = 1.0;
  std::size_t instances = 0;
  for (const ReferenceCurve& curve : reference_curves()) {
    std::vector<std::pair<double, double>> exact;
    for (double c : {0.25, 0.5, 1.0, 2.0, 4.0}) exact.emplace_back(c, curve.a * std::pow(c, curve.b));
    const PowerLawFit fit = fit_power_law(exact);
    t.error(std::abs(fit.a - curve.a), curve.label + " a");
    t.error(std::abs(fit.b - curve.b), curve.label + " b");
    t.check(fit.residual <= 1e-12, curve.label + " noiseless residual " + Tracker::format(fit.residual));

    std::size_t within = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      std::vector<std::pair<double, double>> noisy;
      for (std::size_t j = 0; j < 8; ++j) {
        const double c = 0.1 * std::pow(100.0, static_cast<double>(j) / 7.0);
        noisy.emplace_back(c, curve.a * std::pow(c, curve.b) * std::exp(0.01 * rng.normal()));
      }
      if (std::abs(fit_power_law(noisy).b - curve.b) <= 0.01) ++within;
      ++instances;
    }
    const double rate = static_cast<double>(within) / seeds;
    worst_rate = std::min(worst_rate, rate);
    t.check(rate >= 0.95, curve.label + " noisy recovery rate " + Tracker::format(rate));
  }
  SuiteResult r{"", t.ok, t.worst, t.tolerance, instances, 0.0, t.first_failure};
  if (r.passed) r.detail = "worst noisy recovery rate " + Tracker::format(worst_rate);
  return r;
}

SuiteResult flops(SplitMix64& rng) {
  Tracker t(0.02);
  const std::size_t b = 512, k = 3, d = 64, h = 1;
  const AttentionConfig config = AttentionConfig::moba(h, d, b, k);
  std::size_t instances = 0;
  double worst_step = 1.0;
  std::optional<FlopReport> prev;
  for (std::size_t n = 4096; n <= 262144; n *= 2, ++instances) {
    const FlopReport r = flop_report(config, n);
    if (prev) {
      const double step = (static_cast<double>(r.moba_flops) / n) /
                          (static_cast<double>(prev->moba_flops) / prev->context_length);
      worst_step = std::max(worst_step, step);
      t.check(step <= 1.1 && step >= 1.0 / 1.1,
              "per-token cost N=" + std::to_string(n) + " changed by " + Tracker::format(step));
      const double dense_growth =
          static_cast<double>(r.dense_flops) / static_cast<double>(prev->dense_flops);
      t.check(std::abs(dense_growth - 4.0) < 0.01,
              "dense growth at N=" + std::to_string(n) + " is " + Tracker::format(dense_growth));
    }
    prev = r;
  }
  const FlopReport saturated = flop_report(config, 64 * b * k);
  t.error(std::abs(saturated.ratio - saturated.theoretical_ratio), "ratio at N = 64 B k");

  // Hand tally on a small random instance.
  const std::size_t n = 64, sb = 8, sk = 2, sd = 4;
  const Tensor q = random_tensor(rng, {n, 1, sd}), kk = random_tensor(rng, {n, 1, sd}),
               v = random_tensor(rng, {n, 1, sd});
  const AttentionConfig small = AttentionConfig::moba(1, sd, sb, sk);
  const RoutingTable routing = route_moba(q, kk, make_partition(n, sb), sk);
  const FlopReport counted = flop_report(small, routing);
  const FlopReport structural = flop_report(small, n);
  std::uint64_t dense = 0;
  for (std::size_t p = 1; p <= n; ++p) dense += 4 * p * sd;
  PipelineStats stats;
  moba_attention_pipeline(q, kk, v, small, &stats);
  const std::uint64_t pipeline_keys =
      std::accumulate(stats.gathered_keys.begin(), stats.gathered_keys.end(), std::uint64_t{0});
  const std::uint64_t tally = oracle::gathered_keys(routing);
  t.check(counted.attention_flops == 4 * sd * tally, "routing count differs from tally");
  t.check(structural.attention_flops == counted.attention_flops, "structural count differs");
  t.check(pipeline_keys == tally, "pipeline gathered a different number of keys");
  t.check(counted.dense_flops == dense, "dense count differs from tally");
  t.check(counted.gating_flops == n * (n / sb) * sd, "gating count differs from N n d h");

  SuiteResult r{"", t.ok, t.worst, t.tolerance, instances + 1, 0.0, t.first_failure};
  if (r.passed) r.detail = "largest per-token growth " + Tracker::format(worst_step);
  return r;
}

SuiteResult training(SplitMix64& rng) {
  Tracker t(1e-8);
  const std::uint64_t seed = rng.next();
  const std::vector<std::size_t> corpus = synthetic_corpus(512, seed);
  auto stack = [](LayerMode mode, std::size_t top_k) {
    LayerStackConfig c = LayerStackConfig::all(2, mode);
    c.max_context = 32;
    c.block_size = 8;
    c.top_k = top_k;
    return c;
  };
  TrainSchedule schedule;
  schedule.seq_len = 32;
  schedule.seed = seed;
  std::ostringstream detail;
  detail.precision(4);

  // (a) full attention learns the cyclic corpus.
  schedule.total_steps = 300;
  const TrainResult full = train_run(corpus, stack(LayerMode::full, 4), schedule);
  double tail = 0.0;
  for (std::size_t i = 290; i < 300; ++i) tail += full.records[i].loss / 10.0;
  const double initial = full.records.front().loss;
  t.check(tail < 0.5 * initial, "full attention ended at " + Tracker::format(tail) +
                                    " from initial " + Tracker::format(initial));
  detail << "full " << initial << " -> " << tail;

  // (b) saturated MoBA then full tracks the all-full run.
  schedule.switch_fraction = 0.9;
  const TrainResult hybrid = train_run(corpus, stack(LayerMode::moba, 4), schedule);
  t.check(hybrid.switch_step == 270, "saturated hybrid switched at an unexpected step");
  for (std::size_t i = 0; i < schedule.total_steps; ++i) {
    t.error(std::abs(hybrid.records[i].loss - full.records[i].loss),
            "saturated hybrid step " + std::to_string(i));
  }
  detail << "; saturated gap " << t.worst;

  // (c) sub-saturated MoBA then full stays finite and does not blow up.
  try {
    const TrainResult sparse = train_run(corpus, stack(LayerMode::moba, 2), schedule);
    const std::size_t sw = *sparse.switch_step;
    // Equal-length windows on both sides of the switch.
    const std::size_t span = schedule.total_steps - sw;
    double pre = 0.0, post = 0.0;
    for (std::size_t i = 0; i < span; ++i) {
      pre += sparse.records[sw - span + i].loss / static_cast<double>(span);
      post += sparse.records[sw + i].loss / static_cast<double>(span);
    }
    t.check(std::isfinite(pre) && std::isfinite(post), "sub-saturated run produced NaN");
    t.check(post <= 2.0 * pre, "post-switch loss " + Tracker::format(post) + " vs pre-switch " +
                                   Tracker::format(pre));
    detail << "; sub-saturated pre " << pre << " post " << post;
  } catch (const TrainingDivergedError& e) {
    t.fail(std::string("sub-saturated run diverged: ") + e.what());
  }
  SuiteResult r{"", t.ok, t.worst, t.tolerance, 3, 0.0, t.first_failure};
  if (r.passed) r.detail = detail.str();
  return r;
}

SuiteResult metrics(SplitMix64& rng) {
  Tracker t(1e-12);
  const std::size_t count = 50;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t max_len = rng.uniform_index(1, 64), tail = rng.uniform_index(1, max_len);
    const std::size_t seqs = rng.uniform_index(1, 8);
    std::vector<std::vector<double>> losses;
    std::vector<std::size_t> lengths;
    for (std::size_t s = 0; s < seqs; ++s) {
      const std::size_t len = s == 0 ? max_len : rng.uniform_index(1, max_len);
      std::vector<double> l(len);
      for (auto& x : l) x = 1.0 + rng.uniform() * 5.0;
      losses.push_back(std::move(l));
      lengths.push_back(len);
    }
    const BucketSpec spec{max_len - tail, max_len, max_len};
    const std::string where = "batch " + std::to_string(i);
    const double trailing = trailing_lm_loss(losses, lengths, max_len, tail);
    const PositionwiseLoss buckets = positionwise_lm_loss(losses, lengths, std::span(&spec, 1));
    t.check(buckets.buckets.size() == 1, where + ": bucket omitted");
    if (buckets.buckets.size() == 1) {
      t.error(std::abs(trailing - buckets.buckets[0].mean_loss), where + " trailing vs bucket");
    }

    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < seqs; ++s) {
      if (lengths[s] != max_len) continue;
      for (std::size_t p = max_len - tail; p < max_len; ++p, ++n) total += losses[s][p];
    }
    t.error(std::abs(trailing - total / static_cast<double>(n)), where + " vs filter-and-average");

    // A short sequence with huge losses must not move either result.
    if (max_len > 1) {
      auto polluted_losses = losses;
      auto polluted_lengths = lengths;
      polluted_losses.emplace_back(max_len, 1e6);
      polluted_lengths.push_back(max_len - 1);
      t.error(std::abs(trailing_lm_loss(polluted_losses, polluted_lengths, max_len, tail) - trailing),
              where + " short sequence leaked into trailing loss");
      const PositionwiseLoss polluted =
          positionwise_lm_loss(polluted_losses, polluted_lengths, std::span(&spec, 1));
      t.check(!polluted.buckets.empty() &&
                  polluted.buckets[0].token_count == buckets.buckets[0].token_count,
              where + ": short sequence counted in bucket");
    }
  }
  return {"", t.ok, t.worst, t.tolerance, count, 0.0, t.first_failure};
}

}  // namespace

std::span<const Suite> all_suites() { return kSuites; }

std::string to_string(Suite suite) { return kNames[static_cast<std::size_t>(suite)]; }

Suite parse_suite(const std::string& name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (name == kNames[i]) return kSuites[i];
  throw ConfigError("unknown suite '" + name + "'");
}

SuiteResult run_suite(Suite suite, std::uint64_t seed) {
  SplitMix64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(suite) + 1);
  const auto start = std::chrono::steady_clock::now();
  SuiteResult result;
  try {
    switch (suite) {
      case Suite::saturation: result = saturation(rng); break;
      case Suite::pipeline_oracle: result = pipeline_oracle(rng); break;
      case Suite::online_softmax: result = online_softmax(rng); break;
      case Suite::causality: result = causality(rng); break;
      case Suite::gating: result = gating(rng); break;
      case Suite::sparsity: result = sparsity(rng); break;
      case Suite::gradients: result = gradients(rng); break;
      case Suite::power_law: result = power_law(rng); break;
      case Suite::flops: result = flops(rng); break;
      case Suite::training: result = training(rng); break;
      case Suite::metrics: result = metrics(rng); break;
    }
  } catch (const Error& e) {
    result.passed = false;
    result.detail = std::string("raised: ") + e.what();
  }
  result.name = to_string(suite);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace moba
