#include <cmath>
#include <numeric>

#include "frozen_values.hpp"
#include "moba/attention.hpp"
#include "moba/errors.hpp"
#include "moba/oracles.hpp"
#include "test_util.hpp"

using namespace moba;
using testing::max_gap;
using testing::rnd;

namespace {

struct Qkv {
  Tensor q, k, v;
};

Qkv random_qkv(std::size_t n, std::size_t h, std::size_t d, std::uint64_t seed) {
  return {rnd({n, h, d}, seed), rnd({n, h, d}, seed + 1), rnd({n, h, d}, seed + 2)};
}

}  // namespace

TEST_CASE("dense attention basics") {
  const Qkv x = random_qkv(1, 2, 3, 10);
  CHECK(max_abs_diff(dense_attention(x.q, x.k, x.v, true), x.v) <= 1e-15);

  Tensor k({2, 1, 3}), v = make_matrix({{1, 2, 3}, {5, 6, 7}}).reshaped({2, 1, 3});
  for (std::size_t t = 0; t < 3; ++t) k(0, 0, t) = k(1, 0, t) = 0.3 * static_cast<double>(t);
  const Tensor q = rnd({2, 1, 3}, 4);
  const Tensor out = dense_attention(q, k, v, false);
  for (std::size_t t = 0; t < 3; ++t) CHECK(out(0, 0, t) == doctest::Approx(v(0, 0, t) / 2 + v(1, 0, t) / 2));

  CHECK_THROWS_AS(dense_attention(Tensor({0, 1, 1}), Tensor({0, 1, 1}), Tensor({0, 1, 1}), true),
                  DimensionError);
  CHECK_THROWS_AS(dense_attention(x.q, x.k, rnd({2, 2, 3}, 1), true), DimensionError);
}

TEST_CASE("dense causal attention against frozen reference") {
  const Tensor q = rnd({16, 2, 4}, 41), k = rnd({16, 2, 4}, 42), v = rnd({16, 2, 4}, 43);
  CHECK(max_gap(dense_attention(q, k, v, true), frozen::kDenseCausalN16H2D4) <= 1e-10);
}

TEST_CASE("dense attention against the explicit-loop oracle, both scale settings") {
  for (bool scale : {true, false}) {
    const Qkv x = random_qkv(19, 3, 5, 100);
    const double s = softmax_scale(scale, 5);
    const auto causal = [](std::size_t, std::size_t i, std::size_t j) { return j <= i; };
    const auto full = [](std::size_t, std::size_t, std::size_t) { return true; };
    CHECK(max_abs_diff(dense_attention(x.q, x.k, x.v, true, scale),
                       oracle::attention(x.q, x.k, x.v, causal, s)) <= 1e-10);
    CHECK(max_abs_diff(dense_attention(x.q, x.k, x.v, false, scale),
                       oracle::attention(x.q, x.k, x.v, full, s)) <= 1e-10);
  }
}

TEST_CASE("gather reference") {
  const Qkv x = random_qkv(24, 2, 3, 7);
  for (bool scale : {true, false}) {
    const Tensor dense = dense_attention(x.q, x.k, x.v, true, scale);
    for (std::size_t b : {1, 5, 8, 24}) {
      const BlockPartition p = make_partition(24, b);
      const RoutingTable full = route_moba(x.q, x.k, p, p.num_blocks());
      CHECK(max_abs_diff(moba_attention_oracle(x.q, x.k, x.v, full, scale), dense) <= 1e-10);
    }
  }
  const Tensor q = rnd({8, 1, 4}, 51), k = rnd({8, 1, 4}, 52), v = rnd({8, 1, 4}, 53);
  const RoutingTable routing = route_moba(q, k, make_partition(8, 2), 2);
  CHECK(max_gap(moba_attention_oracle(q, k, v, routing), frozen::kGatherN8B2K2) <= 1e-12);
  CHECK(max_abs_diff(moba_attention_oracle(q, k, v, routing),
                     oracle::moba_attention(q, k, v, 2, 2, 0.5)) <= 1e-12);

  CHECK_THROWS_AS(moba_attention_oracle(x.q, x.k, x.v, routing), RoutingError);
}

TEST_CASE("pipeline equals the gather reference") {
  const Qkv x = random_qkv(32, 2, 4, 20);
  const AttentionConfig config = AttentionConfig::moba(2, 4, 8, 2);
  const Tensor pipeline = moba_attention_pipeline(x.q, x.k, x.v, config);
  const RoutingTable routing = route_moba(x.q, x.k, make_partition(32, 8), 2);
  CHECK(max_abs_diff(pipeline, moba_attention_oracle(x.q, x.k, x.v, routing)) <= 1e-10);
  CHECK(max_abs_diff(pipeline, oracle::moba_attention(x.q, x.k, x.v, 8, 2, 0.5)) <= 1e-10);

  for (std::size_t k = 4; k <= 6; ++k) {
    CHECK(max_abs_diff(moba_attention_pipeline(x.q, x.k, x.v, AttentionConfig::moba(2, 4, 8, k)),
                       dense_attention(x.q, x.k, x.v, true)) <= 1e-10);
  }
}

TEST_CASE("pipeline on ragged partitions and without scaling") {
  SplitMix64 rng(33);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = rng.uniform_index(1, 70), b = rng.uniform_index(1, n),
                      k = rng.uniform_index(1, 5);
    const Qkv x = random_qkv(n, 2, 3, rng.next());
    AttentionConfig config = AttentionConfig::moba(2, 3, b, k);
    config.scale = trial % 2 == 0;
    const RoutingTable routing = route_moba(x.q, x.k, make_partition(n, b), k);
    CHECK(max_abs_diff(moba_attention_pipeline(x.q, x.k, x.v, config),
                       moba_attention_oracle(x.q, x.k, x.v, routing, config.scale)) <= 1e-10);
  }
}

TEST_CASE("late queries gather three blocks of keys at 8192 / 512 / 3") {
  const Qkv x = random_qkv(8192, 1, 2, 3);
  PipelineStats stats;
  moba_attention_pipeline(x.q, x.k, x.v, AttentionConfig::moba(1, 2, 512, 3), &stats);
  for (std::size_t p = 1; p <= 8192; ++p) {
    const std::size_t current = (p - 1) / 512 + 1, offset = (p - 1) % 512 + 1;
    const std::size_t expected = offset + 512 * std::min<std::size_t>(2, current - 1);
    REQUIRE(stats.gathered_keys[p - 1] == expected);
  }
  CHECK(stats.gathered_keys[8191] == 1536);
}

TEST_CASE("pipeline rejects other modes") {
  const Qkv x = random_qkv(8, 1, 2, 1);
  CHECK_THROWS_AS(moba_attention_pipeline(x.q, x.k, x.v, AttentionConfig::dense(1, 2)), ConfigError);
}

TEST_CASE("online softmax combine") {
  const Tensor query({1, 1}, {1.0});
  const Tensor logits = make_matrix({{0.3}, {-1.0}, {2.2}, {0.7}, {-0.4}, {1.1}});
  const Tensor values = rnd({6, 2}, 9);
  const std::vector<double> flat(logits.data().begin(), logits.data().end());
  const std::vector<double> expected = oracle::softmax_weighted_sum(flat, values);

  const PartialAttention whole = partial_attention(query, logits, values, 1.0);
  const Tensor single = online_softmax_combine(std::span(&whole, 1));
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(single(0, c) == doctest::Approx(whole.out(0, c) / whole.normalizer[0]).epsilon(1e-15));
    CHECK(std::abs(single(0, c) - expected[c]) <= 1e-12);
  }

  auto split = [&](const Tensor& lg, double shift) {
    std::vector<PartialAttention> parts;
    for (std::size_t lo : {0, 3}) {
      Tensor k({3, 1}), v({3, 2});
      for (std::size_t r = 0; r < 3; ++r) {
        k(r, 0) = lg(lo + r, 0) + shift;
        v(r, 0) = values(lo + r, 0);
        v(r, 1) = values(lo + r, 1);
      }
      parts.push_back(partial_attention(query, k, v, 1.0));
    }
    return parts;
  };
  const Tensor halves = online_softmax_combine(split(logits, 0.0));
  const Tensor shifted = online_softmax_combine(split(logits, 1000.0));
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(std::abs(halves(0, c) - expected[c]) <= 1e-12);
    CHECK(std::abs(shifted(0, c) - expected[c]) <= 1e-12);
  }

  PartialAttention empty{Tensor({1, 2}), {-std::numeric_limits<double>::infinity()}, {0.0}};
  CHECK_THROWS_AS(online_softmax_combine(std::span(&empty, 1)), DegenerateRowError);
  const auto both = split(logits, 0.0);
  const PartialAttention merged = merge_partials(empty, both[0]);
  CHECK(merged.normalizer[0] == both[0].normalizer[0]);
}

TEST_CASE("causal window in partial attention") {
  const Tensor q = rnd({4, 3}, 1), k = rnd({4, 3}, 2), v = rnd({4, 3}, 3);
  const PartialAttention part = partial_attention(q, k, v, 0.5, CausalWindow{0, 0});
  Tensor scaled_q = q;
  for (auto& x : scaled_q.data()) x *= 0.5;
  const Tensor dense = dense_attention(scaled_q.reshaped({4, 1, 3}), k.reshaped({4, 1, 3}),
                                       v.reshaped({4, 1, 3}), true, false);
  const Tensor combined = online_softmax_combine(std::span(&part, 1));
  CHECK(max_abs_diff(combined, dense.reshaped({4, 3})) <= 1e-12);
}

TEST_CASE("suffix edits never reach earlier outputs") {
  const std::size_t n = 40;
  const Qkv x = random_qkv(n, 2, 3, 61);
  const AttentionConfig config = AttentionConfig::moba(2, 3, 6, 2);
  for (std::size_t keep = 1; keep < n; keep += 3) {
    Tensor k2 = x.k, v2 = x.v;
    for (std::size_t j = keep * 6; j < k2.size(); ++j) {
      k2[j] = -5.0 * k2[j] + 1.0;
      v2[j] += 10.0;
    }
    const Tensor a = moba_attention_pipeline(x.q, x.k, x.v, config);
    const Tensor b = moba_attention_pipeline(x.q, k2, v2, config);
    const Tensor c = dense_attention(x.q, x.k, x.v, true), d = dense_attention(x.q, k2, v2, true);
    for (std::size_t j = 0; j < keep * 6; ++j) {
      REQUIRE(a[j] == b[j]);
      REQUIRE(c[j] == d[j]);
    }
  }
}

TEST_CASE("sliding window and sink against explicit masks") {
  const std::size_t n = 45, b = 5;
  const Qkv x = random_qkv(n, 2, 3, 77);
  const BlockPartition p = make_partition(n, b);
  for (bool scale : {true, false}) {
    const double s = softmax_scale(scale, 3);
    for (std::size_t w = 1; w <= 4; ++w) {
      const Tensor band = oracle::attention(
          x.q, x.k, x.v,
          [&](std::size_t, std::size_t i, std::size_t j) { return j <= i && j / b + w > i / b; }, s);
      CHECK(max_abs_diff(moba_attention_oracle(x.q, x.k, x.v, route_swa(p, 2, w), scale), band) <=
            1e-10);
      AttentionConfig config = AttentionConfig::swa(2, 3, b, w);
      config.scale = scale;
      CHECK(max_abs_diff(attention(x.q, x.k, x.v, config), band) <= 1e-10);
    }
    const Tensor sink = oracle::attention(
        x.q, x.k, x.v,
        [&](std::size_t, std::size_t i, std::size_t j) {
          return j <= i && (j / b < 1 || j / b + 2 > i / b);
        },
        s);
    CHECK(max_abs_diff(moba_attention_oracle(x.q, x.k, x.v, route_sink(p, 2, 1, 2), scale), sink) <=
          1e-10);
  }
}

TEST_CASE("single precision path tracks double") {
  const Qkv x = random_qkv(48, 2, 4, 5);
  const AttentionConfig config = AttentionConfig::moba(2, 4, 8, 3);
  const TensorF out = moba_attention_pipeline(x.q.cast<float>(), x.k.cast<float>(),
                                              x.v.cast<float>(), config);
  CHECK(max_abs_diff(out.cast<double>(), moba_attention_pipeline(x.q, x.k, x.v, config)) < 1e-5);
}

TEST_CASE("attention config validation") {
  CHECK_NOTHROW(AttentionConfig::moba(2, 4, 8, 2).validate());
  AttentionConfig c = AttentionConfig::moba(2, 4, 8, 2);
  c.window_blocks = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttentionConfig::moba(2, 4, 8, 2);
  c.top_k.reset();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttentionConfig::dense(2, 4);
  c.block_size = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(AttentionConfig::sink(1, 4, 8, 0, 1).validate(), ConfigError);

  CHECK(parse_attention_mode("dense") == AttentionMode::dense_causal);
  CHECK(parse_attention_mode("moba") == AttentionMode::moba);
  CHECK(parse_attention_mode(to_string(AttentionMode::sink)) == AttentionMode::sink);
  CHECK_THROWS_AS(parse_attention_mode("blocky"), ConfigError);
  CHECK(AttentionConfig::moba(1, 16, 8, 2).softmax_scale() == 0.25);
}
