#include <optional>
#include <cmath>
#include <limits>

#include "frozen_values.hpp"
#include "moba/errors.hpp"
#include "moba/oracles.hpp"
#include "moba/partition.hpp"
#include "moba/tensor.hpp"
#include "test_util.hpp"

using namespace moba;
using testing::max_gap;
using testing::rnd;

TEST_CASE("partition ranges") {
  const BlockPartition p = make_partition(8192, 512);
  CHECK(p.num_blocks() == 16);
  for (std::size_t i = 1; i <= 16; ++i) {
    CHECK(p.range(i).first == (i - 1) * 512 + 1);
    CHECK(p.range(i).last == i * 512);
  }
  const BlockPartition single = make_partition(37, 37);
  CHECK(single.num_blocks() == 1);
  CHECK(single.range(1) == BlockRange{1, 37});

  const BlockPartition ragged = make_partition(10, 4);
  REQUIRE(ragged.num_blocks() == 3);
  CHECK(ragged.range(1) == BlockRange{1, 4});
  CHECK(ragged.range(2) == BlockRange{5, 8});
  CHECK(ragged.range(3) == BlockRange{9, 10});
  CHECK(ragged.block_of(9) == 3);
  CHECK(ragged.block_of(4) == 1);

  CHECK_THROWS_AS(make_partition(0, 4), ParameterError);
  CHECK_THROWS_AS(make_partition(4, 0), ParameterError);
  CHECK_THROWS_AS(ragged.range(4), PartitionError);
  CHECK_THROWS_AS(ragged.block_of(11), ParameterError);
}

TEST_CASE("partition covers every position once") {
  for (std::size_t n = 1; n <= 40; ++n) {
    for (std::size_t b = 1; b <= n + 2; ++b) {
      const BlockPartition p = make_partition(n, b);
      CHECK(p.num_blocks() == (n + b - 1) / b);
      std::size_t next = 1;
      for (const BlockRange& r : p.ranges()) {
        CHECK(r.first == next);
        CHECK(r.length() <= b);
        next = r.last + 1;
      }
      CHECK(next == n + 1);
      for (std::size_t i = 1; i < p.num_blocks(); ++i) CHECK(p.range(i).length() == b);
    }
  }
}

TEST_CASE("matmul") {
  const Tensor m = make_matrix({{1, 2}, {3, 4}});
  CHECK(matmul(make_matrix({{1, 0}, {0, 1}}), m) == m);
  CHECK(matmul(Tensor({3, 2}), m) == Tensor({3, 2}));

  const Tensor a = rnd({5, 4}, 11), b = rnd({4, 3}, 12);
  CHECK(max_gap(matmul(a, b), frozen::kMatmul5x4x3) <= 1e-12);

  try {
    matmul(a, a);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[5x4]") != std::string::npos);
  }
}

TEST_CASE("matmul against triple loop on random shapes") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = rng.uniform_index(1, 32), k = rng.uniform_index(1, 32),
                      p = rng.uniform_index(1, 32);
    const Tensor a = rnd({m, k}, rng.next()), b = rnd({k, p}, rng.next());
    Tensor naive({m, p});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t t = 0; t < k; ++t) naive(i, j) += a(i, t) * b(t, j);
    CHECK(max_abs_diff(matmul(a, b), naive) <= 1e-10);
  }
}

TEST_CASE("matmul rejects non-finite results") {
  const Tensor big = make_matrix({{1e308, 1e308}});
  CHECK_THROWS_AS(matmul(big, make_matrix({{10}, {10}})), NonFiniteError);
}

TEST_CASE("stable softmax") {
  const Tensor uniform = stable_softmax_rows(make_matrix({{2.5, 2.5, 2.5}}));
  for (double v : uniform.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor a = stable_softmax_rows(make_matrix({{0.3, -1.2}}));
  const Tensor b = stable_softmax_rows(make_matrix({{1000.3, 998.8}}));
  CHECK(max_abs_diff(a, b) <= 1e-12);

  CHECK(max_gap(stable_softmax_rows(make_matrix({{1e4, 0.0}})), frozen::kSoftmaxWide) <= 1e-12);
}

TEST_CASE("stable softmax with mask") {
  const double inf = std::numeric_limits<double>::infinity();
  const Tensor x = rnd({4, 6}, 3);
  Tensor mask({4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) mask(i, j) = -inf;
  const Tensor p = stable_softmax_rows(x, std::optional<Tensor>(mask));
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(p(i, j) >= 0.0);
      if (j > i) CHECK(p(i, j) == 0.0);
      total += p(i, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor dead({1, 3});
  for (auto& v : dead.data()) v = -inf;
  CHECK_THROWS_AS(stable_softmax_rows(Tensor({1, 3}), std::optional<Tensor>(dead)), DegenerateRowError);
}

TEST_CASE("softmax shift invariance keeps the argmax") {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = rnd({3, 7}, rng.next());
    Tensor shifted = x;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 7; ++j) shifted(i, j) += 100.0 * static_cast<double>(i + 1);
    const Tensor a = stable_softmax_rows(x), b = stable_softmax_rows(shifted);
    CHECK(max_abs_diff(a, b) <= 1e-12);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto ra = a.row(i), rb = b.row(i);
      CHECK(std::max_element(ra.begin(), ra.end()) - ra.begin() ==
            std::max_element(rb.begin(), rb.end()) - rb.begin());
    }
  }
}

TEST_CASE("block mean pool") {
  Tensor same({3, 2});
  for (std::size_t i = 0; i < 3; ++i) {
    same(i, 0) = 1.5;
    same(i, 1) = -2.0;
  }
  CHECK(block_mean_pool(same, make_partition(3, 3)) == make_matrix({{1.5, -2.0}}));
  CHECK(block_mean_pool(make_matrix({{0, 0, 0}, {2, 2, 2}}), make_partition(2, 2)) ==
        make_matrix({{1, 1, 1}}));

  const Tensor keys = rnd({8, 3}, 21);
  CHECK(max_gap(block_mean_pool(keys, make_partition(8, 3)), frozen::kPoolN8B3) <= 1e-12);
  CHECK_THROWS_AS(block_mean_pool(keys, make_partition(9, 3)), PartitionError);
}

TEST_CASE("pooled means centre each block") {
  const Tensor keys = rnd({13, 4}, 8);
  const BlockPartition p = make_partition(13, 5);
  const Tensor pooled = block_mean_pool(keys, p);
  for (std::size_t b = 1; b <= p.num_blocks(); ++b) {
    const BlockRange r = p.range(b);
    for (std::size_t t = 0; t < 4; ++t) {
      double total = 0.0;
      for (std::size_t j = r.begin0(); j < r.end0(); ++j) total += keys(j, t) - pooled(b - 1, t);
      CHECK(std::abs(total) <= 1e-12);
    }
  }
}

TEST_CASE("seeded random") {
  CHECK(rnd({4, 4}, 3) == rnd({4, 4}, 3));
  CHECK_FALSE(rnd({4, 4}, 3) == rnd({4, 4}, 4));

  const Tensor first = rnd({4}, 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(first[i] == doctest::Approx(frozen::kSeed0Normals[i]).epsilon(1e-15));

  const Tensor big = rnd({10000}, 0);
  double mean = 0.0;
  for (double v : big.data()) mean += v;
  mean /= 10000.0;
  double var = 0.0;
  for (double v : big.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 9999.0);
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(sd - 1.0) < 0.05);

  const TensorF single = seeded_random<float>({8}, 3);
  const Tensor twin = rnd({8}, 3);
  for (std::size_t i = 0; i < 8; ++i) CHECK(single[i] == static_cast<float>(twin[i]));
}

TEST_CASE("head slices round trip") {
  const Tensor x = rnd({5, 3, 2}, 4);
  Tensor y({5, 3, 2});
  for (std::size_t h = 0; h < 3; ++h) set_head_slice(y, h, head_slice(x, h));
  CHECK(x == y);
  CHECK(head_slice(x, 1)(2, 1) == x(2, 1, 1));
  CHECK_THROWS_AS(head_slice(x, 3), DimensionError);
}

TEST_CASE("oracle mean pool agrees with library pool") {
  const Tensor keys = rnd({11, 2, 3}, 17);
  const BlockPartition p = make_partition(11, 4);
  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(max_abs_diff(oracle::mean_pool(keys, h, 4), block_mean_pool(head_slice(keys, h), p)) <=
          1e-15);
  }
}
