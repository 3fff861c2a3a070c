#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "frozen_values.hpp"
#include "moba/errors.hpp"
#include "moba/model.hpp"
#include "moba/oracles.hpp"
#include "test_util.hpp"

using namespace moba;
using testing::rnd;

namespace {

LayerStackConfig small_config(std::size_t layers, LayerMode mode) {
  LayerStackConfig c = LayerStackConfig::all(layers, mode);
  c.vocab_size = 20;
  c.d_model = 8;
  c.num_heads = 2;
  c.ffn_width = 12;
  c.max_context = 32;
  c.block_size = 8;
  c.top_k = 2;
  return c;
}

std::vector<std::size_t> tokens_of(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<std::size_t> t(n);
  for (auto& x : t) x = rng.uniform_index(0, vocab - 1);
  return t;
}

Tensor mm(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j)
      for (std::size_t t = 0; t < a.dim(1); ++t) out(i, j) += a(i, t) * b(t, j);
  return out;
}

Tensor norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  Tensor out(x.shape());
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j) / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean) / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      out(i, j) = (x(i, j) - mean) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
  }
  return out;
}

// Loop-level forward built on the reference attention routines.
Tensor reference_forward(const Model& model, const std::vector<std::size_t>& tokens) {
  const LayerStackConfig& c = model.config();
  const std::size_t n = tokens.size(), D = c.d_model, hd = c.head_dim();
  auto P = [&](const std::string& name) { return model.parameter(name); };
  Tensor x({n, D});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < D; ++j)
      x(i, j) = P("tok_emb")(tokens[i], j) + P("pos_emb")(i, j);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    const Tensor h = norm_rows(x, P(pre + "ln1.gain"), P(pre + "ln1.bias"));
    const Tensor q = mm(h, P(pre + "attn.wq")).reshaped({n, c.num_heads, hd});
    const Tensor k = mm(h, P(pre + "attn.wk")).reshaped({n, c.num_heads, hd});
    const Tensor v = mm(h, P(pre + "attn.wv")).reshaped({n, c.num_heads, hd});
    const Tensor a =
        c.modes[l] == LayerMode::moba
            ? oracle::moba_attention(q, k, v, c.block_size, c.top_k, scale)
            : oracle::attention(q, k, v, [](std::size_t, std::size_t i, std::size_t j) { return j <= i; },
                                scale);
    const Tensor o = mm(a.reshaped({n, D}), P(pre + "attn.wo"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    Tensor f = mm(norm_rows(x, P(pre + "ln2.gain"), P(pre + "ln2.bias")), P(pre + "ffn.w1"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c.ffn_width; ++j) {
        const double e = f(i, j) + P(pre + "ffn.b1")[j];
        f(i, j) = 0.5 * e * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (e + 0.044715 * e * e * e)));
      }
    f = mm(f, P(pre + "ffn.w2"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < D; ++j) x(i, j) += f(i, j) + P(pre + "ffn.b2")[j];
  }
  return mm(norm_rows(x, P("ln_f.gain"), P("ln_f.bias")), P("head"));
}

}  // namespace

TEST_CASE("forward equals the composed reference") {
  for (LayerMode mode : {LayerMode::moba, LayerMode::full}) {
    const Model model(small_config(2, mode), 3);
    const auto tokens = tokens_of(32, 20, 4);
    CHECK(max_abs_diff(layer_stack_forward(model, tokens), reference_forward(model, tokens)) <= 1e-8);
  }
  LayerStackConfig mixed = small_config(3, LayerMode::moba);
  mixed.modes = {LayerMode::moba, LayerMode::full, LayerMode::moba};
  mixed.block_size = 5;
  const Model model(mixed, 9);
  const auto tokens = tokens_of(27, 20, 5);
  CHECK(max_abs_diff(layer_stack_forward(model, tokens), reference_forward(model, tokens)) <= 1e-8);
}

TEST_CASE("saturated MoBA stack equals the full stack") {
  LayerStackConfig c = small_config(2, LayerMode::moba);
  c.top_k = 4;
  const Model model(c, 11);
  const auto tokens = tokens_of(32, 20, 12);
  const std::vector<LayerMode> full(2, LayerMode::full);
  CHECK(max_abs_diff(layer_stack_forward(model, tokens),
                     layer_stack_forward(model, tokens, std::span<const LayerMode>(full))) <= 1e-8);
}

TEST_CASE("forward rejects bad windows") {
  const Model model(small_config(1, LayerMode::moba), 1);
  CHECK_THROWS_AS(layer_stack_forward(model, tokens_of(33, 20, 1)), ContextOverflowError);
  const std::vector<std::size_t> bad{1, 2, 20};
  CHECK_THROWS_AS(layer_stack_forward(model, bad), DimensionError);
}

TEST_CASE("language-model loss") {
  const std::vector<std::size_t> t4{0, 1, 2, 3};
  const std::vector<std::uint8_t> all4(4, 1), none4(4, 0);
  CHECK(lm_loss(Tensor({4, 4}), t4, all4) == doctest::Approx(std::log(4.0)).epsilon(1e-15));

  Tensor sure({2, 3});
  sure(0, 1) = 50.0;
  sure(1, 2) = 50.0;
  const std::vector<std::size_t> t2{1, 2};
  const std::vector<std::uint8_t> all2(2, 1);
  CHECK(lm_loss(sure, t2, all2) < 1e-20);

  const Tensor logits = rnd({8, 5}, 61);
  const std::vector<std::size_t> targets(std::begin(frozen::kLmTargets), std::end(frozen::kLmTargets));
  const std::vector<std::uint8_t> all8(8, 1);
  CHECK(std::abs(lm_loss(logits, targets, all8) - frozen::kLmLossN8V5[0]) <= 1e-10);

  CHECK_THROWS_AS(lm_loss(Tensor({4, 4}), t4, none4), DegenerateRowError);
}

TEST_CASE("layer-wise hybrid and mode parsing") {
  const LayerStackConfig c = LayerStackConfig::layerwise_hybrid(5, 2);
  REQUIRE(c.modes.size() == 5);
  for (std::size_t l = 0; l < 5; ++l) CHECK(c.modes[l] == (l < 3 ? LayerMode::moba : LayerMode::full));
  CHECK_THROWS_AS(LayerStackConfig::layerwise_hybrid(2, 3), ConfigError);
  CHECK(parse_layer_mode("full") == LayerMode::full);
  CHECK_THROWS_AS(parse_layer_mode("sparse"), ConfigError);
  LayerStackConfig odd = small_config(1, LayerMode::moba);
  odd.num_heads = 3;
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("switch schedule") {
  TrainSchedule s;
  s.total_steps = 100;
  s.switch_fraction = 0.9;
  for (std::size_t step = 0; step < 100; ++step) CHECK(s.switched(step) == (step >= 90));
  s.switch_fraction = 1.0;
  for (std::size_t step = 0; step < 100; ++step) CHECK_FALSE(s.switched(step));
  s.switch_fraction = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("short full-attention run lowers the loss") {
  LayerStackConfig c = small_config(1, LayerMode::full);
  c.vocab_size = 128;
  TrainSchedule s;
  s.total_steps = 200;
  s.seq_len = 16;
  s.seed = 2;
  const auto corpus = synthetic_corpus(400, 2, 12, 8);
  const TrainResult run = train_run(corpus, c, s);
  REQUIRE(run.records.size() == 200);
  CHECK(run.records.back().loss < run.records.front().loss);
  CHECK_FALSE(run.switch_step.has_value());
  CHECK(run.records[5].tokens_seen == 5 * 16);

  std::ostringstream csv;
  write_loss_csv(csv, run.records);
  CHECK(csv.str().rfind("step,tokens_seen,mode,loss\n0,0,full,", 0) == 0);
}

TEST_CASE("hybrid run switches at the scheduled step") {
  LayerStackConfig c = small_config(1, LayerMode::moba);
  c.vocab_size = 128;
  TrainSchedule s;
  s.total_steps = 20;
  s.seq_len = 16;
  s.switch_fraction = 0.75;
  const TrainResult run = train_run(synthetic_corpus(200, 1, 12, 8), c, s);
  REQUIRE(run.switch_step.has_value());
  CHECK(*run.switch_step == 15);
  CHECK(run.records[14].mode == "moba");
  CHECK(run.records[15].mode == "full");
}

TEST_CASE("parameters and checkpoints") {
  const LayerStackConfig c = small_config(2, LayerMode::moba);
  const Model a(c, 5), b(c, 6);
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].name == b.parameters()[i].name);
    CHECK(a.parameters()[i].value.shape() == b.parameters()[i].value.shape());
  }
  CHECK(a.parameter("head").shape() == Shape{8, 20});

  const auto dir = std::filesystem::temp_directory_path() / "moba_ckpt_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.bin";
  write_checkpoint(path, {c, 17, 5, a.parameters()});
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  CHECK(files == 1);

  const Checkpoint back = read_checkpoint(path);
  CHECK(back.step == 17);
  CHECK(back.seed == 5);
  CHECK(back.config.modes == c.modes);
  const Model restored(back.config, back.parameters);
  const auto tokens = tokens_of(20, 20, 8);
  CHECK(layer_stack_forward(restored, tokens) == layer_stack_forward(a, tokens));

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 8);
  CHECK_THROWS_AS(read_checkpoint(path), ConfigError);
  std::filesystem::remove_all(dir);

  std::vector<Parameter> wrong = a.parameters();
  wrong.pop_back();
  CHECK_THROWS_AS(Model(c, wrong), ConfigError);
}

TEST_CASE("synthetic corpus") {
  const auto corpus = synthetic_corpus(100, 4, 10, 6);
  REQUIRE(corpus.size() == 100);
  for (std::size_t i = 10; i < 100; ++i) CHECK(corpus[i] == corpus[i - 10]);
  for (auto t : corpus) CHECK((t >= 'a' && t < 'a' + 6));
  CHECK(corpus == synthetic_corpus(100, 4, 10, 6));
}
