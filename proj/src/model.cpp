#include "moba/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "moba/gating.hpp"

namespace moba {

std::string to_string(LayerMode mode) { return mode == LayerMode::moba ? "moba" : "full"; }

LayerMode parse_layer_mode(const std::string& name) {
  if (name == "moba") return LayerMode::moba;
  if (name == "full") return LayerMode::full;
  throw ConfigError("unknown layer mode '" + name + "' (expected moba or full)");
}

AttentionConfig LayerStackConfig::attention_config() const {
  AttentionConfig c = AttentionConfig::moba(num_heads, head_dim(), block_size, top_k);
  c.scale = scale;
  return c;
}

void LayerStackConfig::validate() const {
  if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
  if (modes.size() != num_layers) {
    throw ConfigError("mode list has " + std::to_string(modes.size()) + " entries for " +
                      std::to_string(num_layers) + " layers");
  }
  if (vocab_size == 0 || d_model == 0 || num_heads == 0 || ffn_width == 0 || max_context == 0) {
    throw ConfigError("model dimensions must be >= 1");
  }
  if (d_model % num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (block_size == 0 || top_k == 0) throw ConfigError("block_size and top_k must be >= 1");
}

LayerStackConfig LayerStackConfig::layerwise_hybrid(std::size_t num_layers,
                                                    std::size_t full_layers) {
  if (full_layers > num_layers) {
    throw ConfigError("layer-wise hybrid asks for " + std::to_string(full_layers) +
                      " full layers out of " + std::to_string(num_layers));
  }
  LayerStackConfig c;
  c.num_layers = num_layers;
  c.modes.assign(num_layers, LayerMode::moba);
  std::fill(c.modes.end() - static_cast<std::ptrdiff_t>(full_layers), c.modes.end(),
            LayerMode::full);
  return c;
}

LayerStackConfig LayerStackConfig::all(std::size_t num_layers, LayerMode mode) {
  LayerStackConfig c;
  c.num_layers = num_layers;
  c.modes.assign(num_layers, mode);
  return c;
}

namespace {

std::string layer_name(std::size_t layer, const char* suffix) {
  return "layer" + std::to_string(layer) + "." + suffix;
}

Tensor filled(const Shape& shape, double value) {
  Tensor t(shape);
  for (auto& e : t.data()) e = value;
  return t;
}

Tensor scaled_normal(const Shape& shape, std::uint64_t seed, double std_dev) {
  Tensor t = seeded_random<double>(shape, seed);
  for (auto& e : t.data()) e *= std_dev;
  return t;
}

}  // namespace

Model::Model(LayerStackConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const std::size_t D = config_.d_model, F = config_.ffn_width, V = config_.vocab_size;
  SplitMix64 seeds(seed);
  auto add_normal = [&](std::string name, Shape shape, double std_dev) {
    params_.push_back({std::move(name), scaled_normal(shape, seeds.next(), std_dev)});
  };
  auto add_const = [&](std::string name, Shape shape, double value) {
    params_.push_back({std::move(name), filled(shape, value)});
  };
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(D));
  add_normal("tok_emb", {V, D}, 0.1);
  add_normal("pos_emb", {config_.max_context, D}, 0.1);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    add_const(layer_name(l, "ln1.gain"), {D}, 1.0);
    add_const(layer_name(l, "ln1.bias"), {D}, 0.0);
    add_normal(layer_name(l, "attn.wq"), {D, D}, inv_d);
    add_normal(layer_name(l, "attn.wk"), {D, D}, inv_d);
    add_normal(layer_name(l, "attn.wv"), {D, D}, inv_d);
    add_normal(layer_name(l, "attn.wo"), {D, D}, inv_d);
    add_const(layer_name(l, "ln2.gain"), {D}, 1.0);
    add_const(layer_name(l, "ln2.bias"), {D}, 0.0);
    add_normal(layer_name(l, "ffn.w1"), {D, F}, inv_d);
    add_const(layer_name(l, "ffn.b1"), {F}, 0.0);
    add_normal(layer_name(l, "ffn.w2"), {F, D}, 1.0 / std::sqrt(static_cast<double>(F)));
    add_const(layer_name(l, "ffn.b2"), {D}, 0.0);
  }
  add_const("ln_f.gain", {D}, 1.0);
  add_const("ln_f.bias", {D}, 0.0);
  add_normal("head", {D, V}, inv_d);
}

Model::Model(LayerStackConfig config, std::vector<Parameter> parameters)
    : config_(std::move(config)), params_(std::move(parameters)) {
  config_.validate();
  const Model reference(config_, 0);
  if (reference.params_.size() != params_.size()) {
    throw ConfigError("parameter list does not match the configured stack");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != reference.params_[i].name ||
        params_[i].value.shape() != reference.params_[i].value.shape()) {
      throw ConfigError("parameter '" + params_[i].name + "' does not match the configured stack");
    }
  }
}

std::size_t Model::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ConfigError("no parameter named '" + name + "'");
}

const Tensor& Model::parameter(const std::string& name) const {
  return params_[index_of(name)].value;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

namespace {

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double e : t.data()) m = std::max(m, std::abs(e));
  return m;
}

}  // namespace

Model::Forward Model::forward(ad::Tape& tape, std::span<const std::size_t> tokens,
                              std::optional<std::span<const LayerMode>> modes) const {
  const std::size_t n = tokens.size();
  if (n == 0) throw DimensionError("forward: empty token window");
  if (n > config_.max_context) {
    throw ContextOverflowError("window of " + std::to_string(n) + " tokens exceeds max context " +
                               std::to_string(config_.max_context));
  }
  for (auto t : tokens) {
    if (t >= config_.vocab_size) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(config_.vocab_size));
    }
  }
  const std::span<const LayerMode> layer_modes = modes ? *modes : std::span(config_.modes);
  if (layer_modes.size() != config_.num_layers) {
    throw ConfigError("mode override has " + std::to_string(layer_modes.size()) + " entries for " +
                      std::to_string(config_.num_layers) + " layers");
  }

  Forward fwd;
  for (const auto& p : params_) fwd.params.push_back(tape.leaf(p.value));
  auto P = [&](const std::string& name) { return fwd.params[index_of(name)]; };

  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  ad::Var x = ad::add(ad::gather_rows(P("tok_emb"), tokens), ad::gather_rows(P("pos_emb"), positions));

  const BlockPartition partition = make_partition(n, config_.block_size);
  const std::size_t heads = config_.num_heads, hd = config_.head_dim();
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    ad::Var h = ad::layer_norm(x, P(layer_name(l, "ln1.gain")), P(layer_name(l, "ln1.bias")));
    ad::Var q = ad::matmul(h, P(layer_name(l, "attn.wq")));
    ad::Var k = ad::matmul(h, P(layer_name(l, "attn.wk")));
    ad::Var v = ad::matmul(h, P(layer_name(l, "attn.wv")));
    ad::Var a;
    if (layer_modes[l] == LayerMode::moba) {
      // Routing comes from current values and is frozen for backward.
      const RoutingTable routing = route_moba(q.value().reshaped({n, heads, hd}),
                                              k.value().reshaped({n, heads, hd}), partition,
                                              config_.top_k);
      a = ad::moba_attention(q, k, v, routing, config_.scale);
    } else {
      a = ad::causal_attention(q, k, v, heads, config_.scale);
    }
    x = ad::add(x, ad::matmul(a, P(layer_name(l, "attn.wo"))));
    ad::Var h2 = ad::layer_norm(x, P(layer_name(l, "ln2.gain")), P(layer_name(l, "ln2.bias")));
    ad::Var f = ad::gelu(ad::add_bias(ad::matmul(h2, P(layer_name(l, "ffn.w1"))),
                                      P(layer_name(l, "ffn.b1"))));
    f = ad::add_bias(ad::matmul(f, P(layer_name(l, "ffn.w2"))), P(layer_name(l, "ffn.b2")));
    x = ad::add(x, f);
    fwd.stats.push_back({l, layer_modes[l], max_abs(x.value()), max_abs(a.value())});
  }
  x = ad::layer_norm(x, P("ln_f.gain"), P("ln_f.bias"));
  fwd.logits = ad::matmul(x, P("head"));
  return fwd;
}

Tensor layer_stack_forward(const Model& model, std::span<const std::size_t> tokens,
                           std::optional<std::span<const LayerMode>> modes) {
  ad::Tape tape;
  return model.forward(tape, tokens, modes).logits.value();
}

std::vector<double> token_losses(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("token_losses: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t vocab = logits.dim(1);
  std::vector<double> losses(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= vocab) throw DimensionError("token_losses: target id out of vocabulary");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(logits(i, j) - mx);
    losses[i] = mx + std::log(denom) - logits(i, targets[i]);
  }
  return losses;
}

double lm_loss(const Tensor& logits, std::span<const std::size_t> targets,
               std::span<const std::uint8_t> loss_mask) {
  if (loss_mask.size() != targets.size()) {
    throw DimensionError("lm_loss: mask length differs from targets");
  }
  const std::vector<double> losses = token_losses(logits, targets);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!loss_mask[i]) continue;
    total += losses[i];
    ++count;
  }
  if (count == 0) throw DegenerateRowError("lm_loss: every position is masked");
  return total / static_cast<double>(count);
}

Adam::Adam(AdamConfig config, const std::vector<Parameter>& params) : config_(config) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step(std::vector<Parameter>& params, std::span<const Tensor> grads) {
  if (grads.size() != params.size() || m_.size() != params.size()) {
    throw DimensionError("Adam::step: gradient list does not match parameters");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].value;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = grads[i][j];
      m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g;
      v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g * g;
      w[j] -= config_.learning_rate * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.epsilon);
    }
  }
}

std::uint64_t TrainSchedule::total_tokens() const {
  return static_cast<std::uint64_t>(total_steps) * tokens_per_step();
}

std::uint64_t TrainSchedule::switch_tokens() const {
  const long double exact = static_cast<long double>(switch_fraction) * total_tokens();
  // Absorb the representation error of fractions like 0.9 before flooring.
  const long double nearest = std::round(exact);
  const long double value = std::abs(exact - nearest) < 1e-9L * (1 + exact) ? nearest : exact;
  return static_cast<std::uint64_t>(std::floor(value));
}

bool TrainSchedule::switched(std::size_t step) const {
  return static_cast<std::uint64_t>(step) * tokens_per_step() >= switch_tokens();
}

void TrainSchedule::validate() const {
  if (total_steps == 0 || batch_size == 0 || seq_len == 0) {
    throw ConfigError("schedule needs total_steps, batch_size, seq_len >= 1");
  }
  if (!(switch_fraction >= 0.0 && switch_fraction <= 1.0)) {
    throw ConfigError("switch_fraction must lie in [0, 1]");
  }
  if (!(adam.learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
}

namespace {

std::string stats_dump(std::size_t step, const std::vector<LayerStats>& stats) {
  std::ostringstream msg;
  msg << "training diverged at step " << step << ":";
  for (const auto& s : stats) {
    msg << " [layer " << s.layer << " " << to_string(s.mode)
        << " max|residual|=" << s.max_abs_residual << " max|attn|=" << s.max_abs_attention << "]";
  }
  return msg.str();
}

std::string step_mode(bool switched, const std::vector<LayerMode>& modes) {
  if (switched) return "full";
  const bool all_moba = std::all_of(modes.begin(), modes.end(),
                                    [](LayerMode m) { return m == LayerMode::moba; });
  const bool all_full = std::all_of(modes.begin(), modes.end(),
                                    [](LayerMode m) { return m == LayerMode::full; });
  return all_moba ? "moba" : all_full ? "full" : "hybrid";
}

}  // namespace

TrainResult train_run(std::span<const std::size_t> corpus, const LayerStackConfig& config,
                      const TrainSchedule& schedule, const TrainOptions& options) {
  config.validate();
  schedule.validate();
  if (schedule.seq_len > config.max_context) {
    throw ConfigError("seq_len exceeds the model's max_context");
  }
  if (corpus.size() < schedule.seq_len + 1) {
    throw ConfigError("corpus of " + std::to_string(corpus.size()) +
                      " tokens is shorter than one training window");
  }
  Model model(config, schedule.seed);
  Adam adam(schedule.adam, model.parameters());
  SplitMix64 windows(schedule.seed ^ 0xD1B54A32D192ED03ULL);
  const std::vector<LayerMode> full_modes(config.num_layers, LayerMode::full);

  TrainResult result{{}, std::nullopt, model};
  std::vector<std::uint8_t> mask(schedule.seq_len, 1);
  for (std::size_t step = 0; step < schedule.total_steps; ++step) {
    const bool switched = schedule.switched(step);
    if (switched && !result.switch_step && schedule.switch_fraction < 1.0) {
      result.switch_step = step;
    }
    const std::vector<LayerMode>& modes = switched ? full_modes : config.modes;

    std::vector<Tensor> grads;
    for (const auto& p : model.parameters()) grads.emplace_back(p.value.shape());
    double loss = 0.0;
    std::vector<LayerStats> last_stats;
    for (std::size_t b = 0; b < schedule.batch_size; ++b) {
      const std::size_t start = windows.uniform_index(0, corpus.size() - schedule.seq_len - 1);
      const auto tokens = corpus.subspan(start, schedule.seq_len);
      const auto targets = corpus.subspan(start + 1, schedule.seq_len);
      ad::Tape tape;
      Model::Forward fwd;
      try {
        fwd = model.forward(tape, tokens, std::span<const LayerMode>(modes));
      } catch (const NonFiniteError& e) {
        throw TrainingDivergedError(stats_dump(step, last_stats) + " (" + e.what() + ")");
      }
      last_stats = fwd.stats;
      ad::Var l = ad::cross_entropy(fwd.logits, targets, mask);
      if (!std::isfinite(l.value()[0])) throw TrainingDivergedError(stats_dump(step, fwd.stats));
      tape.backward(ad::scale(l, 1.0 / static_cast<double>(schedule.batch_size)));
      loss += l.value()[0] / static_cast<double>(schedule.batch_size);
      for (std::size_t i = 0; i < grads.size(); ++i) {
        const Tensor& g = fwd.params[i].grad();
        for (std::size_t j = 0; j < g.size(); ++j) grads[i][j] += g[j];
      }
    }
    StepRecord record{step, static_cast<std::uint64_t>(step) * schedule.tokens_per_step(),
                      step_mode(switched, config.modes), loss};
    result.records.push_back(record);
    if (options.on_step) options.on_step(record);
    adam.step(model.parameters(), grads);
  }
  result.model = model;
  if (options.checkpoint_path) {
    write_checkpoint(*options.checkpoint_path,
                     {config, schedule.total_steps, schedule.seed, model.parameters()});
  }
  return result;
}

void write_loss_csv(std::ostream& out, std::span<const StepRecord> records) {
  out << "step,tokens_seen,mode,loss\n";
  const auto old_precision = out.precision(17);
  for (const auto& r : records) {
    out << r.step << ',' << r.tokens_seen << ',' << r.mode << ',' << r.loss << '\n';
  }
  out.precision(old_precision);
}

namespace {

constexpr char kMagic[8] = {'M', 'O', 'B', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

nlohmann::json config_to_json(const LayerStackConfig& c) {
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  return {{"num_layers", c.num_layers}, {"modes", modes},           {"vocab_size", c.vocab_size},
          {"d_model", c.d_model},       {"num_heads", c.num_heads}, {"ffn_width", c.ffn_width},
          {"max_context", c.max_context}, {"block_size", c.block_size}, {"top_k", c.top_k},
          {"scale", c.scale}};
}

LayerStackConfig config_from_json(const nlohmann::json& j) {
  LayerStackConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.modes.clear();
  for (const auto& m : j.at("modes")) c.modes.push_back(parse_layer_mode(m.get<std::string>()));
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ffn_width = j.at("ffn_width").get<std::size_t>();
  c.max_context = j.at("max_context").get<std::size_t>();
  c.block_size = j.at("block_size").get<std::size_t>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.scale = j.at("scale").get<bool>();
  return c;
}

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ConfigError("checkpoint truncated");
  return value;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["config"] = config_to_json(checkpoint.config);
  header["step"] = checkpoint.step;
  header["seed"] = checkpoint.seed;
  header["parameters"] = nlohmann::json::array();
  for (const auto& p : checkpoint.parameters) {
    header["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  const std::string text = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open checkpoint file " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kCheckpointVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : checkpoint.parameters) {
      out.write(reinterpret_cast<const char*>(p.value.data().data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
    if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ConfigError(path.string() + " is not a checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = read_pod<std::uint64_t>(in);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw ConfigError("checkpoint header truncated");
  const nlohmann::json header = nlohmann::json::parse(text);

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.step = header.at("step").get<std::size_t>();
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  for (const auto& entry : header.at("parameters")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data(shape_volume(shape));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw ConfigError("checkpoint parameter data truncated");
    ckpt.parameters.push_back({entry.at("name").get<std::string>(), Tensor(shape, std::move(data))});
  }
  return ckpt;
}

std::vector<std::size_t> synthetic_corpus(std::size_t length, std::uint64_t seed,
                                          std::size_t period, std::size_t alphabet) {
  if (period == 0 || alphabet == 0 || alphabet > 26) {
    throw ParameterError("synthetic_corpus needs period >= 1 and 1 <= alphabet <= 26");
  }
  SplitMix64 rng(seed);
  std::vector<std::size_t> phrase(period);
  for (auto& t : phrase) t = static_cast<std::size_t>('a') + rng.uniform_index(0, alphabet - 1);
  std::vector<std::size_t> corpus(length);
  for (std::size_t i = 0; i < length; ++i) corpus[i] = phrase[i % period];
  return corpus;
}

std::vector<std::size_t> load_text_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus " + path.string());
  std::vector<std::size_t> tokens;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    tokens.push_back(static_cast<unsigned char>(*it));
  }
  if (tokens.empty()) throw ConfigError("corpus " + path.string() + " is empty");
  return tokens;
}

}  // namespace moba
