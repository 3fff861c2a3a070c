#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moba/attention.hpp"
#include "moba/autodiff.hpp"
#include "moba/tensor.hpp"

namespace moba {

enum class LayerMode { moba, full };

std::string to_string(LayerMode mode);
LayerMode parse_layer_mode(const std::string& name);

// Decoder-only stack: token + learned position embeddings, num_layers
// pre-norm blocks (attention, GELU FFN), final norm, vocabulary head.
struct LayerStackConfig {
  std::size_t num_layers = 2;
  std::vector<LayerMode> modes{LayerMode::moba, LayerMode::moba};
  std::size_t vocab_size = 256;
  std::size_t d_model = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_width = 64;
  std::size_t max_context = 64;
  // MoBA hyperparameters shared by every moba layer.
  std::size_t block_size = 8;
  std::size_t top_k = 2;
  bool scale = true;

  std::size_t head_dim() const { return d_model / num_heads; }
  AttentionConfig attention_config() const;  // mode moba
  void validate() const;                     // throws ConfigError

  // Last `full_layers` layers full attention, the rest MoBA.
  static LayerStackConfig layerwise_hybrid(std::size_t num_layers, std::size_t full_layers);
  static LayerStackConfig all(std::size_t num_layers, LayerMode mode);
};

struct Parameter {
  std::string name;
  Tensor value;
};

// Per-layer activation statistics from the last forward, for diagnostics.
struct LayerStats {
  std::size_t layer = 0;
  LayerMode mode = LayerMode::full;
  double max_abs_residual = 0.0;
  double max_abs_attention = 0.0;
};

class Model {
 public:
  Model(LayerStackConfig config, std::uint64_t seed);
  Model(LayerStackConfig config, std::vector<Parameter> parameters);

  const LayerStackConfig& config() const { return config_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  struct Forward {
    ad::Var logits;
    std::vector<ad::Var> params;  // same order as parameters()
    std::vector<LayerStats> stats;
  };

  // Records the forward pass on `tape`. `modes` overrides config().modes.
  Forward forward(ad::Tape& tape, std::span<const std::size_t> tokens,
                  std::optional<std::span<const LayerMode>> modes = std::nullopt) const;

 private:
  std::size_t index_of(const std::string& name) const;

  LayerStackConfig config_;
  std::vector<Parameter> params_;
};

// Logits [N, vocab] for a token window.
Tensor layer_stack_forward(const Model& model, std::span<const std::size_t> tokens,
                           std::optional<std::span<const LayerMode>> modes = std::nullopt);

// Per-position cross-entropy -log softmax(logits[i])[targets[i]].
std::vector<double> token_losses(const Tensor& logits, std::span<const std::size_t> targets);

// Mean cross-entropy over positions with mask != 0.
double lm_loss(const Tensor& logits, std::span<const std::size_t> targets,
               std::span<const std::uint8_t> loss_mask);

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam with per-parameter first and second moments.
class Adam {
 public:
  Adam(AdamConfig config, const std::vector<Parameter>& params);
  void step(std::vector<Parameter>& params, std::span<const Tensor> grads);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// Token budget T = total_steps * batch_size * seq_len. Steps whose first
// token index is below floor(switch_fraction * T) use the stack's
// configured modes; later steps switch every layer to full attention.
struct TrainSchedule {
  std::size_t total_steps = 100;
  std::size_t batch_size = 1;
  std::size_t seq_len = 64;
  double switch_fraction = 1.0;
  AdamConfig adam;
  std::uint64_t seed = 0;

  std::size_t tokens_per_step() const { return batch_size * seq_len; }
  std::uint64_t total_tokens() const;
  std::uint64_t switch_tokens() const;
  bool switched(std::size_t step) const;
  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  std::uint64_t tokens_seen = 0;  // before this step
  std::string mode;               // "moba", "full" or "hybrid" (mixed layer modes)
  double loss = 0.0;
};

struct TrainOptions {
  // Written atomically at the end of the run when set.
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> records;
  std::optional<std::size_t> switch_step;
  Model model;
};

// Trains on random windows of `corpus`. The switch keeps weights and
// optimizer state. A non-finite loss raises TrainingDivergedError with the
// step and per-layer activation statistics.
TrainResult train_run(std::span<const std::size_t> corpus, const LayerStackConfig& config,
                      const TrainSchedule& schedule, const TrainOptions& options = {});

void write_loss_csv(std::ostream& out, std::span<const StepRecord> records);

struct Checkpoint {
  LayerStackConfig config;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::vector<Parameter> parameters;
};

// Binary layout: "MOBACKPT", u32 version, u64 header length, JSON header
// (config, step, seed, parameter names and shapes), then the parameters as
// little-endian float64 in header order. Written to a temporary file and
// renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Seeded cyclic corpus: a random phrase of `period` symbols over the first
// `alphabet` lowercase letters, repeated to `length` tokens (byte ids).
std::vector<std::size_t> synthetic_corpus(std::size_t length, std::uint64_t seed,
                                          std::size_t period = 24, std::size_t alphabet = 16);
std::vector<std::size_t> load_text_corpus(const std::filesystem::path& path);

}  // namespace moba
