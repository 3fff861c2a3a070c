// moba: verification, operation-count benchmarks, segmentation sweeps, toy
// training, gate tracing and power-law fits.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moba/attention.hpp"
#include "moba/errors.hpp"
#include "moba/gating.hpp"
#include "moba/harness.hpp"
#include "moba/metrics.hpp"
#include "moba/model.hpp"
#include "moba/verify.hpp"

namespace {

using nlohmann::json;

constexpr int kUsageError = 2;

// Failures attributable to the invocation rather than the computation.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw UsageError("malformed config file " + path + ": " + e.what());
  }
}

// Reads `section.key` into `out` when present.
template <typename T>
void from_config(const json& config, const char* section, const char* key, T& out) {
  if (!config.contains(section) || !config[section].contains(key)) return;
  try {
    out = config[section][key].get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config key ") + section + "." + key + ": " + e.what());
  }
}

template <typename T>
void from_config(const json& config, const char* section, const char* key, std::optional<T>& out) {
  if (!config.contains(section) || !config[section].contains(key)) return;
  T value{};
  from_config(config, section, key, value);
  out = value;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path);
  return out;
}

// Either stdout or the named file.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) file_ = open_output(path);
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::optional<std::ofstream> file_;
};

void print_ops_note() {
  std::cerr << "# counts are multiply-add operations, not wall-clock time\n";
}

struct AttentionArgs {
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  std::size_t block_size = 512;
  std::size_t top_k = 3;
  std::string mode = "moba";
  std::size_t window = 2;
  std::size_t sink = 1;
  std::size_t recent = 1;
  bool no_scale = false;
};

void add_attention_options(CLI::App& cmd, AttentionArgs& a) {
  cmd.add_option("--mode", a.mode, "dense, moba, swa or sink")->capture_default_str();
  cmd.add_option("--heads", a.heads, "number of heads")->capture_default_str()->check(CLI::PositiveNumber);
  cmd.add_option("--head-dim", a.head_dim, "per-head width")->capture_default_str()->check(CLI::PositiveNumber);
  cmd.add_option("--block-size", a.block_size, "block size B")->capture_default_str()->check(CLI::PositiveNumber);
  cmd.add_option("--topk", a.top_k, "blocks selected per query, current one included")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd.add_option("--window", a.window, "SWA window in blocks")->capture_default_str();
  cmd.add_option("--sink", a.sink, "sink blocks")->capture_default_str();
  cmd.add_option("--recent", a.recent, "recent blocks for the sink pattern")->capture_default_str();
  cmd.add_flag("--no-scale", a.no_scale, "drop the 1/sqrt(d) logit scale");
}

// Config-file values first, then flags given on the command line.
moba::AttentionConfig attention_config(const json& file, const CLI::App& cmd,
                                       const AttentionArgs& args) {
  AttentionArgs a = args;
  const auto given = [&](const char* flag) { return cmd.count(flag) > 0; };
  if (!given("--heads")) from_config(file, "attention", "num_heads", a.heads);
  if (!given("--head-dim")) from_config(file, "attention", "head_dim", a.head_dim);
  if (!given("--block-size")) from_config(file, "attention", "block_size", a.block_size);
  if (!given("--topk")) from_config(file, "attention", "top_k", a.top_k);
  if (!given("--window")) from_config(file, "attention", "window_blocks", a.window);
  if (!given("--sink")) from_config(file, "attention", "sink_blocks", a.sink);
  if (!given("--recent")) from_config(file, "attention", "recent_blocks", a.recent);
  if (!given("--mode")) from_config(file, "attention", "mode", a.mode);
  bool scale = !a.no_scale;
  if (!given("--no-scale")) from_config(file, "attention", "scale", scale);

  moba::AttentionConfig c;
  switch (moba::parse_attention_mode(a.mode)) {
    case moba::AttentionMode::dense_causal: c = moba::AttentionConfig::dense(a.heads, a.head_dim); break;
    case moba::AttentionMode::moba:
      c = moba::AttentionConfig::moba(a.heads, a.head_dim, a.block_size, a.top_k);
      break;
    case moba::AttentionMode::swa:
      c = moba::AttentionConfig::swa(a.heads, a.head_dim, a.block_size, a.window);
      break;
    case moba::AttentionMode::sink:
      c = moba::AttentionConfig::sink(a.heads, a.head_dim, a.block_size, a.sink, a.recent);
      break;
  }
  c.scale = scale;
  c.validate();
  return c;
}

int run_verify(const std::vector<std::string>& names, std::uint64_t seed) {
  std::vector<moba::Suite> suites;
  if (names.empty()) {
    suites.assign(moba::all_suites().begin(), moba::all_suites().end());
  } else {
    for (const auto& n : names) suites.push_back(moba::parse_suite(n));
  }
  std::size_t passed = 0;
  for (moba::Suite s : suites) {
    const moba::SuiteResult r = moba::run_suite(s, seed);
    passed += r.passed ? 1 : 0;
    std::printf("%-16s %s  max_error=%.3g tol=%.3g n=%zu%s%s\n", r.name.c_str(),
                r.passed ? "PASS" : "FAIL", r.max_error, r.tolerance, r.instances,
                r.detail.empty() ? "" : "  ", r.detail.c_str());
  }
  std::printf("%zu/%zu suites passed (seed %llu)\n", passed, suites.size(),
              static_cast<unsigned long long>(seed));
  return passed == suites.size() ? 0 : 1;
}

int run_bench(const moba::AttentionConfig& config, const std::vector<std::size_t>& lengths,
              std::ostream& out) {
  print_ops_note();
  out << moba::flop_csv_header() << '\n';
  for (std::size_t n : lengths) out << moba::to_csv_row(moba::flop_report(config, n)) << '\n';
  return 0;
}

int run_gate_trace(const moba::AttentionConfig& config, std::size_t n, std::uint64_t seed,
                   std::ostream& out) {
  const moba::BlockPartition partition(n, *config.block_size);
  moba::RoutingTable routing;
  switch (config.mode) {
    case moba::AttentionMode::moba: {
      const moba::Shape shape{n, config.num_heads, config.head_dim};
      routing = moba::route_moba(moba::seeded_random<double>(shape, seed * 2 + 1),
                                 moba::seeded_random<double>(shape, seed * 2 + 2), partition,
                                 *config.top_k);
      break;
    }
    case moba::AttentionMode::swa:
      routing = moba::route_swa(partition, config.num_heads, *config.window_blocks);
      break;
    case moba::AttentionMode::sink:
      routing = moba::route_sink(partition, config.num_heads, *config.sink_blocks,
                                 *config.recent_blocks);
      break;
    case moba::AttentionMode::dense_causal:
      throw UsageError("gate-trace needs a block-sparse mode");
  }
  out << "query_pos,head,selected_blocks\n";
  for (const moba::RoutingRow& row : routing.rows()) {
    out << row.query_pos << ',' << row.head << ',';
    for (std::size_t i = 0; i < row.selected.size(); ++i) out << (i ? ";" : "") << row.selected[i];
    out << '\n';
  }
  return 0;
}

std::vector<std::pair<double, double>> read_points(std::istream& in) {
  std::vector<std::pair<double, double>> points;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string c, l;
    if (!std::getline(fields, c, ',') || !std::getline(fields, l, ',')) {
      throw UsageError("line " + std::to_string(line_no) + ": expected C,L");
    }
    try {
      points.emplace_back(std::stod(c), std::stod(l));
    } catch (const std::exception&) {
      if (points.empty() && line_no == 1) continue;  // header row
      throw UsageError("line " + std::to_string(line_no) + ": not numeric");
    }
  }
  return points;
}

int run_fit(const std::string& input) {
  std::vector<std::pair<double, double>> points;
  if (input.empty() || input == "-") {
    points = read_points(std::cin);
  } else {
    std::ifstream in(input);
    if (!in) throw UsageError("cannot open " + input);
    points = read_points(in);
  }
  const moba::PowerLawFit fit = moba::fit_power_law(points);
  std::printf("a=%.6g\nb=%.6g\nresidual=%.3g\ncount=%zu\n", fit.a, fit.b, fit.residual, fit.count);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoBA block-sparse attention tools"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::string config_path;
  app.add_option("--seed", seed, "seed for every random draw")->envname("MOBA_SEED")->capture_default_str();
  app.add_option("--config", config_path, "JSON file with attention/model/schedule sections");

  auto* verify = app.add_subcommand("verify", "run oracle-equivalence and invariant suites");
  std::vector<std::string> suite_names;
  verify->add_option("--suite", suite_names, "restrict to named suites")->delimiter(',');

  auto* bench = app.add_subcommand("bench", "operation counts over a sweep of context lengths (CSV)");
  AttentionArgs bench_args;
  std::vector<std::size_t> bench_lengths{8192, 32768};
  std::string bench_out;
  add_attention_options(*bench, bench_args);
  bench->add_option("--n", bench_lengths, "context lengths")->delimiter(',')->capture_default_str();
  bench->add_option("-o,--out", bench_out, "CSV path (default stdout)");

  auto* sweep = app.add_subcommand("sweep", "block granularity sweep at fixed sparsity (CSV)");
  std::size_t sweep_n = 32768;
  double sweep_target = 0.75;
  std::vector<std::size_t> sweep_blocks{8, 16, 32, 64, 128};
  bool sweep_forward = false, sweep_lenient = false;
  std::size_t sweep_steps = 0;
  std::string sweep_out;
  moba::SweepOptions sweep_options;
  sweep->add_option("--n", sweep_n, "context length")->capture_default_str();
  sweep->add_option("--sparsity", sweep_target, "target sparsity")->capture_default_str();
  sweep->add_option("--blocks", sweep_blocks, "block counts")->delimiter(',')->capture_default_str();
  sweep->add_option("--heads", sweep_options.num_heads, "heads")->capture_default_str();
  sweep->add_option("--head-dim", sweep_options.head_dim, "per-head width")->capture_default_str();
  sweep->add_flag("--forward-check", sweep_forward, "record max deviation of a forward pass from dense");
  sweep->add_flag("--lenient", sweep_lenient, "allow block counts that do not divide N");
  sweep->add_option("--train-steps", sweep_steps, "train a toy model per row (N <= 512 advised)");
  sweep->add_option("-o,--out", sweep_out, "CSV path (default stdout)");

  auto* train = app.add_subcommand("train", "toy hybrid training run (loss CSV + checkpoint)");
  moba::LayerStackConfig stack;
  moba::TrainSchedule schedule;
  std::size_t full_layers = 0;
  std::string layer_mode = "moba", corpus_path, loss_csv, checkpoint;
  std::size_t corpus_tokens = 512;
  train->add_option("--layers", stack.num_layers, "number of layers")->capture_default_str();
  train->add_option("--layer-mode", layer_mode, "moba or full for every layer")->capture_default_str();
  train->add_option("--full-layers", full_layers, "last layers forced to full attention")->capture_default_str();
  train->add_option("--d-model", stack.d_model, "model width")->capture_default_str();
  train->add_option("--heads", stack.num_heads, "heads")->capture_default_str();
  train->add_option("--ffn", stack.ffn_width, "feed-forward width")->capture_default_str();
  train->add_option("--block-size", stack.block_size, "MoBA block size")->capture_default_str();
  train->add_option("--topk", stack.top_k, "MoBA top-k")->capture_default_str();
  train->add_option("--steps", schedule.total_steps, "training steps")->capture_default_str();
  train->add_option("--batch", schedule.batch_size, "windows per step")->capture_default_str();
  train->add_option("--seq-len", schedule.seq_len, "tokens per window")->capture_default_str();
  train->add_option("--switch-fraction", schedule.switch_fraction,
                    "fraction of the token budget trained before switching to full attention")
      ->capture_default_str();
  train->add_option("--lr", schedule.adam.learning_rate, "Adam learning rate")->capture_default_str();
  train->add_option("--corpus", corpus_path, "text file (bytes); default a seeded synthetic corpus");
  train->add_option("--corpus-tokens", corpus_tokens, "synthetic corpus length")->capture_default_str();
  train->add_option("--loss-csv", loss_csv, "loss trajectory CSV (default stdout)");
  train->add_option("--checkpoint", checkpoint, "checkpoint path");

  auto* trace = app.add_subcommand("gate-trace", "routing table of a seeded random input (CSV)");
  AttentionArgs trace_args;
  trace_args.block_size = 8;
  trace_args.top_k = 2;
  trace_args.head_dim = 4;
  std::size_t trace_n = 64;
  std::string trace_out;
  add_attention_options(*trace, trace_args);
  trace->add_option("--n", trace_n, "context length")->capture_default_str();
  trace->add_option("-o,--out", trace_out, "CSV path (default stdout)");

  auto* fit = app.add_subcommand("fit", "power-law fit L = a C^b from a C,L CSV");
  std::string fit_input;
  fit->add_option("input", fit_input, "CSV file, '-' or omitted for stdin");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    const json file = load_config(config_path);
    if (*verify) return run_verify(suite_names, seed);
    if (*bench) {
      Output out(bench_out);
      return run_bench(attention_config(file, *bench, bench_args), bench_lengths, out.stream());
    }
    if (*trace) {
      Output out(trace_out);
      return run_gate_trace(attention_config(file, *trace, trace_args), trace_n, seed, out.stream());
    }
    if (*fit) return run_fit(fit_input);
    if (*sweep) {
      sweep_options.strict = !sweep_lenient;
      sweep_options.forward_check = sweep_forward;
      sweep_options.seed = seed;
      if (sweep_steps > 0) {
        moba::TrainSchedule s;
        s.total_steps = sweep_steps;
        s.seed = seed;
        sweep_options.train = s;
        sweep_options.corpus = moba::synthetic_corpus(std::max<std::size_t>(4 * sweep_n, 512), seed);
      }
      print_ops_note();
      Output out(sweep_out);
      out.stream() << moba::sweep_csv_header() << '\n';
      for (const auto& row : moba::segmentation_sweep(sweep_n, sweep_target, sweep_blocks, sweep_options)) {
        out.stream() << moba::to_csv_row(row) << '\n';
      }
      return 0;
    }
    if (*train) {
      const auto given = [&](const char* flag) { return train->count(flag) > 0; };
      if (!given("--layers")) from_config(file, "model", "num_layers", stack.num_layers);
      if (!given("--d-model")) from_config(file, "model", "d_model", stack.d_model);
      if (!given("--heads")) from_config(file, "model", "num_heads", stack.num_heads);
      if (!given("--ffn")) from_config(file, "model", "ffn_width", stack.ffn_width);
      if (!given("--block-size")) from_config(file, "model", "block_size", stack.block_size);
      if (!given("--topk")) from_config(file, "model", "top_k", stack.top_k);
      from_config(file, "model", "vocab_size", stack.vocab_size);
      from_config(file, "model", "max_context", stack.max_context);
      from_config(file, "model", "scale", stack.scale);
      if (!given("--steps")) from_config(file, "schedule", "total_steps", schedule.total_steps);
      if (!given("--batch")) from_config(file, "schedule", "batch_size", schedule.batch_size);
      if (!given("--seq-len")) from_config(file, "schedule", "seq_len", schedule.seq_len);
      if (!given("--switch-fraction")) {
        from_config(file, "schedule", "switch_fraction", schedule.switch_fraction);
      }
      if (!given("--lr")) from_config(file, "schedule", "learning_rate", schedule.adam.learning_rate);
      if (!given("--layer-mode")) from_config(file, "model", "layer_mode", layer_mode);
      if (!given("--full-layers")) from_config(file, "model", "full_layers", full_layers);
      schedule.seed = seed;

      const moba::LayerMode base = moba::parse_layer_mode(layer_mode);
      if (full_layers > stack.num_layers) throw UsageError("--full-layers exceeds --layers");
      stack.modes.assign(stack.num_layers, base);
      for (std::size_t l = stack.num_layers - full_layers; l < stack.num_layers; ++l) {
        stack.modes[l] = moba::LayerMode::full;
      }
      stack.max_context = std::max(stack.max_context, schedule.seq_len);

      const std::vector<std::size_t> corpus = corpus_path.empty()
                                                  ? moba::synthetic_corpus(corpus_tokens, seed)
                                                  : moba::load_text_corpus(corpus_path);
      moba::TrainOptions options;
      if (!checkpoint.empty()) options.checkpoint_path = checkpoint;
      const moba::TrainResult result = moba::train_run(corpus, stack, schedule, options);
      if (result.switch_step) {
        std::cerr << "switched to full attention at step " << *result.switch_step << '\n';
      }
      Output out(loss_csv);
      moba::write_loss_csv(out.stream(), result.records);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const moba::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const moba::ParameterError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const moba::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsageError;
}
