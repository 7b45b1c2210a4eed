#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "quack/interventions.hpp"
#include "quack/model.hpp"
#include "quack/optim.hpp"
#include "quack/telemetry.hpp"

namespace quack {

enum class CorpusKind { kCopy, kMarkov };

std::string_view to_string(CorpusKind k);
CorpusKind parse_corpus_kind(std::string_view text);

struct CorpusSpec {
  CorpusKind kind = CorpusKind::kCopy;
  std::size_t vocab_size = 256;
  std::size_t length = 1 << 18;
  std::uint64_t seed = 0;
  // copy task: random segments of [copy_min, copy_max] tokens, each emitted
  // twice, every copy followed by token 0 as delimiter
  std::size_t copy_min = 4;
  std::size_t copy_max = 16;
  // markov: first-order chain whose rows are Dirichlet(markov_alpha) draws
  double markov_alpha = 0.1;
};

// Row-stochastic transition table of the markov corpus.
std::vector<std::vector<double>> markov_table(const CorpusSpec& spec);
std::vector<std::int32_t> generate_corpus(const CorpusSpec& spec);

struct RunConfig {
  ModelConfig model;
  InterventionConfig intervention;
  OptimizerConfig optimizer;
  Schedule schedule;
  std::size_t steps = 500;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  std::optional<std::uint64_t> seed;
  std::size_t probe_interval = 10;  // 0 disables probing
  std::size_t probe_batch = 4;
  std::string tracked_heads = "default";
  double instability_ceiling = 1e6;  // max logit beyond which a run is stopped
  CorpusSpec corpus;
  std::optional<std::uint64_t> corpus_seed;  // defaults to the run seed

  // Throws ConfigError; also enables QK norm in the model for the qk_norm
  // intervention.
  void validate() const;
  std::uint64_t require_seed() const;
};

// The resolved config actually run: qk_norm intervention implies the
// architecture flag.
RunConfig resolve(RunConfig cfg);

// Flat "key = value" text, '#' starts a comment. Unknown keys are errors.
void apply_run_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::pair<std::string, std::string>> run_config_entries(const RunConfig& cfg);
std::string format_run_config(const RunConfig& cfg);
RunConfig parse_run_config(const std::string& text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);
// "key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);

struct LrHookInfo {
  std::size_t step;
  double eta;
  const LrMap& lrs;
  const ModelParams& params;
  const InterventionPolicy& policy;
};

struct ClipHookInfo {
  std::size_t step;
  const std::vector<ClipEvent>& events;
  const ModelParams& before_step;  // weights that produced S_max
  const ModelParams& after_step;   // after the optimizer, before the clip
  const ModelParams& after_clip;
  const TokenBatch& batch;
  const ForwardTrace& trace;  // attention inputs of the triggering forward
};

struct TrainingHooks {
  std::function<void(const LrHookInfo&)> on_lr;
  std::function<void(const ClipHookInfo&)> on_clip;
};

struct RunResult {
  RunConfig config;  // resolved
  ModelParams params;
  MetricsTable metrics;
  bool unstable = false;
  std::string instability;
  std::size_t steps_completed = 0;
  double last_train_loss = 0.0;
  double seconds = 0.0;

  double final_loss() const;       // loss of the last metrics row
  double final_max_logit() const;  // first tracked head, last row
  // Mean over rows of the first tracked head's |delta logit| (absent entries skipped).
  double mean_delta_logit() const;
};

RunResult run_training(const RunConfig& cfg, const TrainingHooks& hooks = {});

// metrics.csv, config.txt and checkpoint.txt under dir.
void write_run_outputs(const RunResult& result, const std::filesystem::path& dir);

// Sweep config: a run config plus "sweep.<key> = v1, v2, ..." axes expanded as
// a cartesian product in file order.
struct SweepSpec {
  RunConfig base;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
};
SweepSpec parse_sweep_config(const std::string& text);

struct SweepRun {
  std::string label;  // "key=value;key=value"
  RunConfig config;
};
std::vector<SweepRun> expand_grid(const SweepSpec& spec);

struct SweepRow {
  std::size_t index = 0;
  std::string label;
  std::string attention, intervention, norm;
  double tau = 0.0, tau_clip = 0.0, lr = 0.0;
  std::uint64_t seed = 0;
  std::string status;  // ok | unstable | failed
  std::size_t steps_completed = 0;
  double final_loss = 0.0;
  double final_max_logit = 0.0;
  double seconds = 0.0;
  std::string error;
};

// Runs every grid point (in parallel when threads > 1); outputs of run i go to
// out/run_<i>. A failing run is recorded and the sweep continues.
std::vector<SweepRow> run_sweep(const std::vector<SweepRun>& grid, const std::filesystem::path& out,
                                unsigned threads = 0);
std::string format_sweep_csv(const std::vector<SweepRow>& rows);
std::string format_sweep_timings(const std::vector<SweepRow>& rows);

}  // namespace quack
