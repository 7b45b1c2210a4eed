#include "quack/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "quack/errors.hpp"
#include "quack/lemma.hpp"
#include "quack/text.hpp"

namespace quack {

namespace {

constexpr std::uint64_t kBatchStream = 1;
constexpr std::uint64_t kProbeStream = 2;

bool finite(double v) { return std::isfinite(v); }

std::size_t parse_size(const std::string& key, const std::string& value, bool allow_zero) {
  const long long v = text::parse_int(value);
  if (v < 0 || (!allow_zero && v == 0)) throw ConfigError(key + " must be " + (allow_zero ? "non-negative" : "positive"));
  return static_cast<std::size_t>(v);
}

double parse_positive(const std::string& key, const std::string& value) {
  const double v = text::parse_double(value);
  if (!(v > 0.0) || !finite(v)) throw ConfigError(key + " must be positive and finite");
  return v;
}

double parse_unit(const std::string& key, const std::string& value) {
  const double v = text::parse_double(value);
  if (!(v >= 0.0 && v < 1.0)) throw ConfigError(key + " must lie in [0, 1)");
  return v;
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
  const long long v = text::parse_int(value);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::uint64_t>(v);
}

std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

std::string_view to_string(CorpusKind k) { return k == CorpusKind::kCopy ? "copy" : "markov"; }

CorpusKind parse_corpus_kind(std::string_view text) {
  if (text == "copy") return CorpusKind::kCopy;
  if (text == "markov") return CorpusKind::kMarkov;
  throw ConfigError("corpus must be copy|markov, got '" + std::string(text) + "'");
}

std::vector<std::vector<double>> markov_table(const CorpusSpec& spec) {
  std::mt19937_64 rng(derive_seed(spec.seed, 0));
  std::gamma_distribution<double> gamma(spec.markov_alpha, 1.0);
  std::vector<std::vector<double>> table(spec.vocab_size, std::vector<double>(spec.vocab_size));
  for (auto& row : table) {
    double sum = 0.0;
    for (double& p : row) sum += (p = gamma(rng));
    if (!(sum > 0.0)) {
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(row.size()));
      continue;
    }
    for (double& p : row) p /= sum;
  }
  return table;
}

std::vector<std::int32_t> generate_corpus(const CorpusSpec& spec) {
  if (spec.vocab_size < 2) throw ConfigError("corpus vocab must be at least 2");
  std::vector<std::int32_t> out;
  out.reserve(spec.length);
  std::mt19937_64 rng(derive_seed(spec.seed, 1));
  if (spec.kind == CorpusKind::kMarkov) {
    const auto table = markov_table(spec);
    std::vector<std::discrete_distribution<std::int32_t>> rows;
    rows.reserve(table.size());
    for (const auto& row : table) rows.emplace_back(row.begin(), row.end());
    std::uniform_int_distribution<std::int32_t> first(0, static_cast<std::int32_t>(spec.vocab_size) - 1);
    std::int32_t tok = first(rng);
    while (out.size() < spec.length) {
      out.push_back(tok);
      tok = rows[static_cast<std::size_t>(tok)](rng);
    }
    return out;
  }
  if (spec.copy_min == 0 || spec.copy_min > spec.copy_max) throw ConfigError("copy segment lengths need 1 <= min <= max");
  std::uniform_int_distribution<std::size_t> len(spec.copy_min, spec.copy_max);
  std::uniform_int_distribution<std::int32_t> tok(1, static_cast<std::int32_t>(spec.vocab_size) - 1);
  std::vector<std::int32_t> seg;
  while (out.size() < spec.length) {
    seg.resize(len(rng));
    for (auto& t : seg) t = tok(rng);
    for (int copy = 0; copy < 2; ++copy) {
      out.insert(out.end(), seg.begin(), seg.end());
      out.push_back(0);
    }
  }
  out.resize(spec.length);
  return out;
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ConfigError("seed is mandatory");
  return *seed;
}

void RunConfig::validate() const {
  require_seed();
  model.validate();
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (seq_len < 2 || seq_len > model.context_length)
    throw ConfigError("seq_len must lie in [2, context_length]");
  if (probe_batch == 0) throw ConfigError("probe_batch must be positive");
  if (!(schedule.base_lr > 0.0) || !finite(schedule.base_lr)) throw ConfigError("lr must be positive");
  if (!(intervention.tau > 0.0) || !(intervention.tau_clip > 0.0)) throw ConfigError("tau and tau_clip must be positive");
  if (!(instability_ceiling > 0.0)) throw ConfigError("instability_ceiling must be positive");
  if (corpus.length < seq_len + 1) throw ConfigError("corpus_length must exceed seq_len");
  if (corpus.kind == CorpusKind::kCopy && (corpus.copy_min == 0 || corpus.copy_min > corpus.copy_max))
    throw ConfigError("copy segment lengths need 1 <= copy_min <= copy_max");
  if (optimizer.muon.ns_steps < 0 || optimizer.muon.ns_polish_steps < 0)
    throw ConfigError("Newton-Schulz step counts must be non-negative");
  if (intervention.kind == InterventionKind::kQkNorm && !model.attention.qk_norm)
    throw ConfigError("qk_norm intervention requires qk_norm in the model");
  parse_tracked_heads(tracked_heads, model);
}

RunConfig resolve(RunConfig cfg) {
  if (cfg.intervention.kind == InterventionKind::kQkNorm) cfg.model.attention.qk_norm = true;
  cfg.corpus.vocab_size = cfg.model.vocab_size;
  if (cfg.seed) cfg.corpus.seed = cfg.corpus_seed.value_or(*cfg.seed);
  return cfg;
}

void apply_run_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (apply_model_config_entry(cfg.model, key, value)) return;
    if (key == "intervention") cfg.intervention.kind = parse_intervention_kind(value);
    else if (key == "tau") cfg.intervention.tau = parse_positive(key, value);
    else if (key == "tau_clip") cfg.intervention.tau_clip = parse_positive(key, value);
    else if (key == "norm") cfg.intervention.norm = parse_norm_kind(value);
    else if (key == "lr") cfg.schedule.base_lr = parse_positive(key, value);
    else if (key == "warmup") cfg.schedule.warmup_steps = parse_size(key, value, true);
    else if (key == "steps") cfg.steps = parse_size(key, value, false);
    else if (key == "batch") cfg.batch = parse_size(key, value, false);
    else if (key == "seq_len") cfg.seq_len = parse_size(key, value, false);
    else if (key == "seed") cfg.seed = parse_seed(key, value);
    else if (key == "probe_interval") cfg.probe_interval = parse_size(key, value, true);
    else if (key == "probe_batch") cfg.probe_batch = parse_size(key, value, false);
    else if (key == "tracked_heads") cfg.tracked_heads = value;
    else if (key == "instability_ceiling") cfg.instability_ceiling = parse_positive(key, value);
    else if (key == "corpus") cfg.corpus.kind = parse_corpus_kind(value);
    else if (key == "corpus_length") cfg.corpus.length = parse_size(key, value, false);
    else if (key == "corpus_seed") cfg.corpus_seed = parse_seed(key, value);
    else if (key == "copy_min") cfg.corpus.copy_min = parse_size(key, value, false);
    else if (key == "copy_max") cfg.corpus.copy_max = parse_size(key, value, false);
    else if (key == "markov_alpha") cfg.corpus.markov_alpha = parse_positive(key, value);
    else if (key == "muon_momentum") cfg.optimizer.muon.momentum = parse_unit(key, value);
    else if (key == "muon_nesterov") cfg.optimizer.muon.nesterov = text::parse_bool(value);
    else if (key == "ns_steps") cfg.optimizer.muon.ns_steps = static_cast<int>(parse_size(key, value, true));
    else if (key == "ns_polish_steps") cfg.optimizer.muon.ns_polish_steps = static_cast<int>(parse_size(key, value, true));
    else if (key == "adam_beta1") cfg.optimizer.adam.beta1 = parse_unit(key, value);
    else if (key == "adam_beta2") cfg.optimizer.adam.beta2 = parse_unit(key, value);
    else if (key == "adam_eps") cfg.optimizer.adam.eps = parse_positive(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad value '" + value + "' for " + key + ": " + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> run_config_entries(const RunConfig& cfg) {
  auto entries = model_config_entries(cfg.model);
  const auto d = [](double v) { return text::format_double(v); };
  const auto n = [](std::size_t v) { return std::to_string(v); };
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  const std::vector<std::pair<std::string, std::string>> rest = {
      {"intervention", std::string(to_string(cfg.intervention.kind))},
      {"tau", d(cfg.intervention.tau)},
      {"tau_clip", d(cfg.intervention.tau_clip)},
      {"norm", std::string(to_string(cfg.intervention.norm))},
      {"lr", d(cfg.schedule.base_lr)},
      {"warmup", n(cfg.schedule.warmup_steps)},
      {"steps", n(cfg.steps)},
      {"batch", n(cfg.batch)},
      {"seq_len", n(cfg.seq_len)},
      {"probe_interval", n(cfg.probe_interval)},
      {"probe_batch", n(cfg.probe_batch)},
      {"tracked_heads", cfg.tracked_heads},
      {"instability_ceiling", d(cfg.instability_ceiling)},
      {"corpus", std::string(to_string(cfg.corpus.kind))},
      {"corpus_length", n(cfg.corpus.length)},
      {"copy_min", n(cfg.corpus.copy_min)},
      {"copy_max", n(cfg.corpus.copy_max)},
      {"markov_alpha", d(cfg.corpus.markov_alpha)},
      {"muon_momentum", d(cfg.optimizer.muon.momentum)},
      {"muon_nesterov", b(cfg.optimizer.muon.nesterov)},
      {"ns_steps", std::to_string(cfg.optimizer.muon.ns_steps)},
      {"ns_polish_steps", std::to_string(cfg.optimizer.muon.ns_polish_steps)},
      {"adam_beta1", d(cfg.optimizer.adam.beta1)},
      {"adam_beta2", d(cfg.optimizer.adam.beta2)},
      {"adam_eps", d(cfg.optimizer.adam.eps)},
  };
  entries.insert(entries.end(), rest.begin(), rest.end());
  if (cfg.seed) entries.emplace_back("seed", std::to_string(*cfg.seed));
  if (cfg.corpus_seed) entries.emplace_back("corpus_seed", std::to_string(*cfg.corpus_seed));
  return entries;
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : run_config_entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

namespace {

// Calls f(line_number, key, value) for every non-blank line.
template <class F>
void for_each_entry(const std::string& text_in, F&& f) {
  std::istringstream is(text_in);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key(text::trim(line.substr(0, eq)));
    const std::string value(text::trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    f(line_no, key, value);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text_in, RunConfig base) {
  for_each_entry(text_in, [&](std::size_t line_no, const std::string& key, const std::string& value) {
    try {
      apply_run_config_entry(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text_file(path)); }

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: '" + assignment + "'");
  apply_run_config_entry(cfg, std::string(text::trim(std::string_view(assignment).substr(0, eq))),
                         std::string(text::trim(std::string_view(assignment).substr(eq + 1))));
}

double RunResult::final_loss() const {
  return metrics.rows.empty() ? last_train_loss : metrics.rows.back().loss;
}

double RunResult::final_max_logit() const {
  if (metrics.rows.empty() || metrics.rows.back().max_logit.empty()) return std::numeric_limits<double>::quiet_NaN();
  return metrics.rows.back().max_logit.front();
}

double RunResult::mean_delta_logit() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : metrics.rows) {
    if (row.delta_logit.empty() || !row.delta_logit.front()) continue;
    sum += *row.delta_logit.front();
    ++n;
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

namespace {

TokenBatch sample_batch(const std::vector<std::int32_t>& corpus, std::size_t batch, std::size_t seq,
                        std::mt19937_64& rng) {
  TokenBatch out{batch, seq, {}};
  out.tokens.reserve(batch * seq);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t o = offset(rng);
    out.tokens.insert(out.tokens.end(), corpus.begin() + static_cast<std::ptrdiff_t>(o),
                      corpus.begin() + static_cast<std::ptrdiff_t>(o + seq));
  }
  return out;
}

}  // namespace

RunResult run_training(const RunConfig& cfg_in, const TrainingHooks& hooks) {
  const RunConfig cfg = resolve(cfg_in);
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  const auto start = std::chrono::steady_clock::now();

  RunResult result;
  result.config = cfg;
  result.params = init_params(cfg.model, seed);
  ModelParams& params = result.params;

  const auto corpus = generate_corpus(cfg.corpus);
  std::mt19937_64 batch_rng(derive_seed(seed, kBatchStream));
  std::mt19937_64 probe_rng(derive_seed(seed, kProbeStream));
  const auto heads = parse_tracked_heads(cfg.tracked_heads, cfg.model);
  ProbeState probe(sample_batch(corpus, cfg.probe_batch, cfg.seq_len, probe_rng), heads);

  const auto columns = lr_columns(cfg.model, heads);
  result.metrics.schema.heads = heads;
  for (const auto& c : columns) result.metrics.schema.lr_columns.push_back(c.column);

  InterventionPolicy policy(cfg.intervention, cfg.model, params);
  Optimizer optimizer(cfg.optimizer);
  const bool clipping = cfg.intervention.kind == InterventionKind::kQkClip;
  const bool clip_hook = clipping && static_cast<bool>(hooks.on_clip);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const TokenBatch batch = sample_batch(corpus, cfg.batch, cfg.seq_len, batch_rng);
    ForwardTrace trace;
    LossAndGrads lg = loss_and_grads(params, cfg.model, batch, clip_hook ? &trace : nullptr);
    result.last_train_loss = lg.loss;

    double worst = -std::numeric_limits<double>::infinity();
    bool non_finite_logit = false;
    for (const auto& layer : lg.max_logit)
      for (double v : layer) {
        if (!finite(v)) non_finite_logit = true;
        worst = std::max(worst, v);
      }
    if (!finite(lg.loss) || non_finite_logit || worst > cfg.instability_ceiling) {
      result.unstable = true;
      std::ostringstream why;
      why << "step " << step << ": ";
      if (!finite(lg.loss)) why << "non-finite loss";
      else if (non_finite_logit) why << "non-finite attention logit";
      else why << "max logit " << text::format_double(worst) << " above ceiling";
      result.instability = why.str();
      MetricsRow row;
      row.step = step;
      row.loss = lg.loss;
      row.base_lr = cfg.schedule.lr_at(step);
      row.lrs.assign(columns.size(), nan);
      for (const auto& h : heads)
        row.max_logit.push_back(lg.max_logit[static_cast<std::size_t>(h.layer)][static_cast<std::size_t>(h.head)]);
      row.delta_logit.assign(heads.size(), std::nullopt);
      result.metrics.rows.push_back(std::move(row));
      break;
    }

    const double eta = cfg.schedule.lr_at(step);
    const LrMap lrs = policy.learning_rates(params, eta);
    if (hooks.on_lr) hooks.on_lr(LrHookInfo{step, eta, lrs, params, policy});

    std::optional<ModelParams> before;
    if (clip_hook) before = params;
    optimizer.apply_step(params, lg.grads, lrs);
    std::optional<ModelParams> after_step;
    if (clip_hook) after_step = params;
    const auto events = policy.after_step(params, lg.max_logit);
    if (clip_hook && !events.empty())
      hooks.on_clip(ClipHookInfo{step, events, *before, *after_step, params, batch, trace});
    result.steps_completed = step + 1;

    const bool last = step + 1 == cfg.steps;
    if (cfg.probe_interval > 0 && (step % cfg.probe_interval == 0 || last)) {
      const ProbeStats stats = probe_logit_stats(params, cfg.model, probe);
      MetricsRow row;
      row.step = step;
      row.loss = lg.loss;
      row.base_lr = eta;
      for (const auto& c : columns) row.lrs.push_back(lrs.at(c.param));
      row.max_logit = stats.max_logit;
      row.delta_logit = stats.mean_abs_delta;
      result.metrics.rows.push_back(std::move(row));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void write_run_outputs(const RunResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  if (!result.metrics.rows.empty()) write_metrics_csv(dir / "metrics.csv", result.metrics);
  std::string cfg = format_run_config(result.config);
  cfg += "# status = " + std::string(result.unstable ? "unstable (" + result.instability + ")" : "ok") + "\n";
  write_text_file(dir / "config.txt", cfg);
  save_checkpoint(dir / "checkpoint.txt", result.config.model, result.params);
}

SweepSpec parse_sweep_config(const std::string& text_in) {
  SweepSpec spec;
  for_each_entry(text_in, [&](std::size_t line_no, const std::string& key, const std::string& value) {
    try {
      if (key.rfind("sweep.", 0) == 0) {
        const std::string target = key.substr(6);
        std::vector<std::string> values;
        for (const auto& v : text::split(value, ',')) {
          const std::string t(text::trim(v));
          if (t.empty()) throw ConfigError("empty value in sweep axis " + target);
          RunConfig probe = spec.base;
          apply_run_config_entry(probe, target, t);
          values.push_back(t);
        }
        if (values.empty()) throw ConfigError("sweep axis " + target + " has no values");
        for (const auto& axis : spec.axes)
          if (axis.first == target) throw ConfigError("duplicate sweep axis " + target);
        spec.axes.emplace_back(target, std::move(values));
      } else {
        apply_run_config_entry(spec.base, key, value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return spec;
}

std::vector<SweepRun> expand_grid(const SweepSpec& spec) {
  std::vector<SweepRun> out{{"", spec.base}};
  for (const auto& [key, values] : spec.axes) {
    std::vector<SweepRun> next;
    next.reserve(out.size() * values.size());
    for (const auto& run : out)
      for (const auto& v : values) {
        SweepRun r = run;
        apply_run_config_entry(r.config, key, v);
        r.label += (r.label.empty() ? "" : ";") + key + "=" + v;
        next.push_back(std::move(r));
      }
    out = std::move(next);
  }
  if (spec.axes.empty()) out.front().label = "base";
  return out;
}

std::vector<SweepRow> run_sweep(const std::vector<SweepRun>& grid, const std::filesystem::path& out, unsigned threads) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<SweepRow> rows(grid.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      SweepRow& row = rows[i];
      const RunConfig cfg = resolve(grid[i].config);
      row.index = i;
      row.label = grid[i].label;
      row.attention = std::string(to_string(cfg.model.attention.variant));
      row.intervention = std::string(to_string(cfg.intervention.kind));
      row.norm = std::string(to_string(cfg.intervention.norm));
      row.tau = cfg.intervention.tau;
      row.tau_clip = cfg.intervention.tau_clip;
      row.lr = cfg.schedule.base_lr;
      row.seed = cfg.seed.value_or(0);
      try {
        const RunResult r = run_training(cfg);
        write_run_outputs(r, out / ("run_" + std::to_string(i)));
        row.status = r.unstable ? "unstable" : "ok";
        row.error = r.instability;
        row.steps_completed = r.steps_completed;
        row.final_loss = r.final_loss();
        row.final_max_logit = r.final_max_logit();
        row.seconds = r.seconds;
      } catch (const std::exception& e) {
        row.status = "failed";
        row.error = e.what();
        row.final_loss = row.final_max_logit = std::numeric_limits<double>::quiet_NaN();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, grid.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return rows;
}

std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "run,label,attention,intervention,norm,tau,tau_clip,lr,seed,status,steps_completed,final_loss,final_max_logit,"
      "note\n";
  const auto d = [](double v) { return text::format_double(v); };
  for (const auto& r : rows) {
    out += std::to_string(r.index) + "," + csv_safe(r.label) + "," + r.attention + "," + r.intervention + "," +
           r.norm + "," + d(r.tau) + "," + d(r.tau_clip) + "," + d(r.lr) + "," + std::to_string(r.seed) + "," +
           r.status + "," + std::to_string(r.steps_completed) + "," + d(r.final_loss) + "," + d(r.final_max_logit) +
           "," + csv_safe(r.error) + "\n";
  }
  return out;
}

std::string format_sweep_timings(const std::vector<SweepRow>& rows) {
  std::string out = "run,label,status,steps_completed,seconds,ms_per_step\n";
  for (const auto& r : rows) {
    const double per = r.steps_completed ? 1e3 * r.seconds / static_cast<double>(r.steps_completed) : 0.0;
    std::ostringstream os;
    os.precision(6);
    os << r.index << ',' << csv_safe(r.label) << ',' << r.status << ',' << r.steps_completed << ',' << r.seconds << ','
       << per << '\n';
    out += os.str();
  }
  return out;
}

}  // namespace quack
