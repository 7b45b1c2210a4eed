#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "quack/errors.hpp"
#include "quack/harness.hpp"
#include "quack/lemma.hpp"

using namespace quack;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(const std::string& extra = "") {
  return parse_run_config(
      "seed = 3\n"
      "steps = 6\n"
      "batch = 2\n"
      "seq_len = 16\n"
      "n_layer = 1\n"
      "corpus_length = 4096\n"
      "probe_interval = 2\n" +
      extra);
}

std::vector<double> flat_params(const ModelParams& p) {
  std::vector<double> out;
  for_each_param(p, [&](const ParamInfo&, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("quack_test_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

// The training loop rebuilt from library pieces: same corpus, batch stream,
// learning rates and optimizer, no probing.
ModelParams hand_loop(const RunConfig& cfg_in) {
  const RunConfig cfg = resolve(cfg_in);
  const std::uint64_t seed = *cfg.seed;
  ModelParams params = init_params(cfg.model, seed);
  const auto corpus = generate_corpus(cfg.corpus);
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - cfg.seq_len);
  LrPlan plan;
  const bool quack = cfg.intervention.kind == InterventionKind::kQuack;
  if (quack) plan = quack_init(params, cfg.intervention.norm, cfg.intervention.tau);
  Optimizer opt(cfg.optimizer);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    TokenBatch b{cfg.batch, cfg.seq_len, {}};
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const std::size_t o = offset(rng);
      b.tokens.insert(b.tokens.end(), corpus.begin() + static_cast<std::ptrdiff_t>(o),
                      corpus.begin() + static_cast<std::ptrdiff_t>(o + cfg.seq_len));
    }
    const LossAndGrads lg = loss_and_grads(params, cfg.model, b);
    const double eta = cfg.schedule.lr_at(step);
    const LrMap lrs = quack ? quack_step(params, plan, eta) : uniform_lrs(params, eta);
    opt.apply_step(params, lg.grads, lrs);
  }
  return params;
}

}  // namespace

TEST_CASE("copy corpus has the doubled-segment layout") {
  CorpusSpec spec;
  spec.vocab_size = 20;
  spec.length = 20000;
  spec.seed = 8;
  const auto c = generate_corpus(spec);
  REQUIRE(c.size() == spec.length);
  CHECK(c == generate_corpus(spec));
  std::size_t i = 0, segments = 0;
  while (true) {
    std::size_t n = 0;
    while (i + n < c.size() && c[i + n] != 0) {
      CHECK(c[i + n] >= 1);
      CHECK(c[i + n] < 20);
      ++n;
    }
    if (i + 2 * n + 2 > c.size()) break;
    CHECK(n >= spec.copy_min);
    CHECK(n <= spec.copy_max);
    for (std::size_t k = 0; k < n; ++k) REQUIRE(c[i + n + 1 + k] == c[i + k]);
    REQUIRE(c[i + 2 * n + 1] == 0);
    i += 2 * n + 2;
    ++segments;
  }
  CHECK(segments > 500);
  spec.seed = 9;
  CHECK(generate_corpus(spec) != c);
}

TEST_CASE("markov corpus transitions follow the table") {
  CorpusSpec spec;
  spec.kind = CorpusKind::kMarkov;
  spec.vocab_size = 12;
  spec.length = 1000000;
  spec.seed = 5;
  spec.markov_alpha = 0.5;
  const auto table = markov_table(spec);
  REQUIRE(table.size() == 12);
  for (const auto& row : table) {
    double s = 0.0;
    for (double p : row) s += p;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto c = generate_corpus(spec);
  std::vector<std::vector<double>> counts(12, std::vector<double>(12, 0.0));
  for (std::size_t i = 0; i + 1 < c.size(); ++i) counts[static_cast<std::size_t>(c[i])][static_cast<std::size_t>(c[i + 1])] += 1.0;

  // Pearson statistic per row, cells with expected count below 5 pooled.
  double chi2 = 0.0;
  std::size_t dof = 0;
  for (std::size_t a = 0; a < 12; ++a) {
    double n = 0.0;
    for (double v : counts[a]) n += v;
    std::size_t cells = 0;
    double pool_obs = 0.0, pool_exp = 0.0;
    for (std::size_t b = 0; b < 12; ++b) {
      const double e = n * table[a][b];
      if (e < 5.0) {
        pool_obs += counts[a][b];
        pool_exp += e;
        continue;
      }
      chi2 += (counts[a][b] - e) * (counts[a][b] - e) / e;
      ++cells;
    }
    if (pool_exp > 0.0) {
      chi2 += (pool_obs - pool_exp) * (pool_obs - pool_exp) / pool_exp;
      ++cells;
    }
    if (cells > 1) dof += cells - 1;
  }
  REQUIRE(dof > 50);
  const double d = static_cast<double>(dof);
  CHECK(chi2 < d + 5.0 * std::sqrt(2.0 * d));
}

TEST_CASE("run config text parsing") {
  const RunConfig c = tiny("intervention = quack\ntau = 0.1 # inline comment\nnorm = spectral\n");
  CHECK(c.intervention.kind == InterventionKind::kQuack);
  CHECK(c.intervention.tau == 0.1);
  CHECK(c.intervention.norm == NormKind::kSpectral);
  CHECK(c.model.n_layer == 1);

  const RunConfig back = parse_run_config(format_run_config(c));
  CHECK(format_run_config(back) == format_run_config(c));
  CHECK(run_config_entries(back) == run_config_entries(c));

  CHECK_THROWS_WITH_AS(parse_run_config("steps = 4\nbogus = 1\n"), doctest::Contains("line 2"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("steps 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("steps = -4\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("intervention = magic\n"), ConfigError);

  RunConfig o = tiny();
  apply_override(o, "lr=0.02");
  CHECK(o.schedule.base_lr == 0.02);
  CHECK_THROWS_AS(apply_override(o, "lr"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "nope=1"), ConfigError);

  const auto dir = scratch("config");
  fs::create_directories(dir);
  write_text_file(dir / "run.txt", format_run_config(c));
  CHECK(format_run_config(load_run_config(dir / "run.txt")) == format_run_config(c));
  CHECK_THROWS_AS(load_run_config(dir / "missing.txt"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("validation and resolution") {
  RunConfig c = tiny();
  c.seed.reset();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(run_training(c), ConfigError);

  RunConfig q = tiny("intervention = qk_norm\n");
  CHECK_THROWS_AS(q.validate(), ConfigError);
  const RunConfig r = resolve(q);
  CHECK(r.model.attention.qk_norm);
  CHECK_NOTHROW(r.validate());
  CHECK(r.corpus.seed == 3);
  CHECK(r.corpus.vocab_size == r.model.vocab_size);
  CHECK(resolve(tiny("corpus_seed = 44\n")).corpus.seed == 44);

  CHECK_THROWS_AS(resolve(tiny("seq_len = 65\n")).validate(), ConfigError);
  CHECK_THROWS_AS(resolve(tiny("tracked_heads = L1H0\n")).validate(), ConfigError);
  CHECK_THROWS_AS(resolve(tiny("corpus_length = 16\n")).validate(), ConfigError);
}

TEST_CASE("training runs are reproducible to the byte") {
  const RunConfig c = tiny("intervention = quack\ntau = 0.5\n");
  const RunResult a = run_training(c);
  const RunResult b = run_training(c);
  CHECK_FALSE(a.unstable);
  CHECK(a.steps_completed == 6);
  // rows at steps 0, 2, 4 and the final step 5
  REQUIRE(a.metrics.rows.size() == 4);
  CHECK(a.metrics.rows.back().step == 5);
  CHECK_FALSE(a.metrics.rows[0].delta_logit[0].has_value());
  CHECK(a.metrics.rows[1].delta_logit[0].has_value());
  CHECK(a.final_loss() == a.metrics.rows.back().loss);
  CHECK(a.final_loss() == a.last_train_loss);

  const auto da = scratch("repro_a"), db = scratch("repro_b");
  write_run_outputs(a, da);
  write_run_outputs(b, db);
  for (const char* f : {"metrics.csv", "config.txt", "checkpoint.txt"}) {
    INFO(f);
    CHECK(slurp(da / f) == slurp(db / f));
  }
  const auto [mcfg, mparams] = load_checkpoint(da / "checkpoint.txt");
  CHECK(flat_params(mparams) == flat_params(a.params));
  CHECK(slurp(da / "config.txt").find("# status = ok") != std::string::npos);
  fs::remove_all(da);
  fs::remove_all(db);

  RunConfig other = c;
  other.seed = 4;
  CHECK(flat_params(run_training(other).params) != flat_params(a.params));
}

TEST_CASE("interventions act only through their learning rates") {
  for (const char* extra : {"intervention = none\n", "intervention = quack\ntau = 0.3\n",
                            "intervention = quack\ntau = 0.3\nnorm = spectral\nattention = mla\n"}) {
    INFO(extra);
    RunConfig c = tiny(extra);
    c.probe_interval = 0;
    CHECK(flat_params(run_training(c).params) == flat_params(hand_loop(c)));
  }
}

TEST_CASE("QuacK with tau = 1 matches the baseline on its first step") {
  for (const char* attn : {"mha", "mla"}) {
    INFO(attn);
    const std::string base = std::string("steps = 1\nattention = ") + attn + "\n";
    const RunResult none = run_training(tiny(base));
    const RunResult quack = run_training(tiny(base + "intervention = quack\ntau = 1\n"));
    CHECK(flat_params(none.params) == flat_params(quack.params));
    const RunResult smaller = run_training(tiny(base + "intervention = quack\ntau = 0.5\n"));
    CHECK(flat_params(none.params) != flat_params(smaller.params));
  }
}

TEST_CASE("instability stops the run and is reported") {
  const RunResult r = run_training(tiny("instability_ceiling = 1e-6\n"));
  CHECK(r.unstable);
  CHECK(r.steps_completed == 0);
  CHECK(r.instability.find("above ceiling") != std::string::npos);
  REQUIRE(r.metrics.rows.size() == 1);
  CHECK(std::isnan(r.metrics.rows[0].lrs[0]));
  CHECK_FALSE(r.metrics.rows[0].delta_logit[0].has_value());
  CHECK(r.metrics.rows[0].max_logit[0] > 1e-6);
  CHECK(flat_params(r.params) == flat_params(init_params(r.config.model, 3)));
}

TEST_CASE("sweep grid expansion and execution") {
  const SweepSpec spec = parse_sweep_config(format_run_config(tiny()) +
                                            "sweep.intervention = none, quack\n"
                                            "sweep.seed = 1, 2, 3\n");
  const auto grid = expand_grid(spec);
  REQUIRE(grid.size() == 6);
  CHECK(grid[0].label == "intervention=none;seed=1");
  CHECK(grid[5].label == "intervention=quack;seed=3");
  CHECK(grid[4].config.intervention.kind == InterventionKind::kQuack);
  CHECK(*grid[4].config.seed == 2);
  CHECK(expand_grid(parse_sweep_config("seed = 1\n")).front().label == "base");
  CHECK_THROWS_AS(parse_sweep_config("sweep.lr = 0.1, x\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("sweep.lr = 0.1\nsweep.lr = 0.2\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("sweep.lr = 0.1,\n"), ConfigError);

  const auto dir = scratch("sweep");
  std::vector<SweepRun> runs{{"good", tiny()}, {"bad", tiny("tracked_heads = L5H0\n")}};
  const auto rows = run_sweep(runs, dir, 2);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].status == "ok");
  const MetricsTable m = read_metrics_csv(dir / "run_0" / "metrics.csv");
  CHECK(rows[0].final_loss == m.rows.back().loss);
  CHECK(rows[0].final_max_logit == m.rows.back().max_logit.front());
  CHECK(rows[1].status == "failed");
  CHECK(rows[1].error.find("out of range") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "run_1"));

  const std::string csv = format_sweep_csv(rows);
  CHECK(csv.rfind("run,label,attention,intervention,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(format_sweep_csv(run_sweep({runs[0]}, dir, 1)) ==
        format_sweep_csv(std::vector<SweepRow>{rows[0]}));
  CHECK_THROWS_AS(run_sweep({}, dir), ConfigError);
  fs::remove_all(dir);
}
