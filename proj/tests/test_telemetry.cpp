#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "quack/errors.hpp"
#include "quack/harness.hpp"
#include "quack/telemetry.hpp"

using namespace quack;

namespace {

TokenBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(vocab) - 1);
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.tokens.push_back(tok(rng));
  return b;
}

Tensor rows_of(const Tensor& x, std::size_t first, std::size_t count) {
  Tensor out({count, x.cols()});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(first + i, j);
  return out;
}

// Causal logits of one MHA head without rope, straight from the weights.
std::vector<double> oracle_head_logits(const Tensor& x, const MhaWeights& w, std::size_t head, std::size_t seq,
                                       double scale) {
  std::vector<double> out;
  for (std::size_t s = 0; s * seq < x.rows(); ++s) {
    const Tensor xs = rows_of(x, s * seq, seq);
    const Tensor q = oracle::triple_loop_matmul(xs, w.wq[head]);
    const Tensor k = oracle::triple_loop_matmul(xs, w.wk[head]);
    const Tensor lg = oracle::triple_loop_matmul(q, oracle::naive_transpose(k));
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j <= i; ++j) out.push_back(lg(i, j) * scale);
  }
  return out;
}

std::vector<double> flat_params(const ModelParams& p) {
  std::vector<double> out;
  for_each_param(p, [&](const ParamInfo&, const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

MetricsTable sample_table() {
  MetricsTable t;
  t.schema.lr_columns = {"lr_wq_L1_H2", "lr_wk_L1_H2"};
  t.schema.heads = {{1, 2}, {0, 0}};
  t.rows.push_back({0, 5.5, 0.01, {0.02, 0.03}, {1.25, -0.5}, {std::nullopt, std::nullopt}});
  t.rows.push_back({10, 4.0 / 3.0, 0.02, {1e-7, 2.5e-3}, {3.0, 0.1}, {0.125, 1.0 / 7.0}});
  return t;
}

}  // namespace

TEST_CASE("tracked head selection") {
  ModelConfig m;
  m.n_layer = 3;
  m.attention.n_head = 4;
  CHECK(default_tracked_heads(m) == std::vector<TrackedHead>{{1, 2}});
  CHECK(parse_tracked_heads("default", m) == default_tracked_heads(m));
  CHECK(parse_tracked_heads("all", m).size() == 12);
  const auto heads = parse_tracked_heads("L2H3, L0H0", m);
  CHECK(heads == std::vector<TrackedHead>{{2, 3}, {0, 0}});
  CHECK(format_tracked_heads(heads) == "L2H3,L0H0");
  CHECK(parse_tracked_heads(format_tracked_heads(heads), m) == heads);
  CHECK_THROWS_AS(parse_tracked_heads("L3H0", m), ConfigError);
  CHECK_THROWS_AS(parse_tracked_heads("L0H4", m), ConfigError);
  CHECK_THROWS_AS(parse_tracked_heads("H1L0", m), ConfigError);
  CHECK_THROWS_AS(parse_tracked_heads("", m), ConfigError);
}

TEST_CASE("probe statistics match a full-tensor oracle") {
  ModelConfig m;
  m.attention.mha_rope = false;
  const ModelParams p0 = init_params(m, 11);
  ModelParams p1 = init_params(m, 12);
  const TokenBatch batch = random_batch(3, 16, m.vocab_size, 5);
  const std::vector<TrackedHead> heads{{1, 2}, {0, 3}};
  ProbeState probe(batch, heads);

  const auto oracle_for = [&](const ModelParams& p) {
    const Evaluation ev = evaluate(p, m, batch);
    std::vector<std::vector<double>> out;
    for (const auto& th : heads) {
      const auto& w = std::get<MhaWeights>(p.layers[static_cast<std::size_t>(th.layer)].attn);
      out.push_back(oracle_head_logits(ev.trace.attn_inputs[static_cast<std::size_t>(th.layer)], w,
                                       static_cast<std::size_t>(th.head), batch.seq, m.attention.logit_scale()));
    }
    return std::pair{ev, out};
  };

  const auto [ev0, ref0] = oracle_for(p0);
  const ProbeStats s0 = probe_logit_stats(p0, m, probe);
  REQUIRE(s0.max_logit.size() == heads.size());
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto lib = head_logits(p0, m, ev0.trace, batch.seq, heads[i]);
    REQUIRE(lib.size() == ref0[i].size());
    double worst = 0.0, mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < lib.size(); ++k) {
      worst = std::max(worst, std::abs(lib[k] - ref0[i][k]));
      mx = std::max(mx, ref0[i][k]);
    }
    CHECK(worst < 1e-12);
    CHECK(s0.max_logit[i] == doctest::Approx(mx).epsilon(1e-12));
    const auto& th = heads[i];
    CHECK(s0.max_logit[i] ==
          ev0.max_logit[static_cast<std::size_t>(th.layer)][static_cast<std::size_t>(th.head)]);
    CHECK_FALSE(s0.mean_abs_delta[i].has_value());
  }

  const auto [ev1, ref1] = oracle_for(p1);
  const ProbeStats s1 = probe_logit_stats(p1, m, probe);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < ref1[i].size(); ++k) acc += std::abs(ref1[i][k] - ref0[i][k]);
    REQUIRE(s1.mean_abs_delta[i].has_value());
    CHECK(*s1.mean_abs_delta[i] == doctest::Approx(acc / static_cast<double>(ref1[i].size())).epsilon(1e-10));
  }

  // Unchanged weights give zero change on the next probe.
  const ProbeStats s2 = probe_logit_stats(p1, m, probe);
  for (const auto& d : s2.mean_abs_delta) CHECK(*d == 0.0);
}

TEST_CASE("metrics CSV round-trips and rejects malformed input") {
  const MetricsTable t = sample_table();
  const std::string csv = format_metrics_csv(t);
  CHECK(csv.rfind("step,loss,", 0) == 0);
  const MetricsTable back = parse_metrics_csv(csv);
  CHECK(back.schema == t.schema);
  REQUIRE(back.rows.size() == t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    CHECK(back.rows[r].step == t.rows[r].step);
    CHECK(back.rows[r].loss == t.rows[r].loss);
    CHECK(back.rows[r].base_lr == t.rows[r].base_lr);
    CHECK(back.rows[r].lrs == t.rows[r].lrs);
    CHECK(back.rows[r].max_logit == t.rows[r].max_logit);
    CHECK(back.rows[r].delta_logit == t.rows[r].delta_logit);
  }
  CHECK(format_metrics_csv(back) == csv);

  const auto delta = back.column("delta_logit_L1_H2");
  CHECK(std::isnan(delta[0]));
  CHECK(delta[1] == 0.125);
  CHECK_THROWS_AS(back.column("nope"), ConfigError);

  CHECK_THROWS_AS(parse_metrics_csv(""), IoError);
  CHECK_THROWS_AS(parse_metrics_csv("step,loss\n1,abc\n"), IoError);
  std::string short_row = csv.substr(0, csv.find('\n') + 1) + "3,1.0\n";
  CHECK_THROWS_AS(parse_metrics_csv(short_row), IoError);

  const auto dir = std::filesystem::temp_directory_path() / "quack_test_telemetry";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", t);
  CHECK(format_metrics_csv(read_metrics_csv(dir / "metrics.csv")) == csv);
  MetricsTable empty;
  empty.schema = t.schema;
  CHECK_THROWS_AS(write_metrics_csv(dir / "empty.csv", empty), ConfigError);
  CHECK_THROWS_AS(read_metrics_csv(dir / "missing.csv"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("SVG rendering is deterministic and splits at gaps") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  PlotSeries a{"a", {0, 1, 2, 3, 4}, {1, 2, nan, 4, 5}};
  PlotSeries b{"b<&>", {0, 1, 2}, {3, 2, 1}};
  const std::string svg = render_svg({a, b}, {.title = "t", .y_label = "y"});
  CHECK(svg == render_svg({a, b}, {.title = "t", .y_label = "y"}));
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("b&lt;&amp;&gt;") != std::string::npos);

  const auto first_path = svg.find(" d=\"");
  const std::string d = svg.substr(first_path + 4, svg.find('"', first_path + 4) - first_path - 4);
  std::size_t moves = 0, lines = 0;
  for (char c : d) {
    moves += c == 'M';
    lines += c == 'L';
  }
  CHECK(moves == 2);
  CHECK(lines == 2);

  // Non-positive values drop out on a log axis.
  PlotSeries c{"c", {0, 1, 2}, {1, 0, 10}};
  PlotOptions log_axis;
  log_axis.log_y = true;
  const std::string log_svg = render_svg({c}, log_axis);
  const auto p = log_svg.find(" d=\"");
  const std::string dl = log_svg.substr(p + 4, log_svg.find('"', p + 4) - p - 4);
  CHECK(std::count(dl.begin(), dl.end(), 'M') == 2);
  CHECK(std::count(dl.begin(), dl.end(), 'L') == 0);

  CHECK_THROWS_AS(emit_plot_svg(sample_table(), {}, {}, "unused.svg"), ConfigError);
}

TEST_CASE("probing leaves training untouched") {
  RunConfig cfg;
  cfg.seed = 4;
  cfg.steps = 6;
  cfg.batch = 2;
  cfg.seq_len = 16;
  cfg.model.n_layer = 1;
  cfg.corpus.length = 4096;
  RunConfig quiet = cfg;
  cfg.probe_interval = 1;
  quiet.probe_interval = 0;
  const RunResult probed = run_training(cfg);
  const RunResult plain = run_training(quiet);
  CHECK(flat_params(probed.params) == flat_params(plain.params));
  CHECK(probed.last_train_loss == plain.last_train_loss);
  CHECK(probed.metrics.rows.size() == 6);
  CHECK(plain.metrics.rows.empty());
}
