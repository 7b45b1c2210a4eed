#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "quack/errors.hpp"
#include "quack/gradcheck.hpp"
#include "quack/harness.hpp"
#include "quack/lemma.hpp"
#include "quack/telemetry.hpp"
#include "quack/text.hpp"

namespace fs = std::filesystem;
using namespace quack;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitUnstable = 3;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* c = cmd->add_option("--config", args.config, "run config file (key = value lines)");
  if (config_required) c->required();
  cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--out", args.out, "output directory")->capture_default_str();
  cmd->add_option("--override", args.overrides, "key=value applied after the config file")->take_all();
}

RunConfig base_config(const CommonArgs& args) {
  RunConfig cfg = args.config.empty() ? RunConfig{} : load_run_config(args.config);
  for (const auto& o : args.overrides) apply_override(cfg, o);
  if (args.seed) cfg.seed = *args.seed;
  return cfg;
}

// loss.svg, max_logit.svg and delta_logit.svg for a metrics table.
void emit_default_plots(const MetricsTable& table, const fs::path& dir) {
  if (table.rows.size() < 2) return;
  std::vector<std::string> max_cols, delta_cols;
  for (const auto& h : table.schema.heads) {
    const std::string suffix = "_L" + std::to_string(h.layer) + "_H" + std::to_string(h.head);
    max_cols.push_back("max_logit" + suffix);
    delta_cols.push_back("delta_logit" + suffix);
  }
  emit_plot_svg(table, {"loss"}, {.title = "training loss", .y_label = "loss"}, dir / "loss.svg");
  if (!max_cols.empty()) {
    emit_plot_svg(table, max_cols, {.title = "max attention logit", .y_label = "max logit"}, dir / "max_logit.svg");
    emit_plot_svg(table, delta_cols, {.title = "mean |delta logit|", .y_label = "mean |delta logit|", .log_y = true},
                  dir / "delta_logit.svg");
  }
}

int cmd_train(const CommonArgs& args, bool strict) {
  const RunConfig cfg = base_config(args);
  const RunResult r = run_training(cfg);
  const fs::path out = args.out;
  write_run_outputs(r, out);
  emit_default_plots(r.metrics, out);
  std::printf("steps %zu  final loss %s  final max logit %s\n", r.steps_completed,
              text::format_double(r.final_loss()).c_str(), text::format_double(r.final_max_logit()).c_str());
  if (r.unstable) {
    std::printf("instability: %s\n", r.instability.c_str());
    if (strict) return kExitUnstable;
  }
  return kExitOk;
}

int cmd_sweep(const CommonArgs& args, unsigned threads) {
  SweepSpec spec = parse_sweep_config(read_text_file(args.config));
  for (const auto& o : args.overrides) apply_override(spec.base, o);
  if (args.seed) spec.base.seed = *args.seed;
  const auto grid = expand_grid(spec);
  for (const auto& run : grid) resolve(run.config).validate();
  const fs::path out = args.out;
  const auto rows = run_sweep(grid, out, threads);
  write_text_file(out / "sweep_summary.csv", format_sweep_csv(rows));
  write_text_file(out / "sweep_timings.csv", format_sweep_timings(rows));
  std::size_t ok = 0, unstable = 0, failed = 0;
  for (const auto& r : rows) {
    if (r.status == "ok") ++ok;
    else if (r.status == "unstable") ++unstable;
    else ++failed;
  }
  std::printf("%zu runs: %zu ok, %zu unstable, %zu failed\n", rows.size(), ok, unstable, failed);
  return kExitOk;
}

std::vector<std::string> expand_choice(const std::string& value, std::vector<std::string> all) {
  if (value == "all" || value == "both") return all;
  return {value};
}

int cmd_lemma(const std::string& out_dir, std::size_t trials, std::uint64_t seed, const std::string& suite,
              const std::string& norm, const std::string& sampler, unsigned threads) {
  std::vector<LemmaTrial> all;
  std::string summary = "suite,norm,sampler,trials,violations,max_ratio\n";
  std::size_t violations = 0;
  for (const auto& s : expand_choice(suite, {"mha", "mla"}))
    for (const auto& n : expand_choice(norm, {"frobenius", "spectral"}))
      for (const auto& g : expand_choice(sampler, {"orthogonal", "adam"})) {
        LemmaSuiteOptions opt;
        if (s != "mha" && s != "mla") throw ConfigError("suite must be mha|mla|all");
        opt.suite = s;
        opt.trials = trials;
        opt.root_seed = seed;
        opt.norm = parse_norm_kind(n);
        opt.sampler = parse_grad_sampler(g);
        opt.threads = threads;
        auto res = run_lemma_suite(opt);
        violations += res.violations;
        std::printf("%s %s %s: %zu trials, %zu violations, max measured/bound %.6f\n", s.c_str(), n.c_str(), g.c_str(),
                    res.trials.size(), res.violations, res.max_ratio);
        summary += s + "," + n + "," + g + "," + std::to_string(res.trials.size()) + "," +
                   std::to_string(res.violations) + "," + text::format_double(res.max_ratio) + "\n";
        all.insert(all.end(), std::make_move_iterator(res.trials.begin()), std::make_move_iterator(res.trials.end()));
      }
  const fs::path out = out_dir;
  fs::create_directories(out);
  write_text_file(out / "lemma_trials.csv", format_lemma_csv(all));
  write_text_file(out / "lemma_summary.csv", summary);
  return violations == 0 ? kExitOk : kExitValidation;
}

int cmd_plot(const std::string& metrics, const std::string& out_dir, const std::vector<std::string>& columns,
             const std::string& name, bool log_y, const std::string& title) {
  const MetricsTable table = read_metrics_csv(metrics);
  const fs::path out = out_dir;
  fs::create_directories(out);
  if (columns.empty()) {
    if (table.rows.size() < 2) throw ConfigError("need at least two metrics rows to plot");
    emit_default_plots(table, out);
    return kExitOk;
  }
  PlotOptions opt;
  opt.title = title;
  opt.log_y = log_y;
  emit_plot_svg(table, columns, opt, out / (name + ".svg"));
  return kExitOk;
}

int cmd_gradcheck(const std::string& out_dir, std::uint64_t seed) {
  const auto cases = run_gradcheck_battery(seed);
  std::string csv = "case,elements,max_rel_error,tolerance,ok\n";
  bool all_ok = true;
  for (const auto& c : cases) {
    all_ok = all_ok && c.ok();
    std::printf("%-24s %6zu elements  max rel error %.3e  %s\n", c.name.c_str(), c.elements, c.report.max_rel_error,
                c.ok() ? "ok" : "FAIL");
    csv += c.name + "," + std::to_string(c.elements) + "," + text::format_double(c.report.max_rel_error) + "," +
           text::format_double(kGradCheckTolerance) + "," + (c.ok() ? "true" : "false") + "\n";
  }
  const fs::path out = out_dir;
  fs::create_directories(out);
  write_text_file(out / "gradcheck.csv", csv);
  return all_ok ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quacklab: attention-logit stability experiments at desk scale"};
  app.require_subcommand(1);

  CommonArgs train_args, sweep_args;
  bool strict = false;
  unsigned sweep_threads = 0;
  auto* train = app.add_subcommand("train", "run one training job");
  add_common(train, train_args, false);
  train->add_flag("--strict", strict, "exit 3 when the run becomes unstable");

  auto* sweep = app.add_subcommand("sweep", "run a grid of training jobs");
  add_common(sweep, sweep_args, true);
  sweep->add_option("--threads", sweep_threads, "parallel runs (0: one per core)");

  std::string lemma_out = "out", suite = "all", norm = "both", sampler = "both";
  std::size_t trials = 1000;
  std::uint64_t lemma_seed = 1;
  unsigned lemma_threads = 0;
  auto* lemma = app.add_subcommand("lemma", "random trials of the logit-change bounds");
  lemma->add_option("--trials", trials, "trials per suite")->capture_default_str();
  lemma->add_option("--seed", lemma_seed, "root seed")->capture_default_str();
  lemma->add_option("--suite", suite, "mha | mla | all")->capture_default_str();
  lemma->add_option("--norm", norm, "frobenius | spectral | both")->capture_default_str();
  lemma->add_option("--sampler", sampler, "orthogonal | adam | both")->capture_default_str();
  lemma->add_option("--threads", lemma_threads, "worker threads (0: one per core)");
  lemma->add_option("--out", lemma_out, "output directory")->capture_default_str();

  std::string metrics, plot_out = "out", plot_name = "plot", plot_title;
  std::vector<std::string> plot_columns;
  bool log_y = false;
  auto* plot = app.add_subcommand("plot", "render metrics CSV columns as SVG");
  plot->add_option("--metrics", metrics, "metrics CSV")->required();
  plot->add_option("--columns", plot_columns, "columns to draw (default: loss, max logit, delta logit)")
      ->delimiter(',');
  plot->add_option("--name", plot_name, "file name without extension")->capture_default_str();
  plot->add_option("--title", plot_title, "chart title");
  plot->add_flag("--log-y", log_y, "logarithmic y axis");
  plot->add_option("--out", plot_out, "output directory")->capture_default_str();

  std::string grad_out = "out";
  std::uint64_t grad_seed = 1;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every op and the toy model");
  grad->add_option("--seed", grad_seed, "seed")->capture_default_str();
  grad->add_option("--out", grad_out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_args, strict);
    if (*sweep) return cmd_sweep(sweep_args, sweep_threads);
    if (*lemma) return cmd_lemma(lemma_out, trials, lemma_seed, suite, norm, sampler, lemma_threads);
    if (*plot) return cmd_plot(metrics, plot_out, plot_columns, plot_name, log_y, plot_title);
    if (*grad) return cmd_gradcheck(grad_out, grad_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}
