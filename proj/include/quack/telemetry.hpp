#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "quack/model.hpp"
#include "quack/optim.hpp"

namespace quack {

struct TrackedHead {
  int layer = 0;
  int head = 0;
  friend bool operator==(const TrackedHead&, const TrackedHead&) = default;
};

// Middle head of the middle layer.
std::vector<TrackedHead> default_tracked_heads(const ModelConfig& cfg);
std::vector<TrackedHead> all_heads(const ModelConfig& cfg);
// "default", "all", or a comma list such as "L1H2,L0H0".
std::vector<TrackedHead> parse_tracked_heads(const std::string& text, const ModelConfig& cfg);
std::string format_tracked_heads(const std::vector<TrackedHead>& heads);

// Unmasked logits of one head over every sequence of a batch, flattened in
// (sequence, query, key) order.
std::vector<double> head_logits(const ModelParams& params, const ModelConfig& cfg, const ForwardTrace& trace,
                                std::size_t seq_len, const TrackedHead& head);

struct ProbeStats {
  std::vector<double> max_logit;                     // per tracked head
  std::vector<std::optional<double>> mean_abs_delta;  // absent on the first probe
};

class ProbeState;
// Evaluates the probe batch without a tape. The mean |delta| compares against
// the logits of the previous probe, which are then replaced.
ProbeStats probe_logit_stats(const ModelParams& params, const ModelConfig& cfg, ProbeState& probe);

class ProbeState {
 public:
  ProbeState(TokenBatch probe, std::vector<TrackedHead> heads);

  const TokenBatch& batch() const noexcept { return batch_; }
  const std::vector<TrackedHead>& heads() const noexcept { return heads_; }
  const std::vector<std::vector<double>>& previous() const noexcept { return previous_; }

 private:
  friend ProbeStats probe_logit_stats(const ModelParams&, const ModelConfig&, ProbeState&);
  TokenBatch batch_;
  std::vector<TrackedHead> heads_;
  std::vector<std::vector<double>> previous_;  // per tracked head; empty before the first probe
};

// Learning-rate columns reported for the tracked heads: query/key weights of
// each head and, for MLA, the shared logit-forming weights of its layer.
struct LrColumn {
  std::string column;  // e.g. lr_wq_L1_H2
  std::string param;
};
std::vector<LrColumn> lr_columns(const ModelConfig& cfg, const std::vector<TrackedHead>& heads);

struct MetricsSchema {
  std::vector<std::string> lr_columns;
  std::vector<TrackedHead> heads;

  std::vector<std::string> header() const;
  friend bool operator==(const MetricsSchema&, const MetricsSchema&) = default;
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double base_lr = 0.0;
  std::vector<double> lrs;                         // one per schema lr column
  std::vector<double> max_logit;                   // one per tracked head
  std::vector<std::optional<double>> delta_logit;  // one per tracked head
};

struct MetricsTable {
  MetricsSchema schema;
  std::vector<MetricsRow> rows;

  // Column by header name, for plotting. Absent deltas come back as NaN.
  std::vector<double> column(const std::string& name) const;
};

std::string format_metrics_csv(const MetricsTable& table);
MetricsTable parse_metrics_csv(const std::string& text);
void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table);
MetricsTable read_metrics_csv(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

struct PlotOptions {
  std::string title;
  std::string x_label = "step";
  std::string y_label;
  bool log_y = false;
  int width = 720;
  int height = 420;
};

// Static SVG line chart. Non-finite points (and non-positive ones on a log
// axis) split a series into separate polylines.
std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& options);
void emit_plot_svg(const MetricsTable& table, const std::vector<std::string>& columns, const PlotOptions& options,
                   const std::filesystem::path& path);

// Writes text to a file, throwing IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace quack
