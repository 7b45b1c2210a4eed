#include "quack/telemetry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "quack/errors.hpp"
#include "quack/text.hpp"

namespace quack {

std::vector<TrackedHead> default_tracked_heads(const ModelConfig& cfg) {
  return {{static_cast<int>(cfg.n_layer / 2), static_cast<int>(cfg.attention.n_head / 2)}};
}

std::vector<TrackedHead> all_heads(const ModelConfig& cfg) {
  std::vector<TrackedHead> out;
  for (std::size_t l = 0; l < cfg.n_layer; ++l)
    for (std::size_t h = 0; h < cfg.attention.n_head; ++h) out.push_back({static_cast<int>(l), static_cast<int>(h)});
  return out;
}

std::vector<TrackedHead> parse_tracked_heads(const std::string& text, const ModelConfig& cfg) {
  const std::string_view t = text::trim(text);
  if (t == "default") return default_tracked_heads(cfg);
  if (t == "all") return all_heads(cfg);
  std::vector<TrackedHead> out;
  for (const auto& item : text::split(t, ',')) {
    const auto s = std::string(text::trim(item));
    const auto hpos = s.find('H');
    if (s.size() < 4 || s[0] != 'L' || hpos == std::string::npos)
      throw ConfigError("tracked head '" + s + "' is not of the form L<layer>H<head>");
    const long long l = text::parse_int(s.substr(1, hpos - 1));
    const long long h = text::parse_int(s.substr(hpos + 1));
    if (l < 0 || h < 0 || static_cast<std::size_t>(l) >= cfg.n_layer ||
        static_cast<std::size_t>(h) >= cfg.attention.n_head)
      throw ConfigError("tracked head '" + s + "' is out of range");
    out.push_back({static_cast<int>(l), static_cast<int>(h)});
  }
  if (out.empty()) throw ConfigError("no tracked heads");
  return out;
}

std::string format_tracked_heads(const std::vector<TrackedHead>& heads) {
  std::string out;
  for (const auto& th : heads) {
    if (!out.empty()) out += ',';
    out += "L" + std::to_string(th.layer) + "H" + std::to_string(th.head);
  }
  return out;
}

std::vector<double> head_logits(const ModelParams& params, const ModelConfig& cfg, const ForwardTrace& trace,
                                std::size_t seq_len, const TrackedHead& th) {
  const auto l = static_cast<std::size_t>(th.layer);
  const auto h = static_cast<std::size_t>(th.head);
  if (l >= params.layers.size() || l >= trace.attn_inputs.size())
    throw DimensionError("head_logits: layer out of range");
  const Tensor& x = trace.attn_inputs[l];
  const std::vector<Tensor> per_seq = std::visit(
      [&](const auto& w) {
        if constexpr (requires { w.wq; }) return mha_sequence_logits(x, w, cfg.attention, seq_len, h);
        else return mla_sequence_logits(x, w, cfg.attention, seq_len, h);
      },
      params.layers[l].attn);

  std::vector<double> out;
  for (const Tensor& lg : per_seq) {
    for (std::size_t i = 0; i < lg.rows(); ++i) {
      const std::size_t limit = cfg.attention.causal ? std::min(lg.cols(), i + 1) : lg.cols();
      for (std::size_t j = 0; j < limit; ++j) out.push_back(lg(i, j));
    }
  }
  return out;
}

ProbeState::ProbeState(TokenBatch probe, std::vector<TrackedHead> heads)
    : batch_(std::move(probe)), heads_(std::move(heads)) {
  if (heads_.empty()) throw ConfigError("probe needs at least one tracked head");
}

ProbeStats probe_logit_stats(const ModelParams& params, const ModelConfig& cfg, ProbeState& probe) {
  const Evaluation eval = evaluate(params, cfg, probe.batch_);
  ProbeStats stats;
  std::vector<std::vector<double>> current;
  for (const TrackedHead& th : probe.heads_) {
    std::vector<double> lg = head_logits(params, cfg, eval.trace, probe.batch_.seq, th);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lg) mx = std::max(mx, v);
    stats.max_logit.push_back(mx);
    current.push_back(std::move(lg));
  }
  for (std::size_t i = 0; i < current.size(); ++i) {
    if (probe.previous_.empty()) {
      stats.mean_abs_delta.push_back(std::nullopt);
      continue;
    }
    const auto& prev = probe.previous_[i];
    if (prev.size() != current[i].size()) throw DimensionError("probe logits changed shape between probes");
    double sum = 0.0;
    for (std::size_t j = 0; j < prev.size(); ++j) sum += std::abs(current[i][j] - prev[j]);
    stats.mean_abs_delta.push_back(sum / static_cast<double>(prev.size()));
  }
  probe.previous_ = std::move(current);
  return stats;
}

std::vector<LrColumn> lr_columns(const ModelConfig& cfg, const std::vector<TrackedHead>& heads) {
  std::vector<LrColumn> out;
  std::vector<int> layers_seen;
  auto add = [&](AttnFamily fam, int layer, int head) {
    std::string col = "lr_" + std::string(family_name(fam)) + "_L" + std::to_string(layer);
    if (head >= 0) col += "_H" + std::to_string(head);
    out.push_back({col, attn_param_name(layer, fam, head)});
  };
  for (const TrackedHead& th : heads) {
    if (cfg.attention.variant == AttentionVariant::kMha) {
      add(AttnFamily::kWq, th.layer, th.head);
      add(AttnFamily::kWk, th.layer, th.head);
      continue;
    }
    if (std::find(layers_seen.begin(), layers_seen.end(), th.layer) == layers_seen.end()) {
      layers_seen.push_back(th.layer);
      add(AttnFamily::kDq, th.layer, -1);
      add(AttnFamily::kDkv, th.layer, -1);
      add(AttnFamily::kKr, th.layer, -1);
    }
    add(AttnFamily::kUq, th.layer, th.head);
    add(AttnFamily::kQr, th.layer, th.head);
    add(AttnFamily::kUk, th.layer, th.head);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string head_suffix(const TrackedHead& th) {
  return "_L" + std::to_string(th.layer) + "_H" + std::to_string(th.head);
}

}  // namespace

std::vector<std::string> MetricsSchema::header() const {
  std::vector<std::string> cols{"step", "loss", "base_lr"};
  cols.insert(cols.end(), lr_columns.begin(), lr_columns.end());
  for (const auto& th : heads) {
    cols.push_back("max_logit" + head_suffix(th));
    cols.push_back("delta_logit" + head_suffix(th));
  }
  return cols;
}

std::vector<double> MetricsTable::column(const std::string& name) const {
  const auto header = schema.header();
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("no metrics column named '" + name + "'");
  const auto idx = static_cast<std::size_t>(it - header.begin());
  const std::size_t n_lr = schema.lr_columns.size();
  std::vector<double> out;
  for (const auto& r : rows) {
    if (idx == 0) out.push_back(static_cast<double>(r.step));
    else if (idx == 1) out.push_back(r.loss);
    else if (idx == 2) out.push_back(r.base_lr);
    else if (idx < 3 + n_lr) out.push_back(r.lrs.at(idx - 3));
    else {
      const std::size_t k = idx - 3 - n_lr;
      if (k % 2 == 0) out.push_back(r.max_logit.at(k / 2));
      else out.push_back(r.delta_logit.at(k / 2).value_or(std::numeric_limits<double>::quiet_NaN()));
    }
  }
  return out;
}

std::string format_metrics_csv(const MetricsTable& table) {
  const auto& s = table.schema;
  std::string out;
  const auto header = s.header();
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += '\n';
  for (const auto& r : table.rows) {
    if (r.lrs.size() != s.lr_columns.size() || r.max_logit.size() != s.heads.size() ||
        r.delta_logit.size() != s.heads.size())
      throw DimensionError("metrics row does not match the schema");
    out += std::to_string(r.step) + "," + text::format_double(r.loss) + "," + text::format_double(r.base_lr);
    for (double v : r.lrs) out += "," + text::format_double(v);
    for (std::size_t i = 0; i < s.heads.size(); ++i) {
      out += "," + text::format_double(r.max_logit[i]) + ",";
      if (r.delta_logit[i]) out += text::format_double(*r.delta_logit[i]);
    }
    out += '\n';
  }
  return out;
}

MetricsTable parse_metrics_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw IoError("metrics CSV is empty");
  const auto header = text::split(text::trim(line), ',');
  if (header.size() < 3 || header[0] != "step" || header[1] != "loss" || header[2] != "base_lr")
    throw IoError("metrics CSV header must start with step,loss,base_lr");

  MetricsTable table;
  std::size_t i = 3;
  for (; i < header.size() && header[i].rfind("lr_", 0) == 0; ++i) table.schema.lr_columns.push_back(header[i]);
  for (; i + 1 < header.size(); i += 2) {
    const std::string& m = header[i];
    if (m.rfind("max_logit_L", 0) != 0) throw IoError("unexpected metrics column '" + m + "'");
    const std::string suffix = m.substr(std::string("max_logit").size());
    if (header[i + 1] != "delta_logit" + suffix) throw IoError("expected delta_logit" + suffix);
    const auto hpos = suffix.find("_H");
    table.schema.heads.push_back({static_cast<int>(text::parse_int(suffix.substr(2, hpos - 2))),
                                  static_cast<int>(text::parse_int(suffix.substr(hpos + 2)))});
  }
  if (i != header.size()) throw IoError("dangling metrics column '" + header[i] + "'");

  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto f = text::split(text::trim(line), ',');
    if (f.size() != header.size())
      throw IoError("metrics CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                    " fields, expected " + std::to_string(header.size()));
    try {
      MetricsRow r;
      r.step = static_cast<std::size_t>(text::parse_int(f[0]));
      r.loss = text::parse_double(f[1]);
      r.base_lr = text::parse_double(f[2]);
      std::size_t k = 3;
      for (std::size_t c = 0; c < table.schema.lr_columns.size(); ++c) r.lrs.push_back(text::parse_double(f[k++]));
      for (std::size_t h = 0; h < table.schema.heads.size(); ++h) {
        r.max_logit.push_back(text::parse_double(f[k++]));
        const std::string& d = f[k++];
        r.delta_logit.push_back(d.empty() ? std::nullopt : std::optional<double>(text::parse_double(d)));
      }
      table.rows.push_back(std::move(r));
    } catch (const std::invalid_argument& e) {
      throw IoError("metrics CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return table;
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << contents;
  if (!os.flush()) throw IoError("failed writing: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table) {
  if (table.rows.empty()) throw ConfigError("write_metrics_csv: no rows");
  write_text_file(path, format_metrics_csv(table));
}

MetricsTable read_metrics_csv(const std::filesystem::path& path) { return parse_metrics_csv(read_text_file(path)); }

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string fixed2(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 2);
  return std::string(buf, res.ptr);
}

std::string tick_label(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 3);
  return std::string(buf, res.ptr);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
                                    "#7f7f7f"};

}  // namespace

std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& opt) {
  if (series.empty()) throw ConfigError("render_svg: no series selected");
  auto usable = [&](double x, double y) { return std::isfinite(x) && std::isfinite(y) && (!opt.log_y || y > 0.0); };
  auto ty = [&](double y) { return opt.log_y ? std::log10(y) : y; };

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DimensionError("render_svg: series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;

  const double left = 72, right = 160, top = 36, bottom = 48;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (y1 - ty(y)) / (y1 - y0) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    os << "<text x=\"" << fixed2(left + pw / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
       << xml_escape(opt.title) << "</text>\n";
  os << "<rect x=\"" << fixed2(left) << "\" y=\"" << fixed2(top) << "\" width=\"" << fixed2(pw) << "\" height=\""
     << fixed2(ph) << "\" fill=\"none\" stroke=\"#444\"/>\n";

  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double fx = x0 + (x1 - x0) * i / kTicks;
    const double X = px(fx);
    os << "<line x1=\"" << fixed2(X) << "\" y1=\"" << fixed2(top + ph) << "\" x2=\"" << fixed2(X) << "\" y2=\""
       << fixed2(top + ph + 4) << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << fixed2(X) << "\" y=\"" << fixed2(top + ph + 16) << "\" text-anchor=\"middle\">"
       << tick_label(fx) << "</text>\n";
    const double fy = y0 + (y1 - y0) * i / kTicks;
    const double Y = top + (y1 - fy) / (y1 - y0) * ph;
    os << "<line x1=\"" << fixed2(left - 4) << "\" y1=\"" << fixed2(Y) << "\" x2=\"" << fixed2(left) << "\" y2=\""
       << fixed2(Y) << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << fixed2(left - 6) << "\" y=\"" << fixed2(Y + 4) << "\" text-anchor=\"end\">"
       << tick_label(opt.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
  }
  os << "<text x=\"" << fixed2(left + pw / 2) << "\" y=\"" << fixed2(opt.height - 10.0)
     << "\" text-anchor=\"middle\">" << xml_escape(opt.x_label) << "</text>\n";
  const std::string ylab = opt.y_label + (opt.log_y ? " (log)" : "");
  os << "<text x=\"14\" y=\"" << fixed2(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << fixed2(top + ph / 2) << ")\">" << xml_escape(ylab) << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    std::string d;
    std::size_t run = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) {
        run = 0;
        continue;
      }
      d += (d.empty() ? "" : " ") + std::string(run == 0 ? "M" : "L") + fixed2(px(s.x[i])) + "," + fixed2(py(s.y[i]));
      ++run;
    }
    os << "<path fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" d=\"" << d << "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(si) + 8.0;
    os << "<line x1=\"" << fixed2(left + pw + 10) << "\" y1=\"" << fixed2(ly) << "\" x2=\"" << fixed2(left + pw + 28)
       << "\" y2=\"" << fixed2(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << fixed2(left + pw + 32) << "\" y=\"" << fixed2(ly + 4) << "\">" << xml_escape(s.label)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void emit_plot_svg(const MetricsTable& table, const std::vector<std::string>& columns, const PlotOptions& options,
                   const std::filesystem::path& path) {
  if (columns.empty()) throw ConfigError("emit_plot_svg: empty series selection");
  if (table.rows.size() < 2) throw ConfigError("emit_plot_svg: need at least two rows");
  const std::vector<double> steps = table.column("step");
  std::vector<PlotSeries> series;
  for (const auto& c : columns) series.push_back({c, steps, table.column(c)});
  write_text_file(path, render_svg(series, options));
}

}  // namespace quack
