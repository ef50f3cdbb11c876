#pragma once

// Deterministic SVG figures: heatmaps and bar charts. Coordinates are written
// with fixed precision and axis labels with two decimals, so identical input
// yields identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "plab/experiment.hpp"

namespace plab {

namespace svg {

inline std::string num(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  // "-0.00" and "0.00" must not depend on the sign of a rounded zero
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

inline std::string escape(const std::string& s) {
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

/// Diverging blue-white-red ramp; t = 0 maps to blue, 0.5 white, 1 red.
inline std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  int r, g, b;
  if (t < 0.5) {
    const double u = t / 0.5;
    r = static_cast<int>(std::lround(33 + u * (255 - 33)));
    g = static_cast<int>(std::lround(102 + u * (255 - 102)));
    b = static_cast<int>(std::lround(172 + u * (255 - 172)));
  } else {
    const double u = (t - 0.5) / 0.5;
    r = static_cast<int>(std::lround(255 + u * (178 - 255)));
    g = static_cast<int>(std::lround(255 + u * (24 - 255)));
    b = static_cast<int>(std::lround(255 + u * (43 - 255)));
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

class Document {
 public:
  Document(double width, double height) : width_(width), height_(height) {}

  void text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 11,
            const char* extra = "") {
    body_ += "<text x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) + "\" text-anchor=\"" + anchor +
             "\" font-size=\"" + std::to_string(size) + "\"" + extra + ">" + escape(s) + "</text>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill, const char* cls,
            const std::string& title = {}) {
    body_ += "<rect class=\"" + std::string(cls) + "\" x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) +
             "\" width=\"" + num(w, 1) + "\" height=\"" + num(h, 1) + "\" fill=\"" + fill +
             "\" stroke=\"#333333\" stroke-width=\"0.5\"";
    if (title.empty()) {
      body_ += "/>\n";
    } else {
      body_ += "><title>" + escape(title) + "</title></rect>\n";
    }
  }

  void line(double x1, double y1, double x2, double y2, const char* cls = "axis") {
    body_ += "<line class=\"" + std::string(cls) + "\" x1=\"" + num(x1, 1) + "\" y1=\"" + num(y1, 1) +
             "\" x2=\"" + num(x2, 1) + "\" y2=\"" + num(y2, 1) + "\" stroke=\"#000000\"/>\n";
  }

  std::string str() const {
    return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
           "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width_, 0) + "\" height=\"" +
           num(height_, 0) + "\" viewBox=\"0 0 " + num(width_, 0) + " " + num(height_, 0) +
           "\" font-family=\"sans-serif\">\n"
           "<rect x=\"0\" y=\"0\" width=\"" + num(width_, 0) + "\" height=\"" + num(height_, 0) +
           "\" fill=\"#ffffff\"/>\n" + body_ + "</svg>\n";
  }

 private:
  double width_;
  double height_;
  std::string body_;
};

struct Heatmap {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<std::optional<double>>> values;  // [row][col]
};

/// Color scale anchored at the data min and max. Missing cells are grey.
inline std::string render_heatmap(const Heatmap& hm) {
  constexpr double cell = 36.0, left = 170.0, top = 50.0, legend = 90.0;
  const std::size_t rows = hm.row_labels.size();
  const std::size_t cols = hm.col_labels.size();
  const double width = left + std::max<std::size_t>(cols, 4) * cell + legend;
  const double height = top + std::max<std::size_t>(rows, 3) * cell + 60.0;
  Document doc(width, height);
  doc.text(width / 2, 22, hm.title, "middle", 14);
  const double grid_h = static_cast<double>(std::max<std::size_t>(rows, 3)) * cell;
  const double grid_w = static_cast<double>(std::max<std::size_t>(cols, 4)) * cell;
  doc.line(left, top, left, top + grid_h);
  doc.line(left, top + grid_h, left + grid_w, top + grid_h);
  doc.text(left + grid_w / 2, top + grid_h + 40, hm.x_label);
  doc.text(14, top + grid_h / 2, hm.y_label, "middle", 11,
           (" transform=\"rotate(-90 14 " + num(top + grid_h / 2, 1) + ")\"").c_str());

  std::optional<double> lo, hi;
  for (const auto& row : hm.values) {
    for (const auto& v : row) {
      if (!v) continue;
      lo = lo ? std::min(*lo, *v) : *v;
      hi = hi ? std::max(*hi, *v) : *v;
    }
  }
  if (!lo) {
    doc.text(left + grid_w / 2, top + grid_h / 2, "no data", "middle", 13, " class=\"no-data\"");
    return doc.str();
  }
  const double span = *hi - *lo;
  for (std::size_t r = 0; r < rows; ++r) {
    doc.text(left - 6, top + r * cell + cell / 2 + 4, hm.row_labels[r], "end", 10);
    for (std::size_t c = 0; c < cols; ++c) {
      const auto& v = hm.values[r][c];
      const double t = !v ? 0.5 : span > 0 ? (*v - *lo) / span : 0.5;
      doc.rect(left + c * cell, top + r * cell, cell, cell, v ? ramp(t) : "#cccccc", "cell",
               hm.row_labels[r] + " / " + hm.col_labels[c] + ": " + (v ? num(*v, 4) : "n/a"));
    }
  }
  for (std::size_t c = 0; c < cols; ++c) {
    doc.text(left + c * cell + cell / 2, top + grid_h + 16, hm.col_labels[c], "middle", 10);
  }
  // legend
  const double lx = left + grid_w + 24;
  for (int i = 0; i < 10; ++i) {
    doc.rect(lx, top + i * (grid_h / 10), 16, grid_h / 10, ramp(1.0 - i / 9.0), "legend");
  }
  doc.text(lx + 20, top + 10, num(*hi), "start", 10);
  doc.text(lx + 20, top + grid_h, num(*lo), "start", 10);
  return doc.str();
}

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> labels;
  std::vector<double> values;
};

/// Vertical bars around a zero baseline; y ticks at min, 0 and max.
inline std::string render_bars(const std::vector<BarChart>& panels) {
  constexpr double bar = 26.0, left = 80.0, panel_h = 220.0, top = 40.0;
  std::size_t max_bars = 4;
  for (const auto& p : panels) max_bars = std::max(max_bars, p.labels.size());
  const double width = left + max_bars * bar + 40.0;
  const double height = top + std::max<std::size_t>(panels.size(), 1) * (panel_h + 70.0);
  Document doc(width, height);
  if (panels.empty()) {
    doc.line(left, top, left, top + panel_h);
    doc.line(left, top + panel_h, width - 20, top + panel_h);
    doc.text(left + (width - left) / 2, top + panel_h / 2, "no data", "middle", 13, " class=\"no-data\"");
    return doc.str();
  }
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const auto& p = panels[pi];
    const double y0 = top + pi * (panel_h + 70.0);
    doc.text(width / 2, y0 - 14, p.title, "middle", 13);
    doc.line(left, y0, left, y0 + panel_h);
    doc.text(16, y0 + panel_h / 2, p.y_label, "middle", 10,
             (" transform=\"rotate(-90 16 " + num(y0 + panel_h / 2, 1) + ")\"").c_str());
    if (p.values.empty()) {
      doc.line(left, y0 + panel_h, width - 20, y0 + panel_h);
      doc.text(left + (width - left) / 2, y0 + panel_h / 2, "no data", "middle", 13, " class=\"no-data\"");
      continue;
    }
    double lo = 0.0, hi = 0.0;
    for (double v : p.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo <= 0.0) hi = lo + 1.0;
    const auto y_of = [&](double v) { return y0 + (hi - v) / (hi - lo) * panel_h; };
    doc.line(left, y_of(0.0), left + p.values.size() * bar + 10, y_of(0.0));
    for (double tick : {lo, 0.0, hi}) doc.text(left - 6, y_of(tick) + 4, num(tick), "end", 9);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double v = p.values[i];
      const double x = left + 5 + i * bar;
      const double ytop = y_of(std::max(v, 0.0));
      const double h = std::abs(y_of(v) - y_of(0.0));
      doc.rect(x, ytop, bar - 6, h, v >= 0 ? "#b2182b" : "#2166ac", "bar",
               p.labels[i] + ": " + num(v, 4));
      const double ly = y0 + panel_h + 12;
      doc.text(x + (bar - 6) / 2, ly, p.labels[i], "end", 9,
               (" transform=\"rotate(-60 " + num(x + (bar - 6) / 2, 1) + " " + num(ly, 1) + ")\"").c_str());
    }
  }
  return doc.str();
}

}  // namespace svg

enum class FigureKind { layer_heatmap, head_grid, identity_bars, attention_bars };

inline FigureKind figure_kind_from_string(const std::string& s) {
  if (s == "layer_heatmap") return FigureKind::layer_heatmap;
  if (s == "head_grid") return FigureKind::head_grid;
  if (s == "identity_bars") return FigureKind::identity_bars;
  if (s == "attention_bars") return FigureKind::attention_bars;
  fail(ErrorKind::usage, "unknown figure kind '" + s + "'");
}

/// Rows are (pair, family, mode) over the layer-indexed families; columns
/// are layers. `metric` is "delta_r" or "is_max".
inline svg::Heatmap layer_heatmap(const std::vector<MetricRecord>& records, const std::string& metric) {
  svg::Heatmap hm;
  hm.title = metric == "is_max" ? "Correct option becomes max after patching (%)"
                                : "Mean relative logit difference after patching";
  hm.x_label = "layer";
  hm.y_label = "pair / target";
  using RowKey = std::tuple<std::string, int, int>;
  std::map<RowKey, std::map<std::size_t, std::pair<double, std::size_t>>> acc;
  std::size_t n_layers = 0;
  for (const auto& r : records) {
    if (r.family != TargetFamily::mlp_layers && r.family != TargetFamily::mha_layers &&
        r.family != TargetFamily::mlp_identity_position) {
      continue;
    }
    auto& cell = acc[RowKey{r.pair_label(), static_cast<int>(r.family), static_cast<int>(r.mode)}][*r.layer];
    cell.first += metric == "is_max" ? (r.is_max ? 100.0 : 0.0) : r.delta_r;
    cell.second += 1;
    n_layers = std::max(n_layers, *r.layer + 1);
  }
  for (std::size_t l = 0; l < n_layers; ++l) hm.col_labels.push_back(std::to_string(l));
  for (const auto& [key, cells] : acc) {
    const auto& [pair, family, mode] = key;
    hm.row_labels.push_back(pair + " " + to_string(static_cast<TargetFamily>(family)) +
                            (mode == static_cast<int>(EffectMode::direct) ? " (direct)" : ""));
    std::vector<std::optional<double>> row(n_layers);
    for (const auto& [l, c] : cells) row[l] = c.first / static_cast<double>(c.second);
    hm.values.push_back(std::move(row));
  }
  return hm;
}

/// Layers by heads, mean Δ_r over all pairs and questions of total-effect
/// head patching.
inline svg::Heatmap head_grid(const std::vector<MetricRecord>& records) {
  svg::Heatmap hm;
  hm.title = "Mean relative logit difference per attention head";
  hm.x_label = "head";
  hm.y_label = "layer";
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
  std::size_t n_layers = 0, n_heads = 0;
  for (const auto& r : records) {
    if (r.family != TargetFamily::heads || r.mode != EffectMode::total) continue;
    auto& c = acc[{*r.layer, *r.head}];
    c.first += r.delta_r;
    c.second += 1;
    n_layers = std::max(n_layers, *r.layer + 1);
    n_heads = std::max(n_heads, *r.head + 1);
  }
  for (std::size_t h = 0; h < n_heads; ++h) hm.col_labels.push_back(std::to_string(h));
  for (std::size_t l = 0; l < n_layers; ++l) {
    hm.row_labels.push_back("layer " + std::to_string(l));
    std::vector<std::optional<double>> row(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto it = acc.find({l, h});
      if (it != acc.end()) row[h] = it->second.first / static_cast<double>(it->second.second);
    }
    hm.values.push_back(std::move(row));
  }
  return hm;
}

/// Probability and accuracy deltas vs. the base identity, from an
/// eval_summary.json document.
inline std::vector<svg::BarChart> identity_bars(const nlohmann::json& summary) {
  svg::BarChart prob{"Mean change in correct-option probability vs. base", "delta probability", {}, {}};
  svg::BarChart acc{"Change in accuracy vs. base", "delta accuracy", {}, {}};
  if (summary.is_object() && summary.contains("identities")) {
    for (const auto& row : summary["identities"]) {
      if (row.at("category").get<std::string>() == "base") continue;
      const auto name = row.at("identity").get<std::string>();
      prob.labels.push_back(name);
      prob.values.push_back(row.at("mean_prob_delta_vs_base").get<double>());
      acc.labels.push_back(name);
      acc.values.push_back(row.at("accuracy_delta_vs_base").get<double>());
    }
  }
  return {prob, acc};
}

/// One panel per head: mean relative value-weighted attention per identity.
inline std::vector<svg::BarChart> attention_bars(const std::vector<HeadAttentionProfile>& profiles) {
  std::map<HeadId, std::map<std::string, std::pair<double, std::size_t>>> acc;
  for (const auto& p : profiles) {
    for (const auto& [identity, v] : p.relative_vw) {
      auto& a = acc[p.id()][identity];
      a.first += v;
      a.second += 1;
    }
  }
  std::vector<svg::BarChart> panels;
  for (const auto& [head, per_id] : acc) {
    svg::BarChart c{head.label() + " relative value-weighted attention at identity position",
                    "relative vw attention", {}, {}};
    for (const auto& [identity, a] : per_id) {
      c.labels.push_back(identity);
      c.values.push_back(a.first / static_cast<double>(a.second));
    }
    panels.push_back(std::move(c));
  }
  return panels;
}

/// One panel per head: change in value-weighted attention (patched minus
/// corrupt) for each patched MLP layer.
inline std::vector<svg::BarChart> attention_patched_bars(const std::vector<nlohmann::json>& rows) {
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
  for (const auto& r : rows) {
    auto& a = acc[r.at("head").get<std::string>()][r.at("patched_site").get<std::string>()];
    a.first += r.at("vw_patched").get<double>() - r.at("vw_corrupt").get<double>();
    a.second += 1;
  }
  std::vector<svg::BarChart> panels;
  for (const auto& [head, per_site] : acc) {
    svg::BarChart c{head + " change in value-weighted attention after MLP patching", "delta vw attention", {}, {}};
    for (const auto& [site, a] : per_site) {
      c.labels.push_back(site);
      c.values.push_back(a.first / static_cast<double>(a.second));
    }
    panels.push_back(std::move(c));
  }
  return panels;
}

}  // namespace plab
