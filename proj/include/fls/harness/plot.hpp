#pragma once

// Deterministic SVG line plots built from a metrics CSV only.

#include "fls/harness/record.hpp"

namespace fls::harness {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // sorted by x
};

struct Panel {
  std::string title;
  std::string x_label;
  std::vector<Series> series;
};

inline std::string svg_number(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", x);
  return buf;
}

inline std::string tick_label(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", x);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string render_svg(const Panel& p) {
  constexpr double W = 640, H = 420, L = 70, R = 190, T = 40, B = 50;
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  bool positive = true;
  for (const auto& s : p.series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      positive = positive && y > 0.0;
    }
  if (!std::isfinite(x0) || !std::isfinite(y0)) throw std::invalid_argument("render_svg: no finite points");
  const bool logy = positive && y1 / y0 > 100.0;
  auto fy = [&](double y) { return logy ? std::log10(y) : y; };
  double ly0 = fy(y0), ly1 = fy(y1);
  if (ly1 == ly0) {
    ly0 -= 0.5;
    ly1 += 0.5;
  }
  if (x1 == x0) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (fy(y) - ly0) / (ly1 - ly0) * (H - T - B); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << svg_number(W / 2 - R / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
      << xml_escape(p.title) << "</text>\n";
  out << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yl = ly0 + (ly1 - ly0) * k / 4.0;
    const double yv = logy ? std::pow(10.0, yl) : yl;
    out << "<text x=\"" << svg_number(px(xv)) << "\" y=\"" << svg_number(H - B + 16)
        << "\" text-anchor=\"middle\" font-size=\"10\">" << tick_label(xv) << "</text>\n";
    out << "<text x=\"" << svg_number(L - 6) << "\" y=\"" << svg_number(py(yv) + 3)
        << "\" text-anchor=\"end\" font-size=\"10\">" << tick_label(yv) << "</text>\n";
  }
  out << "<text x=\"" << svg_number(L + (W - L - R) / 2) << "\" y=\"" << svg_number(H - 12)
      << "\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(p.x_label) << "</text>\n";
  for (std::size_t i = 0; i < p.series.size(); ++i) {
    const auto& s = p.series[i];
    const char* color = palette[i % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(y) || (logy && y <= 0.0)) continue;
      out << (first ? "" : " ") << svg_number(px(x)) << ',' << svg_number(py(y));
      first = false;
    }
    out << "\"/>\n";
    const double ly = T + 14.0 * double(i) + 8;
    out << "<line x1=\"" << svg_number(W - R + 10) << "\" y1=\"" << svg_number(ly) << "\" x2=\""
        << svg_number(W - R + 30) << "\" y2=\"" << svg_number(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << svg_number(W - R + 35) << "\" y=\"" << svg_number(ly + 4) << "\" font-size=\"10\">"
        << xml_escape(s.name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

/// Groups rows into one panel per (metric, phase); one series per method,
/// averaged over seeds. The x axis is sparsity, minibatches or step,
/// whichever varies first.
inline std::vector<std::pair<std::string, Panel>> build_panels(const std::vector<MetricRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<const MetricRow*>> groups;
  for (const auto& r : rows) groups[{r.metric, r.phase}].push_back(&r);
  std::vector<std::pair<std::string, Panel>> out;
  for (const auto& [key, members] : groups) {
    auto varies = [&](auto field) {
      for (const auto* m : members)
        if (field(*m) != field(*members.front())) return true;
      return false;
    };
    int axis = 2;
    if (varies([](const MetricRow& r) { return r.sparsity; }))
      axis = 0;
    else if (varies([](const MetricRow& r) { return double(r.minibatches); }))
      axis = 1;
    auto xval = [&](const MetricRow& r) {
      return axis == 0 ? r.sparsity : axis == 1 ? double(r.minibatches) : double(r.step);
    };
    std::map<std::string, std::map<double, std::vector<double>>> acc;
    for (const auto* m : members) acc[m->method][xval(*m)].push_back(m->value);
    Panel p;
    p.title = key.first + (key.second.empty() ? "" : " (" + key.second + ")");
    p.x_label = axis == 0 ? "sparsity" : axis == 1 ? "minibatches" : "step";
    for (const auto& [method, pts] : acc) {
      Series s{method, {}};
      for (const auto& [x, ys] : pts) s.points.emplace_back(x, mean_sem(ys).mean);
      p.series.push_back(std::move(s));
    }
    std::string file = key.first + (key.second.empty() ? "" : "_" + key.second);
    for (char& c : file)
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    out.emplace_back(file + ".svg", std::move(p));
  }
  return out;
}

/// Renders every panel of a metrics CSV into `dir`. Nothing is written when
/// the table is empty or malformed.
inline std::vector<std::filesystem::path> emit_plots(const std::string& csv_text, const std::filesystem::path& dir) {
  const auto rows = parse_metrics_csv(csv_text);
  if (rows.empty()) throw std::invalid_argument("emit_plots: empty metric table");
  std::vector<std::pair<std::filesystem::path, std::string>> rendered;
  for (const auto& [name, panel] : build_panels(rows)) {
    bool any_finite = false;
    for (const auto& s : panel.series)
      for (const auto& pt : s.points) any_finite = any_finite || std::isfinite(pt.second);
    if (any_finite) rendered.emplace_back(dir / name, render_svg(panel));
  }
  std::vector<std::filesystem::path> written;
  for (const auto& [path, svg] : rendered) {
    write_atomic(path, svg);
    written.push_back(path);
  }
  return written;
}

}  // namespace fls::harness
