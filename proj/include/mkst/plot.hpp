#pragma once

// Target-vs-prediction SVG panels from a trace CSV.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkst/evaluation.hpp"

namespace mkst::plot {

struct TraceRow {
  data::Instant time;
  std::string site;
  double target = 0;
  double prediction = 0;
};

inline std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "timestamp,site,target,prediction")
    throw ValidationError("trace " + path.string() + ": expected header `timestamp,site,target,prediction`");
  std::vector<TraceRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(trim(item));
    if (f.size() != 4) throw ValidationError("trace line " + std::to_string(line_no) + ": expected 4 fields");
    TraceRow r;
    r.time = data::require_instant(f[0], "trace line " + std::to_string(line_no));
    r.site = f[1];
    try {
      r.target = std::stod(f[2]);
      r.prediction = std::stod(f[3]);
    } catch (const std::logic_error&) {
      throw ValidationError("trace line " + std::to_string(line_no) + ": bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

struct Panel {
  std::string site;
  std::vector<std::pair<data::Instant, double>> target;
  std::vector<std::pair<data::Instant, double>> prediction;
};

/// Rows inside the span for the requested sites (all sites when empty), one
/// panel per site in request order.
inline std::vector<Panel> select_panels(const std::vector<TraceRow>& rows, const eval::TimeSpan& span,
                                        std::vector<std::string> sites) {
  std::vector<std::string> known;
  for (const auto& r : rows)
    if (std::find(known.begin(), known.end(), r.site) == known.end()) known.push_back(r.site);
  if (sites.empty()) sites = known;
  for (const auto& s : sites)
    if (std::find(known.begin(), known.end(), s) == known.end()) throw ValidationError("unknown site id `" + s + "`");
  std::vector<Panel> panels;
  for (const auto& s : sites) {
    Panel p{s, {}, {}};
    for (const auto& r : rows) {
      if (r.site != s || r.time < span.begin || !(r.time < span.end)) continue;
      p.target.emplace_back(r.time, r.target);
      p.prediction.emplace_back(r.time, r.prediction);
    }
    if (p.target.empty()) throw ValidationError("trace has no points for site `" + s + "` in the requested span");
    panels.push_back(std::move(p));
  }
  return panels;
}

inline std::string xml_escape(const std::string& s) {
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

inline std::string render_svg(const std::vector<Panel>& panels, const eval::TimeSpan& span) {
  constexpr double width = 900, panel_h = 220, margin = 50;
  const double height = panel_h * static_cast<double>(panels.size()) + margin;
  const double t0 = static_cast<double>(span.begin.time_since_epoch().count());
  const double t1 = static_cast<double>(span.end.time_since_epoch().count());
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const auto& p = panels[i];
    const double top = margin / 2 + panel_h * static_cast<double>(i);
    double lo = 0, hi = 1;
    for (const auto* series : {&p.target, &p.prediction})
      for (const auto& [t, v] : *series) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    auto x_of = [&](data::Instant t) {
      return margin + (width - 2 * margin) * (static_cast<double>(t.time_since_epoch().count()) - t0) / (t1 - t0);
    };
    auto y_of = [&](double v) { return top + panel_h - margin / 2 - (panel_h - margin) * (v - lo) / (hi - lo); };
    svg << "<g class=\"panel\" data-site=\"" << xml_escape(p.site) << "\">\n"
        << "<text x=\"" << margin << "\" y=\"" << top + 12 << "\" font-family=\"sans-serif\" font-size=\"12\">"
        << xml_escape(p.site) << "</text>\n"
        << "<rect x=\"" << margin << "\" y=\"" << top + 18 << "\" width=\"" << width - 2 * margin << "\" height=\""
        << panel_h - margin << "\" fill=\"none\" stroke=\"#999\"/>\n";
    auto polyline = [&](const std::vector<std::pair<data::Instant, double>>& series, const char* cls, const char* color) {
      svg << "<polyline class=\"" << cls << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
      for (std::size_t k = 0; k < series.size(); ++k) {
        if (k) svg << ' ';
        svg << eval::format_number(x_of(series[k].first)) << ',' << eval::format_number(y_of(series[k].second));
      }
      svg << "\"/>\n";
    };
    polyline(p.target, "target", "#1f77b4");
    polyline(p.prediction, "prediction", "#d62728");
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_plot(const std::filesystem::path& trace, const eval::TimeSpan& span,
                       const std::vector<std::string>& sites, const std::filesystem::path& out_path) {
  const auto panels = select_panels(read_trace_csv(trace), span, sites);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + out_path.string());
  out << render_svg(panels, span);
}

}  // namespace mkst::plot
