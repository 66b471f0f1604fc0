#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "recurlens/error.hpp"

namespace recurlens {

// ---------------------------------------------------------------------------
// CSV tables (the study outputs: comma separated, header row, no quoting)

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError(1, "missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  double number(std::size_t row, const std::string& name) const {
    const std::string& cell = rows.at(row).at(column(name));
    try {
      std::size_t used = 0;
      const double v = std::stod(cell, &used);
      if (used == cell.size()) return v;
    } catch (const std::exception&) {
    }
    throw ParseError(row + 2, "column '" + name + "' holds '" + cell + "', not a number");
  }

  const std::string& text(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ParseError(1, "empty CSV");
  t.header = split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw ParseError(lineno, "expected " + std::to_string(t.header.size()) + " cells, got " +
                                   std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable load_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_csv(is);
}

// ---------------------------------------------------------------------------
// Line plots rendered to standalone SVG. Output depends only on the input
// values, so identical data gives identical bytes.

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;      // log10 axis starting at 1
  bool unit_y = false;     // fixed [0, 1] axis
  std::string desc;        // embedded as <desc>, e.g. run id and config hash
  std::vector<Series> series;
};

namespace detail {

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

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  if (std::abs(v - std::round(v)) < 1e-9) std::snprintf(buf, sizeof buf, "%.0f", v);
  else std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// 1, 2 or 5 times a power of ten, at least range / target.
inline double nice_step(double range, int target) {
  const double raw = range / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) return m * mag;
  return 10.0 * mag;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                          "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace detail

inline std::string render_svg(const LinePlot& p) {
  const double W = 760, H = 440, left = 70, right = 170, top = 40, bottom = 55;
  const double pw = W - left - right, ph = H - top - bottom;

  double xmin = 0, xmax = 1, ymax_data = 0, ymin_data = 0;
  bool first = true;
  for (const auto& s : p.series) {
    if (s.x.size() != s.y.size()) throw DimensionError("series '" + s.name + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin_data = ymax_data = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin_data = std::min(ymin_data, s.y[i]);
      ymax_data = std::max(ymax_data, s.y[i]);
    }
  }
  if (xmax == xmin) {
    xmin -= 1;
    xmax += 1;
  }

  double y0, y1;
  if (p.log_y) {
    y0 = 0.0;  // log10(1): ranks never go below 1
    y1 = std::max(1.0, std::ceil(std::log10(std::max(ymax_data, 1.0)) - 1e-12));
  } else if (p.unit_y) {
    y0 = 0.0;
    y1 = 1.0;
  } else {
    y0 = std::min(0.0, ymin_data);
    y1 = ymax_data > y0 ? ymax_data : y0 + 1.0;
  }
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) {
    const double v = p.log_y ? std::log10(std::max(y, 1.0)) : y;
    return top + ph - (v - y0) / (y1 - y0) * ph;
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<title>" << detail::xml_escape(p.title) << "</title>\n";
  if (!p.desc.empty()) o << "<desc>" << detail::xml_escape(p.desc) << "</desc>\n";
  o << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
    << detail::xml_escape(p.title) << "</text>\n";

  // Grid and ticks.
  o << "<g stroke=\"#dddddd\" stroke-width=\"1\">\n";
  std::vector<std::pair<double, std::string>> yticks;
  if (p.log_y) {
    for (int e = 0; e <= static_cast<int>(y1); ++e) yticks.emplace_back(std::pow(10.0, e), detail::tick_label(std::pow(10.0, e)));
  } else {
    const double step = detail::nice_step(y1 - y0, 5);
    for (double v = std::ceil(y0 / step) * step; v <= y1 + 1e-9; v += step) yticks.emplace_back(v, detail::tick_label(v));
  }
  for (const auto& [v, _] : yticks)
    o << "<line x1=\"" << detail::fmt(left) << "\" y1=\"" << detail::fmt(py(v)) << "\" x2=\"" << detail::fmt(left + pw)
      << "\" y2=\"" << detail::fmt(py(v)) << "\"/>\n";
  const double xstep = std::max(1.0, detail::nice_step(xmax - xmin, 10));
  std::vector<double> xticks;
  for (double v = std::ceil(xmin / xstep) * xstep; v <= xmax + 1e-9; v += xstep) xticks.push_back(v);
  for (double v : xticks)
    o << "<line x1=\"" << detail::fmt(px(v)) << "\" y1=\"" << detail::fmt(top) << "\" x2=\"" << detail::fmt(px(v))
      << "\" y2=\"" << detail::fmt(top + ph) << "\"/>\n";
  o << "</g>\n";
  o << "<rect x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(top) << "\" width=\"" << detail::fmt(pw)
    << "\" height=\"" << detail::fmt(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (const auto& [v, label] : yticks)
    o << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(py(v) + 4) << "\" text-anchor=\"end\">"
      << label << "</text>\n";
  for (double v : xticks)
    o << "<text x=\"" << detail::fmt(px(v)) << "\" y=\"" << detail::fmt(top + ph + 16) << "\" text-anchor=\"middle\">"
      << detail::tick_label(v) << "</text>\n";
  o << "<text x=\"" << detail::fmt(left + pw / 2) << "\" y=\"" << detail::fmt(H - 14) << "\" text-anchor=\"middle\">"
    << detail::xml_escape(p.x_label) << "</text>\n";
  o << "<text transform=\"translate(18," << detail::fmt(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << detail::xml_escape(p.y_label) << "</text>\n";

  // Series and legend.
  for (std::size_t i = 0; i < p.series.size(); ++i) {
    const auto& s = p.series[i];
    const char* color = detail::kPalette[i % std::size(detail::kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t j = 0; j < s.x.size(); ++j) o << (j ? " " : "") << detail::fmt(px(s.x[j])) << ',' << detail::fmt(py(s.y[j]));
    o << "\"/>\n";
    for (std::size_t j = 0; j < s.x.size(); ++j)
      o << "<circle cx=\"" << detail::fmt(px(s.x[j])) << "\" cy=\"" << detail::fmt(py(s.y[j])) << "\" r=\"2.2\" fill=\""
        << color << "\"/>\n";
    const double ly = top + 12 + 18 * static_cast<double>(i);
    o << "<line x1=\"" << detail::fmt(left + pw + 12) << "\" y1=\"" << detail::fmt(ly) << "\" x2=\""
      << detail::fmt(left + pw + 36) << "\" y2=\"" << detail::fmt(ly) << "\" stroke=\"" << color
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << detail::fmt(left + pw + 42) << "\" y=\"" << detail::fmt(ly + 4) << "\">"
      << detail::xml_escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Study plots built from the study CSVs, so each plotted series has a CSV twin.

namespace detail {

inline std::string run_desc(const CsvTable& t) {
  if (t.rows.empty()) return {};
  return "run_id=" + t.text(0, "run_id") + " config_hash=" + t.text(0, "config_hash");
}

}  // namespace detail

/// Mean rank of the predicted token per unrolled block, one series per lens.
inline LinePlot plot_unrolled(const CsvTable& t, const std::string& statistic = "mean_rank") {
  LinePlot p;
  p.title = "Rank of the predicted token across unrolled blocks";
  p.x_label = "block index";
  p.y_label = statistic + " (log scale)";
  p.log_y = true;
  p.desc = detail::run_desc(t);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string lens = t.text(i, "lens");
    if (!index.count(lens)) {
      index[lens] = p.series.size();
      p.series.push_back({lens + " lens", {}, {}});
    }
    auto& s = p.series[index[lens]];
    s.x.push_back(t.number(i, "block_index"));
    s.y.push_back(t.number(i, statistic));
  }
  return p;
}

/// Signed-prefix proportion per recurrence step for one lens, one series per core block.
inline LinePlot plot_prefix(const CsvTable& t, const std::string& lens) {
  LinePlot p;
  p.title = "Signed-integer prefixes in the top-k, " + lens + " lens";
  p.x_label = "recurrence step";
  p.y_label = "proportion";
  p.unit_y = true;
  p.desc = detail::run_desc(t);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.text(i, "lens") != lens) continue;
    const std::string block = t.text(i, "block");
    if (!index.count(block)) {
      index[block] = p.series.size();
      p.series.push_back({block, {}, {}});
    }
    auto& s = p.series[index[block]];
    s.x.push_back(t.number(i, "cycle"));
    s.y.push_back(t.number(i, "proportion"));
  }
  return p;
}

/// Final, intermediate and baseline token ranks per recurrence step for one (block, lens).
inline LinePlot plot_signature(const CsvTable& t, const std::string& block, const std::string& lens,
                               const std::string& statistic = "mean_rank") {
  LinePlot p;
  p.title = "Signature token ranks at " + block + ", " + lens + " lens";
  p.x_label = "recurrence step";
  p.y_label = statistic + " (log scale)";
  p.log_y = true;
  p.desc = detail::run_desc(t);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (t.text(i, "block") != block || t.text(i, "lens") != lens) continue;
    const std::string token = t.text(i, "token");
    if (!index.count(token)) {
      index[token] = p.series.size();
      p.series.push_back({token, {}, {}});
    }
    auto& s = p.series[index[token]];
    s.x.push_back(t.number(i, "cycle"));
    s.y.push_back(t.number(i, statistic));
  }
  return p;
}

inline LinePlot plot_depth(const CsvTable& t) {
  LinePlot p;
  p.title = "Accuracy against recurrence depth";
  p.x_label = "recurrence steps r";
  p.y_label = "accuracy";
  p.unit_y = true;
  p.desc = detail::run_desc(t);
  Series s{"toy model", {}, {}};
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    s.x.push_back(t.number(i, "r"));
    s.y.push_back(t.number(i, "accuracy"));
  }
  p.series.push_back(std::move(s));
  return p;
}

inline void save_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace recurlens
