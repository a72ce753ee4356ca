/*
 * Copyright 2026 The cotmmd Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "cotmmd/dataset.hpp"
#include "cotmmd/harness/config.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef COTMMD_VERSION
#define COTMMD_VERSION "0.1.0"
#endif

namespace cotmmd::harness {

/// A CSV table. Cells are already formatted; numbers go through cell().
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    require_dims(row.size() == columns.size(), "Table: row has " + std::to_string(row.size()) +
                                                   " cells, expected " +
                                                   std::to_string(columns.size()));
    rows.push_back(std::move(row));
  }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw Error("Table: no column '" + name + "'");
  }
};

inline std::string cell(double v) {
  if (std::isnan(v)) return "nan";
  return format_double(v);
}
inline std::string cell(long long v) { return std::to_string(v); }
inline std::string cell(std::uint64_t v) { return std::to_string(v); }
inline std::string cell(Eigen::Index v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(bool v) { return v ? "true" : "false"; }
inline std::string cell(const std::string& v) { return v; }
inline std::string cell(const char* v) { return v; }

inline void write_csv(std::ostream& os, const Table& t) {
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << (i ? "," : "") << t.columns[i];
  os << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  }
}

inline std::string csv_string(const Table& t) {
  std::ostringstream os;
  write_csv(os, t);
  return os.str();
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Plot {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  bool log_x = false;
  std::vector<Series> series;
};

struct Report {
  std::string experiment;
  Table table;
  Plot plot;
  /// Human-readable summary lines, printed by the CLI.
  std::vector<std::string> notes;
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

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                 "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return colors[i % 8];
}

}  // namespace detail

/// Line plot as a standalone SVG. Each series becomes one polyline whose
/// data-values attribute holds the exact points ("x,y;x,y;..."), so the
/// plotted data can be read back without loss. Non-finite points are
/// skipped in the drawing but kept in data-values.
inline std::string render_svg(const Plot& p) {
  const double w = 640, h = 420, left = 70, right = 150, top = 40, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  auto tx = [&](double v) { return p.log_x ? std::log10(v) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(tx(s.x[i])) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x0 == x1) x0 -= 0.5, x1 += 0.5;
  if (y0 == y1) y0 -= 0.5, y1 += 0.5;
  auto sx = [&](double v) { return left + (tx(v) - x0) / (x1 - x0) * pw; };
  auto sy = [&](double v) { return top + (1.0 - (v - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << detail::xml_escape(p.title) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
    const double px = left + pw * k / 4.0, py = top + ph * (1.0 - k / 4.0);
    const double lx = p.log_x ? std::pow(10.0, fx) : fx;
    os << "<text x=\"" << detail::fixed2(px) << "\" y=\"" << h - bottom + 18
       << "\" text-anchor=\"middle\" font-size=\"11\">" << format_double(std::round(lx * 1000) / 1000)
       << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << detail::fixed2(py + 4)
       << "\" text-anchor=\"end\" font-size=\"11\">" << format_double(std::round(fy * 1000) / 1000)
       << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">" << detail::xml_escape(p.xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
     << "transform=\"rotate(-90 16 " << top + ph / 2 << ")\">" << detail::xml_escape(p.ylabel)
     << "</text>\n";
  for (std::size_t s = 0; s < p.series.size(); ++s) {
    const Series& se = p.series[s];
    std::string pts, values;
    for (std::size_t i = 0; i < se.x.size() && i < se.y.size(); ++i) {
      values += (i ? ";" : "") + cell(se.x[i]) + "," + cell(se.y[i]);
      if (!std::isfinite(tx(se.x[i])) || !std::isfinite(se.y[i])) continue;
      pts += (pts.empty() ? "" : " ") + detail::fixed2(sx(se.x[i])) + "," + detail::fixed2(sy(se.y[i]));
    }
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(s) << "\" stroke-width=\"1.5\""
       << " data-series=\"" << detail::xml_escape(se.name) << "\" data-values=\"" << values
       << "\" points=\"" << pts << "\"/>\n";
    os << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 14 + 16 * s << "\" font-size=\"11\" fill=\""
       << detail::palette(s) << "\">" << detail::xml_escape(se.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Parses the data-values attributes of an SVG written by render_svg.
inline std::vector<Series> read_svg_series(const std::string& svg) {
  std::vector<Series> out;
  std::size_t pos = 0;
  const std::string name_key = "data-series=\"", val_key = "data-values=\"";
  while ((pos = svg.find(name_key, pos)) != std::string::npos) {
    Series s;
    const std::size_t ns = pos + name_key.size();
    s.name = svg.substr(ns, svg.find('"', ns) - ns);
    const std::size_t vs = svg.find(val_key, ns) + val_key.size();
    const std::string vals = svg.substr(vs, svg.find('"', vs) - vs);
    std::stringstream ss(vals);
    std::string pair;
    while (std::getline(ss, pair, ';')) {
      const auto comma = pair.find(',');
      s.x.push_back(std::strtod(pair.substr(0, comma).c_str(), nullptr));
      s.y.push_back(std::strtod(pair.substr(comma + 1).c_str(), nullptr));
    }
    out.push_back(std::move(s));
    pos = vs;
  }
  return out;
}

inline nlohmann::json make_meta(const ExperimentConfig& c, const Report& r) {
  return {{"schema_version", kSchemaVersion},
          {"experiment", c.experiment},
          {"config_hash", config_hash(c)},
          {"config", to_json(c)},
          {"version", COTMMD_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"rows", r.table.rows.size()},
          {"columns", r.table.columns}};
}

/// Writes <out>/<experiment>.csv, <out>/<experiment>.svg and <out>/meta.json.
inline void write_outputs(const ExperimentConfig& c, const Report& r) {
  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  const fs::path base = fs::path(c.out_dir) / r.experiment;
  auto open = [](const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write '" + p.string() + "'");
    return f;
  };
  {
    auto f = open(base.string() + ".csv");
    write_csv(f, r.table);
  }
  {
    auto f = open(base.string() + ".svg");
    f << render_svg(r.plot);
  }
  {
    auto f = open(fs::path(c.out_dir) / "meta.json");
    f << make_meta(c, r).dump(2) << '\n';
  }
}

}  // namespace cotmmd::harness
