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

#include "cotmmd/types.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace cotmmd {

/// Paired samples {(x_i, y_i)} from a joint distribution.
struct JointDataset {
  Matrix x;
  Matrix y;

  JointDataset() = default;
  JointDataset(Matrix xs, Matrix ys) : x(std::move(xs)), y(std::move(ys)) { validate(); }

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index x_dim() const { return x.cols(); }
  Eigen::Index y_dim() const { return y.cols(); }

  void validate() const {
    require_dims(x.rows() == y.rows(), "JointDataset: " + std::to_string(x.rows()) +
                                           " covariate rows vs " + std::to_string(y.rows()) +
                                           " response rows");
    require_domain(x.allFinite() && y.allFinite(), "JointDataset: non-finite entry");
  }

  JointDataset subset(const std::vector<Eigen::Index>& idx) const {
    Matrix xs(static_cast<Eigen::Index>(idx.size()), x.cols());
    Matrix ys(static_cast<Eigen::Index>(idx.size()), y.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      xs.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
      ys.row(static_cast<Eigen::Index>(i)) = y.row(idx[i]);
    }
    return {std::move(xs), std::move(ys)};
  }
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// Header row x_0..x_{dx-1},y_0..y_{dy-1}, one sample per line.
inline void write_dataset_csv(std::ostream& os, const JointDataset& d) {
  for (Eigen::Index j = 0; j < d.x_dim(); ++j) os << (j ? "," : "") << "x_" << j;
  for (Eigen::Index j = 0; j < d.y_dim(); ++j) os << (d.x_dim() + j ? "," : "") << "y_" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    bool first = true;
    for (Eigen::Index j = 0; j < d.x_dim(); ++j, first = false)
      os << (first ? "" : ",") << format_double(d.x(i, j));
    for (Eigen::Index j = 0; j < d.y_dim(); ++j, first = false)
      os << (first ? "" : ",") << format_double(d.y(i, j));
    os << '\n';
  }
}

inline JointDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("dataset csv: missing header");
  Eigen::Index dx = 0, dy = 0;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) {
      if (!col.empty() && col.back() == '\r') col.pop_back();
      if (col == "x_" + std::to_string(dx) && dy == 0) {
        ++dx;
      } else if (col == "y_" + std::to_string(dy)) {
        ++dy;
      } else {
        throw Error("dataset csv: unexpected column '" + col + "'");
      }
    }
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> r;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (static_cast<Eigen::Index>(r.size()) != dx + dy)
      throw Error("dataset csv: row " + std::to_string(rows.size() + 1) + " has " +
                  std::to_string(r.size()) + " fields");
    rows.push_back(std::move(r));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix x(n, dx), y(n, dy);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < dx; ++j) x(i, j) = rows[static_cast<std::size_t>(i)][j];
    for (Eigen::Index j = 0; j < dy; ++j) y(i, j) = rows[static_cast<std::size_t>(i)][dx + j];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace cotmmd
