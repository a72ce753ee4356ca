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

// Transport-plan parameterizations. The plan at x factorizes as
// pi(y, y' | x) = pi_theta(y | x) pi_psi(y' | y, x); both factors are either
// implicit noise-fed generators or explicit softmax conditionals over a
// finite label set.

#pragma once

#include "cotmmd/diffengine.hpp"
#include "cotmmd/rng.hpp"
#include "cotmmd/types.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace cotmmd {

enum class Activation { tanh, relu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw DomainError("unknown activation '" + s + "'");
}

/// Layer widths from input to output; at least one hidden layer.
struct MlpConfig {
  std::vector<Eigen::Index> widths;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;

  void validate() const {
    require_domain(widths.size() >= 3, "MlpConfig: need input, >= 1 hidden and output widths");
    for (auto w : widths) require_domain(w > 0, "MlpConfig: widths must be positive");
  }
};

/// Fully connected network: hidden layers apply the activation, the output
/// layer is affine. Weights are Glorot-uniform, biases zero.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(MlpConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    RngStream rng = RngStream(cfg_.seed).split("mlp-init");
    for (std::size_t l = 0; l + 1 < cfg_.widths.size(); ++l) {
      const Eigen::Index fan_in = cfg_.widths[l];
      const Eigen::Index fan_out = cfg_.widths[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Matrix w(fan_in, fan_out);
      for (Eigen::Index i = 0; i < fan_in; ++i)
        for (Eigen::Index j = 0; j < fan_out; ++j) w(i, j) = rng.uniform(-bound, bound);
      weights_.push_back(std::move(w));
      biases_.push_back(Matrix::Zero(1, fan_out));
    }
  }

  const MlpConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return weights_.size(); }
  Eigen::Index input_dim() const { return cfg_.widths.front(); }
  Eigen::Index output_dim() const { return cfg_.widths.back(); }

  std::vector<Matrix>& weights() { return weights_; }
  std::vector<Matrix>& biases() { return biases_; }
  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Matrix>& biases() const { return biases_; }

  /// W0, b0, W1, b1, ... in layer order.
  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
  }

  Matrix forward(const Matrix& in) const {
    require_dims(in.cols() == input_dim(), "Mlp::forward: input has " +
                                               std::to_string(in.cols()) + " columns, expected " +
                                               std::to_string(input_dim()));
    Matrix h = in;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = ad::eval::add_row(ad::eval::matmul(h, weights_[l]), biases_[l]);
      if (l + 1 < weights_.size())
        h = cfg_.activation == Activation::tanh ? ad::eval::tanh(h) : ad::eval::relu(h);
    }
    return h;
  }

  /// Parameter leaves on `tape`, ordered as parameters().
  std::vector<ad::Var> bind(ad::Tape& tape) {
    std::vector<ad::Var> out;
    for (Matrix* p : parameters()) out.push_back(tape.parameter(*p));
    return out;
  }

  ad::Var forward(const std::vector<ad::Var>& params, const ad::Var& in) const {
    require_dims(params.size() == 2 * weights_.size(), "Mlp::forward: wrong parameter count");
    require_dims(in.cols() == input_dim(), "Mlp::forward: input has " +
                                               std::to_string(in.cols()) + " columns, expected " +
                                               std::to_string(input_dim()));
    ad::Var h = in;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = ad::add_row(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < weights_.size())
        h = cfg_.activation == Activation::tanh ? ad::tanh(h) : ad::relu(h);
    }
    return h;
  }

  void zero_output_layer() {
    weights_.back().setZero();
    biases_.back().setZero();
  }

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  MlpConfig cfg_;
  std::vector<Matrix> weights_;
  std::vector<Matrix> biases_;
};

namespace detail {
inline nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require_dims(static_cast<Eigen::Index>(data.size()) == rows * cols,
               "checkpoint: matrix data length mismatch");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<std::size_t>(i * cols + k)];
  return m;
}
}  // namespace detail

inline nlohmann::json Mlp::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < weights_.size(); ++l)
    layers.push_back({{"weight", detail::matrix_to_json(weights_[l])},
                      {"bias", detail::matrix_to_json(biases_[l])}});
  return {{"widths", cfg_.widths},
          {"activation", to_string(cfg_.activation)},
          {"seed", cfg_.seed},
          {"layers", layers}};
}

inline Mlp Mlp::from_json(const nlohmann::json& j) {
  MlpConfig cfg;
  cfg.widths = j.at("widths").get<std::vector<Eigen::Index>>();
  cfg.activation = activation_from_string(j.at("activation").get<std::string>());
  cfg.seed = j.at("seed").get<std::uint64_t>();
  Mlp m(cfg);
  const auto& layers = j.at("layers");
  require_dims(layers.size() == m.num_layers(), "checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Matrix w = detail::matrix_from_json(layers[l].at("weight"));
    Matrix b = detail::matrix_from_json(layers[l].at("bias"));
    require_dims(w.rows() == m.weights_[l].rows() && w.cols() == m.weights_[l].cols() &&
                     b.cols() == m.biases_[l].cols() && b.rows() == 1,
                 "checkpoint: layer shape mismatch");
    m.weights_[l] = std::move(w);
    m.biases_[l] = std::move(b);
  }
  return m;
}

struct ImplicitConfig {
  Eigen::Index cond_dim = 1;
  Eigen::Index noise_dim = 10;
  Eigen::Index out_dim = 1;
  std::vector<Eigen::Index> hidden{64, 64};
  Activation activation = Activation::tanh;
  /// Output = first out_dim conditioning columns + network output.
  bool residual = false;
  std::uint64_t seed = 0;
};

/// Noise-fed generator: row i of the output is net([cond_i, noise_i]).
/// pi_theta uses cond = x; pi_psi uses cond = [y, x] (optionally residual
/// in y, so that a zero output layer makes it the identity on y).
class ImplicitGenerator {
 public:
  ImplicitGenerator() = default;

  explicit ImplicitGenerator(ImplicitConfig cfg) : cfg_(std::move(cfg)) {
    require_domain(cfg_.cond_dim >= 0 && cfg_.noise_dim >= 0 && cfg_.out_dim >= 1,
                   "ImplicitGenerator: invalid dimensions");
    require_domain(!cfg_.residual || cfg_.cond_dim >= cfg_.out_dim,
                   "ImplicitGenerator: residual needs cond_dim >= out_dim");
    MlpConfig m;
    m.widths.push_back(cfg_.cond_dim + cfg_.noise_dim);
    for (auto h : cfg_.hidden) m.widths.push_back(h);
    m.widths.push_back(cfg_.out_dim);
    m.activation = cfg_.activation;
    m.seed = cfg_.seed;
    net_ = Mlp(m);
  }

  const ImplicitConfig& config() const { return cfg_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  Eigen::Index noise_dim() const { return cfg_.noise_dim; }
  Eigen::Index out_dim() const { return cfg_.out_dim; }

  Matrix sample(const Matrix& cond, const Matrix& noise) const {
    check(cond.rows(), cond.cols(), noise.rows(), noise.cols());
    Matrix out = net_.forward(ad::eval::concat_cols(cond, noise));
    if (cfg_.residual) out += cond.leftCols(cfg_.out_dim);
    return out;
  }

  ad::Var sample(const std::vector<ad::Var>& params, const ad::Var& cond,
                 const ad::Var& noise) const {
    check(cond.rows(), cond.cols(), noise.rows(), noise.cols());
    ad::Var out = net_.forward(params, ad::concat_cols(cond, noise));
    if (cfg_.residual) {
      ad::Var head = cfg_.cond_dim == cfg_.out_dim
                         ? cond
                         : cond.tape()->record(
                               cond.value().leftCols(cfg_.out_dim), {cond},
                               [ic = cond.id(), d = cfg_.out_dim](ad::Tape& t, std::size_t self) {
                                 t.grad_ref(ic).leftCols(d) += t.grad(self);
                               },
                               "left_cols");
      out = ad::add(out, head);
    }
    return out;
  }

  nlohmann::json to_json() const {
    return {{"kind", "implicit"},
            {"cond_dim", cfg_.cond_dim},
            {"noise_dim", cfg_.noise_dim},
            {"out_dim", cfg_.out_dim},
            {"residual", cfg_.residual},
            {"net", net_.to_json()}};
  }

  static ImplicitGenerator from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "implicit")
      throw Error("checkpoint: expected an implicit generator");
    ImplicitConfig cfg;
    cfg.cond_dim = j.at("cond_dim").get<Eigen::Index>();
    cfg.noise_dim = j.at("noise_dim").get<Eigen::Index>();
    cfg.out_dim = j.at("out_dim").get<Eigen::Index>();
    cfg.residual = j.at("residual").get<bool>();
    Mlp net = Mlp::from_json(j.at("net"));
    const auto& w = net.config().widths;
    cfg.hidden.assign(w.begin() + 1, w.end() - 1);
    cfg.activation = net.config().activation;
    cfg.seed = net.config().seed;
    ImplicitGenerator g(cfg);
    g.net_ = std::move(net);
    return g;
  }

 private:
  void check(Eigen::Index cr, Eigen::Index cc, Eigen::Index nr, Eigen::Index nc) const {
    require_dims(cc == cfg_.cond_dim, "ImplicitGenerator: conditioning has " + std::to_string(cc) +
                                          " columns, expected " + std::to_string(cfg_.cond_dim));
    require_dims(nc == cfg_.noise_dim, "ImplicitGenerator: noise has " + std::to_string(nc) +
                                           " columns, expected " + std::to_string(cfg_.noise_dim));
    require_dims(cr == nr, "ImplicitGenerator: conditioning and noise row counts differ");
  }

  ImplicitConfig cfg_;
  Mlp net_;
};

/// Convenience: n x k i.i.d. standard normal noise.
inline Matrix draw_noise(RngStream& rng, Eigen::Index n, Eigen::Index k) {
  return rng.normal_matrix(n, k);
}

struct ExplicitConfig {
  Eigen::Index x_dim = 1;
  Eigen::Index n_labels = 2;
  /// If set, the input is [one_hot(l_j), x] and the model is pi(. | l_j, x).
  bool label_conditioned = false;
  std::vector<Eigen::Index> hidden{64, 64};
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
};

/// Softmax conditional over n labels.
class ExplicitConditional {
 public:
  ExplicitConditional() = default;

  explicit ExplicitConditional(ExplicitConfig cfg) : cfg_(std::move(cfg)) {
    require_domain(cfg_.n_labels >= 1 && cfg_.x_dim >= 0, "ExplicitConditional: bad dimensions");
    MlpConfig m;
    m.widths.push_back(cfg_.x_dim + (cfg_.label_conditioned ? cfg_.n_labels : 0));
    for (auto h : cfg_.hidden) m.widths.push_back(h);
    m.widths.push_back(cfg_.n_labels);
    m.activation = cfg_.activation;
    m.seed = cfg_.seed;
    net_ = Mlp(m);
  }

  const ExplicitConfig& config() const { return cfg_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  Eigen::Index n_labels() const { return cfg_.n_labels; }

  /// Rows (i * n + j) hold [e_j, x_i].
  Matrix label_inputs(const Matrix& x) const {
    require_dims(x.cols() == cfg_.x_dim, "ExplicitConditional: x has " + std::to_string(x.cols()) +
                                             " columns, expected " + std::to_string(cfg_.x_dim));
    const Eigen::Index n = cfg_.n_labels;
    Matrix in = Matrix::Zero(x.rows() * n, n + x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        in(i * n + j, j) = 1.0;
        in.block(i * n + j, n, 1, x.cols()) = x.row(i);
      }
    return in;
  }

  /// pi(. | x): one probability row per input row. Not label-conditioned.
  Matrix forward(const Matrix& x) const {
    require_domain(!cfg_.label_conditioned, "forward: model is label-conditioned");
    check_x(x.cols());
    return ad::eval::softmax_rows(net_.forward(x));
  }

  /// pi(. | l_j, x_i) for every label j, stacked as rows (i * n + j).
  Matrix forward_all_labels(const Matrix& x) const {
    require_domain(cfg_.label_conditioned, "forward_all_labels: model is not label-conditioned");
    return ad::eval::softmax_rows(net_.forward(label_inputs(x)));
  }

  ad::Var forward(const std::vector<ad::Var>& params, const ad::Var& x) const {
    require_domain(!cfg_.label_conditioned, "forward: model is label-conditioned");
    check_x(x.cols());
    return ad::softmax_rows(net_.forward(params, x));
  }

  ad::Var forward_all_labels(const std::vector<ad::Var>& params, ad::Tape& tape,
                             const Matrix& x) const {
    require_domain(cfg_.label_conditioned, "forward_all_labels: model is not label-conditioned");
    return ad::softmax_rows(net_.forward(params, tape.constant(label_inputs(x))));
  }

  nlohmann::json to_json() const {
    return {{"kind", "explicit"},
            {"x_dim", cfg_.x_dim},
            {"n_labels", cfg_.n_labels},
            {"label_conditioned", cfg_.label_conditioned},
            {"net", net_.to_json()}};
  }

  static ExplicitConditional from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "explicit")
      throw Error("checkpoint: expected an explicit conditional");
    ExplicitConfig cfg;
    cfg.x_dim = j.at("x_dim").get<Eigen::Index>();
    cfg.n_labels = j.at("n_labels").get<Eigen::Index>();
    cfg.label_conditioned = j.at("label_conditioned").get<bool>();
    Mlp net = Mlp::from_json(j.at("net"));
    const auto& w = net.config().widths;
    cfg.hidden.assign(w.begin() + 1, w.end() - 1);
    cfg.activation = net.config().activation;
    cfg.seed = net.config().seed;
    ExplicitConditional e(cfg);
    e.net_ = std::move(net);
    return e;
  }

 private:
  void check_x(Eigen::Index cols) const {
    require_dims(cols == cfg_.x_dim, "ExplicitConditional: x has " + std::to_string(cols) +
                                         " columns, expected " + std::to_string(cfg_.x_dim));
  }

  ExplicitConfig cfg_;
  Mlp net_;
};

/// Marginal of the composed plan on the second label:
/// q_i = sum_j pi_psi(. | l_j, x_i) pi_theta(l_j | x_i).
inline Matrix plan_marginal(const ExplicitConditional& theta, const ExplicitConditional& psi,
                            const Matrix& x) {
  return ad::eval::block_combine(theta.forward(x), psi.forward_all_labels(x));
}

/// Checkpoint document: {"format": "cotmmd-checkpoint", "version": 1,
/// "models": {name: model json}}.
inline nlohmann::json make_checkpoint(const std::vector<std::pair<std::string, nlohmann::json>>& models) {
  nlohmann::json j;
  j["format"] = "cotmmd-checkpoint";
  j["version"] = 1;
  j["models"] = nlohmann::json::object();
  for (const auto& [name, m] : models) j["models"][name] = m;
  return j;
}

}  // namespace cotmmd
