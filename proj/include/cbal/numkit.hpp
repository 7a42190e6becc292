// Copyright 2026 The cbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal dense kernel: stable softmax / log-sum-exp, a multilayer perceptron
// with hand-written backpropagation, and Adam.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cbal/binary_io.hpp"
#include "cbal/error.hpp"
#include "cbal/matrix.hpp"
#include "cbal/rng.hpp"

namespace cbal {

// ---------------------------------------------------------------------------
// Stable reductions

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw DomainError("log_sum_exp: empty vector");
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError("log_sum_exp: non-finite input");
    hi = std::max(hi, x);
  }
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw DomainError("softmax: empty vector");
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : logits) {
    if (!std::isfinite(x)) throw DomainError("softmax: non-finite input");
    hi = std::max(hi, x);
  }
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

// ---------------------------------------------------------------------------
// Multilayer perceptron

/// Hidden-layer nonlinearity. The last layer is always linear.
enum class Activation : std::uint32_t { identity = 0, relu = 1, tanh = 2 };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

struct Mlp {
  std::vector<std::size_t> layer_sizes;  // input, hidden..., output
  std::vector<Matrix> weights;           // weights[l] is in x out
  std::vector<std::vector<double>> biases;
  Activation activation = Activation::relu;

  /// He-uniform for relu, Xavier-uniform otherwise; zero biases.
  static Mlp create(std::vector<std::size_t> sizes, Activation act, Rng& rng) {
    if (sizes.size() < 2) throw DimensionError("Mlp::create: need at least input and output sizes");
    for (std::size_t s : sizes)
      if (s == 0) throw DimensionError("Mlp::create: zero-width layer");
    Mlp net;
    net.layer_sizes = std::move(sizes);
    net.activation = act;
    for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
      const std::size_t in = net.layer_sizes[l], out = net.layer_sizes[l + 1];
      const double limit = act == Activation::relu ? std::sqrt(6.0 / static_cast<double>(in))
                                                   : std::sqrt(6.0 / static_cast<double>(in + out));
      Matrix w(in, out);
      for (double& v : w.data()) v = rng.uniform(-limit, limit);
      net.weights.push_back(std::move(w));
      net.biases.emplace_back(out, 0.0);
    }
    return net;
  }

  std::size_t num_layers() const noexcept { return weights.size(); }
  std::size_t input_size() const noexcept { return layer_sizes.front(); }
  std::size_t output_size() const noexcept { return layer_sizes.back(); }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += (layer_sizes[l] + 1) * layer_sizes[l + 1];
    return n;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

/// Pre- and post-activations of every layer; post[0] is the input batch.
struct MlpTrace {
  std::vector<Matrix> pre;
  std::vector<Matrix> post;

  const Matrix& output() const { return post.back(); }
};

struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  static MlpGrads zeros_like(const Mlp& net) {
    MlpGrads g;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      g.weights.emplace_back(net.weights[l].rows(), net.weights[l].cols());
      g.biases.emplace_back(net.biases[l].size(), 0.0);
    }
    return g;
  }
};

namespace detail {

inline double activate(Activation a, double x) noexcept {
  switch (a) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::identity: break;
  }
  return x;
}

// Derivative expressed through (pre, post) to avoid recomputing tanh.
inline double activate_grad(Activation a, double pre, double post) noexcept {
  switch (a) {
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - post * post;
    case Activation::identity: break;
  }
  return 1.0;
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMajor> view(const Matrix& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}
inline Eigen::Map<RowMajor> view(Matrix& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}

inline Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out(x.rows(), w.cols());
  auto o = view(out);
  o.noalias() = view(x) * view(w);
  const Eigen::Map<const Eigen::RowVectorXd> bias(b.data(), static_cast<Eigen::Index>(b.size()));
  o.rowwise() += bias;
  return out;
}

}  // namespace detail

inline void check_mlp_input(const Mlp& net, const Matrix& x) {
  if (x.cols() != net.input_size())
    throw DimensionError("mlp_forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                         std::to_string(net.input_size()));
}

inline MlpTrace mlp_forward(const Mlp& net, const Matrix& x) {
  check_mlp_input(net, x);
  MlpTrace trace;
  trace.post.push_back(x);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    Matrix pre = detail::affine(trace.post.back(), net.weights[l], net.biases[l]);
    const bool last = l + 1 == net.num_layers();
    Matrix post = pre;
    if (!last && net.activation != Activation::identity)
      for (double& v : post.data()) v = detail::activate(net.activation, v);
    trace.pre.push_back(std::move(pre));
    trace.post.push_back(std::move(post));
  }
  return trace;
}

/// Output only, without keeping the trace.
inline Matrix mlp_predict(const Mlp& net, const Matrix& x) {
  check_mlp_input(net, x);
  Matrix h = x;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    h = detail::affine(h, net.weights[l], net.biases[l]);
    if (l + 1 < net.num_layers() && net.activation != Activation::identity)
      for (double& v : h.data()) v = detail::activate(net.activation, v);
  }
  return h;
}

/// Backpropagates `upstream` = dLoss/dOutput through the trace. When
/// `input_grad` is non-null it receives dLoss/dInput.
inline MlpGrads mlp_backward(const Mlp& net, const MlpTrace& trace, const Matrix& upstream,
                             Matrix* input_grad = nullptr) {
  if (trace.post.size() != net.num_layers() + 1 || trace.pre.size() != net.num_layers())
    throw DimensionError("mlp_backward: trace does not belong to this network");
  require_same_shape(upstream, trace.output(), "mlp_backward upstream");

  MlpGrads grads = MlpGrads::zeros_like(net);
  Matrix delta = upstream;  // dLoss/dPre of the current layer
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const Matrix& in = trace.post[l];
    const Matrix& w = net.weights[l];
    if (in.cols() != w.rows() || delta.cols() != w.cols())
      throw DimensionError("mlp_backward: trace shape mismatch at layer " + std::to_string(l));
    detail::view(grads.weights[l]).noalias() = detail::view(in).transpose() * detail::view(delta);
    Eigen::Map<Eigen::RowVectorXd>(grads.biases[l].data(), static_cast<Eigen::Index>(w.cols())) =
        detail::view(delta).colwise().sum();
    if (l == 0 && input_grad == nullptr) break;
    Matrix prev(in.rows(), w.rows());
    detail::view(prev).noalias() = detail::view(delta) * detail::view(w).transpose();
    if (l == 0) {
      *input_grad = std::move(prev);
      break;
    }
    if (net.activation != Activation::identity) {
      const Matrix& pre = trace.pre[l - 1];
      const Matrix& post = trace.post[l];
      auto pd = prev.data();
      auto pr = pre.data();
      auto po = post.data();
      for (std::size_t t = 0; t < pd.size(); ++t) pd[t] *= detail::activate_grad(net.activation, pr[t], po[t]);
    }
    delta = std::move(prev);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Parameter views and Adam

using ParamViews = std::vector<std::span<double>>;
using GradViews = std::vector<std::span<const double>>;

inline void append_params(Mlp& net, ParamViews& out) {
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    out.emplace_back(net.weights[l].data());
    out.emplace_back(net.biases[l]);
  }
}

inline void append_grads(const MlpGrads& g, GradViews& out) {
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    out.emplace_back(g.weights[l].data());
    out.emplace_back(g.biases[l]);
  }
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update of `params` along `grads` (descent).
inline void adam_step(const ParamViews& params, const GradViews& grads, AdamState& state) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient group count differs");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw DimensionError("adam_step: state belongs to other parameters");
  for (std::size_t g = 0; g < params.size(); ++g)
    if (params[g].size() != grads[g].size() || state.first_moment[g].size() != params[g].size())
      throw DimensionError("adam_step: shape mismatch in group " + std::to_string(g));

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t g = 0; g < params.size(); ++g) {
    auto p = params[g];
    auto gr = grads[g];
    auto& m1 = state.first_moment[g];
    auto& m2 = state.second_moment[g];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m1[i] = state.beta1 * m1[i] + (1.0 - state.beta1) * gr[i];
      m2[i] = state.beta2 * m2[i] + (1.0 - state.beta2) * gr[i] * gr[i];
      const double mhat = m1[i] / c1;
      const double vhat = m2[i] / c2;
      p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization shared by the model files

inline void write_mlp(io::ByteWriter& w, const Mlp& net) {
  w.u32(static_cast<std::uint32_t>(net.activation));
  w.u32(static_cast<std::uint32_t>(net.layer_sizes.size()));
  for (std::size_t s : net.layer_sizes) w.u32(static_cast<std::uint32_t>(s));
}

inline void write_mlp_weights(io::ByteWriter& w, const Mlp& net) {
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    w.f64s(net.weights[l].data());
    w.f64s(net.biases[l]);
  }
}

/// Reads the architecture header written by write_mlp.
inline Mlp read_mlp_header(io::ByteReader& r) {
  const std::uint64_t at = r.offset();
  const std::uint32_t act = r.u32("activation");
  if (act > 2) throw FormatError(FormatErrorKind::invalid_content, at, "unknown activation tag");
  const std::uint32_t count = r.u32("layer count");
  if (count < 2 || count > 64) throw FormatError(FormatErrorKind::dimension_overflow, at + 4, "layer count");
  Mlp net;
  net.activation = static_cast<Activation>(act);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t s = r.u32("layer size");
    if (s == 0 || s > (1u << 20)) throw FormatError(FormatErrorKind::dimension_overflow, r.offset() - 4, "layer size");
    net.layer_sizes.push_back(s);
  }
  for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
    net.weights.emplace_back(net.layer_sizes[l], net.layer_sizes[l + 1]);
    net.biases.emplace_back(net.layer_sizes[l + 1], 0.0);
  }
  return net;
}

inline void read_mlp_weights(io::ByteReader& r, Mlp& net) {
  r.require(net.parameter_count() * 8, "network weights");
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    r.f64s(net.weights[l].data(), "weights");
    r.f64s(net.biases[l], "biases");
  }
}

}  // namespace cbal
