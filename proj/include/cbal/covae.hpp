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

// Conditional VAE with an environment- and label-conditional Gaussian prior.
//
//   encoder  [x; onehot(y); onehot(env)] -> (mu, log_var)   posterior q(z | x, y, env)
//   decoder  [z; onehot(y)]              -> x_hat           p(x | z, y) = N(x_hat, I)
//   prior    table (env, y)              -> N(mu, diag exp(log_var))
//
// The ELBO uses one reparameterized sample per example and the analytic KL.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cbal/binary_io.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/expfam.hpp"
#include "cbal/matrix.hpp"
#include "cbal/numkit.hpp"
#include "cbal/rng.hpp"

namespace cbal {

struct CoVae {
  std::size_t n = 0, k = 1, m = 0, dim = 0, n_envs = 0;
  Mlp encoder;
  Mlp decoder;
  ExpFamilyPrior prior;

  static CoVae create(std::size_t dim, std::size_t m, std::size_t n_envs, std::size_t n, std::size_t k,
                      const std::vector<std::size_t>& hidden, Activation act, Rng& rng) {
    CoVae v;
    v.n = n;
    v.k = k;
    v.m = m;
    v.dim = dim;
    v.n_envs = n_envs;
    std::vector<std::size_t> enc{dim + m + n_envs};
    enc.insert(enc.end(), hidden.begin(), hidden.end());
    enc.push_back(2 * n);
    std::vector<std::size_t> dec{n + m};
    dec.insert(dec.end(), hidden.begin(), hidden.end());
    dec.push_back(dim);
    v.encoder = Mlp::create(enc, act, rng);
    v.decoder = Mlp::create(dec, act, rng);
    v.prior = ExpFamilyPrior(n, k, m, n_envs);
    return v;
  }

  friend bool operator==(const CoVae&, const CoVae&) = default;
};

/// Posterior parameters for a batch: rows align with the input rows.
struct Posterior {
  Matrix mu;       // N x n
  Matrix log_var;  // N x n, clamped

  GaussianParams row(std::size_t i) const {
    return {std::vector<double>(mu.row(i).begin(), mu.row(i).end()),
            std::vector<double>(log_var.row(i).begin(), log_var.row(i).end())};
  }
};

namespace detail {

inline Matrix encoder_input(const CoVae& v, const Matrix& x, std::span<const int> y, std::span<const int> env) {
  if (x.cols() != v.dim) throw DimensionError("CoVae: x has " + std::to_string(x.cols()) + " columns, expected " +
                                              std::to_string(v.dim));
  if (y.size() != x.rows() || env.size() != x.rows()) throw DimensionError("CoVae: label/env count differs from rows");
  const Matrix oy = one_hot(y, v.m), oe = one_hot(env, v.n_envs);
  return hconcat({&x, &oy, &oe});
}

inline Posterior split_posterior(const Matrix& out, std::size_t n) {
  Posterior p{slice_cols(out, 0, n), slice_cols(out, n, n)};
  for (double& lv : p.log_var.data()) lv = clamp_log_var(lv);
  return p;
}

}  // namespace detail

/// Batched encode; deterministic.
inline Posterior encode_batch(const CoVae& v, const Matrix& x, std::span<const int> y, std::span<const int> env) {
  return detail::split_posterior(mlp_predict(v.encoder, detail::encoder_input(v, x, y, env)), v.n);
}

inline GaussianParams encode(const CoVae& v, std::span<const double> x, int y, int env) {
  Matrix xm(1, x.size());
  std::copy(x.begin(), x.end(), xm.row(0).begin());
  const int ys[1] = {y}, es[1] = {env};
  return encode_batch(v, xm, ys, es).row(0);
}

/// z = mu + exp(log_var / 2) * eta with eta ~ N(0, I).
inline std::vector<double> reparameterize(const GaussianParams& p, Rng& rng) {
  std::vector<double> z(p.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = p.mu[i] + std::exp(0.5 * p.log_var[i]) * rng.normal();
  return z;
}

/// Gradients of the loss -ELBO.
struct VaeGrads {
  MlpGrads encoder;
  MlpGrads decoder;
  std::vector<GaussianParams> prior;  // d/d(mu, log_var) per table row
};

struct ElboResult {
  double elbo = 0.0;   // weighted mean over the batch
  double recon = 0.0;  // weighted mean reconstruction log-likelihood
  double kl = 0.0;     // weighted mean KL(q || prior)
  VaeGrads grads;
};

/// ELBO of a batch under fixed standard-normal noise `eta` (N x n). `weights`
/// scale each example's contribution; empty means 1/N each.
inline ElboResult elbo_with_noise(const CoVae& v, const Matrix& x, std::span<const int> y, std::span<const int> env,
                                  const Matrix& eta, std::span<const double> weights = {}) {
  const std::size_t N = x.rows(), n = v.n;
  if (eta.rows() != N || eta.cols() != n) throw DimensionError("elbo: noise must be N x n");
  if (!weights.empty() && weights.size() != N) throw DimensionError("elbo: one weight per example");
  for (std::size_t i = 0; i < N; ++i)
    if (!v.prior.contains(env[i], y[i]))
      throw LookupError("elbo: prior has no row for (env=" + std::to_string(env[i]) + ", y=" + std::to_string(y[i]) + ")");
  auto w = [&](std::size_t i) { return weights.empty() ? 1.0 / static_cast<double>(N) : weights[i]; };

  const MlpTrace enc = mlp_forward(v.encoder, detail::encoder_input(v, x, y, env));
  const Matrix& eo = enc.output();

  Matrix z(N, n), std_dev(N, n);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std_dev(i, j) = std::exp(0.5 * clamp_log_var(eo(i, n + j)));
      z(i, j) = eo(i, j) + std_dev(i, j) * eta(i, j);
    }
  const Matrix oy = one_hot(y, v.m);
  const MlpTrace dec = mlp_forward(v.decoder, hconcat({&z, &oy}));
  const Matrix& xh = dec.output();

  ElboResult r;
  r.grads.prior.assign(v.prior.table().size(), GaussianParams::standard(n));

  const double log2pi = std::log(2.0 * std::numbers::pi);
  Matrix d_xh(N, v.dim);
  Matrix d_eo(N, 2 * n);
  for (std::size_t i = 0; i < N; ++i) {
    const double wi = w(i);
    double sq = 0.0;
    for (std::size_t j = 0; j < v.dim; ++j) {
      const double res = x(i, j) - xh(i, j);
      sq += res * res;
      d_xh(i, j) = -wi * res;
    }
    const double recon = -0.5 * sq - 0.5 * static_cast<double>(v.dim) * log2pi;

    const std::size_t slot = static_cast<std::size_t>(env[i]) * v.m + static_cast<std::size_t>(y[i]);
    const GaussianParams& p = v.prior.table()[slot];
    GaussianParams& gp = r.grads.prior[slot];
    double kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double raw_lq = eo(i, n + j);
      const double lq = clamp_log_var(raw_lq), lp = p.log_var[j];
      const double d = eo(i, j) - p.mu[j];
      const double ratio = std::exp(lq - lp), ip = std::exp(-lp);
      kl += 0.5 * (ratio + d * d * ip - 1.0 + lp - lq);
      d_eo(i, j) = wi * d * ip;
      const double lq_live = raw_lq == lq ? 1.0 : 0.0;
      d_eo(i, n + j) = lq_live * wi * 0.5 * (ratio - 1.0);
      gp.mu[j] -= wi * d * ip;
      if (v.k == 2) gp.log_var[j] += wi * 0.5 * (1.0 - ratio - d * d * ip);
    }
    r.recon += wi * recon;
    r.kl += wi * kl;
  }
  r.elbo = r.recon - r.kl;

  Matrix d_dec_in;
  r.grads.decoder = mlp_backward(v.decoder, dec, d_xh, &d_dec_in);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dz = d_dec_in(i, j);
      d_eo(i, j) += dz;
      const double lq_live = eo(i, n + j) == clamp_log_var(eo(i, n + j)) ? 1.0 : 0.0;
      d_eo(i, n + j) += lq_live * dz * 0.5 * std_dev(i, j) * eta(i, j);
    }
  r.grads.encoder = mlp_backward(v.encoder, enc, d_eo);
  return r;
}

inline Matrix standard_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix eta(rows, cols);
  for (double& e : eta.data()) e = rng.normal();
  return eta;
}

/// ELBO with fresh noise from `rng`.
inline ElboResult elbo(const CoVae& v, const Matrix& x, std::span<const int> y, std::span<const int> env, Rng& rng) {
  const Matrix eta = standard_noise(x.rows(), v.n, rng);
  return elbo_with_noise(v, x, y, env, eta);
}

// ---------------------------------------------------------------------------
// Training

struct VaeTrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  std::size_t cap = 16;
  std::size_t k = 1;
  std::optional<std::size_t> latent_dim;  // overrides latent_dim_rule
  std::vector<std::size_t> hidden = {512, 512};
  Activation activation = Activation::relu;
  double prior_init_scale = 0.5;

  void validate() const {
    if (!(lr > 0.0) || batch_size == 0 || epochs == 0 || cap == 0 || hidden.empty())
      throw DomainError("VaeTrainConfig: lr, batch_size, epochs, cap and hidden must be positive");
    if (k != 1 && k != 2) throw DomainError("VaeTrainConfig: k must be 1 or 2");
    if (latent_dim && *latent_dim == 0) throw DomainError("VaeTrainConfig: latent_dim must be positive");
  }
};

struct VaeCurvePoint {
  std::size_t epoch = 0;
  double elbo = 0.0, recon = 0.0, kl = 0.0;
};

struct VaeTrainResult {
  CoVae model;
  std::vector<VaeCurvePoint> curve;  // epoch 0 is the untrained model
};

namespace detail {

struct EnvBatcher {
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  std::size_t next(Rng& rng) {
    if (cursor == order.size()) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
      cursor = 0;
    }
    return order[cursor++];
  }
};

inline void gather(const Dataset& ds, std::span<const std::size_t> idx, Matrix& x, std::vector<int>& y,
                   std::vector<int>& env) {
  x = Matrix(idx.size(), ds.dim);
  y.resize(idx.size());
  env.resize(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Example& e = ds.examples[idx[r]];
    std::copy(e.x.begin(), e.x.end(), x.row(r).begin());
    y[r] = e.y;
    env[r] = e.env;
  }
}

inline void vae_params(CoVae& v, ParamViews& p) {
  append_params(v.encoder, p);
  append_params(v.decoder, p);
  for (auto& row : v.prior.table()) {
    p.emplace_back(row.mu);
    p.emplace_back(row.log_var);
  }
}

inline void vae_grads(const VaeGrads& g, GradViews& out) {
  append_grads(g.encoder, out);
  append_grads(g.decoder, out);
  for (const auto& row : g.prior) {
    out.emplace_back(row.mu);
    out.emplace_back(row.log_var);
  }
}

}  // namespace detail

/// Environments must be numbered 0..E-1 and each must be present.
inline std::size_t count_train_envs(const Dataset& ds) {
  const auto ids = ds.env_ids();
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != static_cast<int>(i))
      throw DomainError("training environments must be numbered 0..E-1 without gaps (missing env " +
                        std::to_string(i) + ")");
  if (ids.empty()) throw DomainError("training data is empty");
  return ids.size();
}

/// Maximizes the mean over environments of each environment's mini-batch ELBO.
inline VaeTrainResult train_vae(const Dataset& ds, const VaeTrainConfig& cfg) {
  cfg.validate();
  ds.validate(true);
  const std::size_t E = count_train_envs(ds), m = static_cast<std::size_t>(ds.m);
  const std::size_t n = cfg.latent_dim ? *cfg.latent_dim : latent_dim_rule(m, E, cfg.k, cfg.cap);

  Rng root(cfg.seed, streams::vae);
  Rng init = root.split(1), shuffle = root.split(2), noise = root.split(3);
  VaeTrainResult res;
  CoVae& v = res.model;
  v = CoVae::create(ds.dim, m, E, n, cfg.k, cfg.hidden, cfg.activation, init);
  v.prior.randomize_means(init, cfg.prior_init_scale);

  std::vector<detail::EnvBatcher> batchers(E);
  std::size_t largest = 0;
  for (std::size_t e = 0; e < E; ++e) {
    batchers[e].order = ds.indices_of_env(static_cast<int>(e));
    batchers[e].cursor = batchers[e].order.size();
    largest = std::max(largest, batchers[e].order.size());
  }
  const std::size_t per_env = std::min(cfg.batch_size, largest);
  const std::size_t steps = (largest + per_env - 1) / per_env;

  // Epoch 0: the untrained model over every example once.
  {
    VaeCurvePoint pt;
    Matrix x;
    std::vector<int> y, env;
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Rng eval_noise = root.split(4);
    const std::size_t chunk = 1024;
    for (std::size_t s = 0; s < all.size(); s += chunk) {
      const std::size_t len = std::min(chunk, all.size() - s);
      detail::gather(ds, std::span(all).subspan(s, len), x, y, env);
      std::vector<double> w(len);
      for (std::size_t i = 0; i < len; ++i) {
        const auto e = static_cast<std::size_t>(env[i]);
        w[i] = 1.0 / (static_cast<double>(E) * static_cast<double>(batchers[e].order.size()));
      }
      const ElboResult r = elbo_with_noise(v, x, y, env, standard_noise(len, n, eval_noise), w);
      pt.elbo += r.elbo;
      pt.recon += r.recon;
      pt.kl += r.kl;
    }
    res.curve.push_back(pt);
  }

  AdamState adam;
  adam.lr = cfg.lr;
  std::vector<std::size_t> idx;
  std::vector<double> w;
  Matrix x;
  std::vector<int> y, env;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    VaeCurvePoint pt;
    pt.epoch = epoch;
    for (std::size_t step = 0; step < steps; ++step) {
      idx.clear();
      w.clear();
      for (std::size_t e = 0; e < E; ++e) {
        const std::size_t take = std::min(per_env, batchers[e].order.size());
        for (std::size_t b = 0; b < take; ++b) {
          idx.push_back(batchers[e].next(shuffle));
          w.push_back(1.0 / (static_cast<double>(E) * static_cast<double>(take)));
        }
      }
      detail::gather(ds, idx, x, y, env);
      const ElboResult r = elbo_with_noise(v, x, y, env, standard_noise(idx.size(), n, noise), w);
      if (!std::isfinite(r.elbo))
        throw NumericalError("train_vae: non-finite ELBO at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(step));
      ParamViews params;
      GradViews grads;
      detail::vae_params(v, params);
      detail::vae_grads(r.grads, grads);
      adam_step(params, grads, adam);
      for (auto& row : v.prior.table())
        for (double& lv : row.log_var) lv = v.k == 1 ? 0.0 : clamp_log_var(lv);
      pt.elbo += r.elbo / static_cast<double>(steps);
      pt.recon += r.recon / static_cast<double>(steps);
      pt.kl += r.kl / static_cast<double>(steps);
    }
    res.curve.push_back(pt);
  }
  return res;
}

/// Posterior means for every example of `ds`, in order.
inline Matrix posterior_means(const CoVae& v, const Dataset& ds) {
  Matrix out(ds.size(), v.n);
  Matrix x;
  std::vector<int> y, env;
  std::vector<std::size_t> idx;
  const std::size_t chunk = 2048;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(ds.size(), s + chunk); ++i) idx.push_back(i);
    detail::gather(ds, idx, x, y, env);
    const Posterior p = encode_batch(v, x, y, env);
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(p.mu.row(r).begin(), p.mu.row(r).end(), out.row(s + r).begin());
  }
  return out;
}

/// Full posteriors (mean and log-variance) for every example.
inline std::vector<GaussianParams> posteriors(const CoVae& v, const Dataset& ds) {
  std::vector<GaussianParams> out;
  out.reserve(ds.size());
  Matrix x;
  std::vector<int> y, env;
  std::vector<std::size_t> idx;
  const std::size_t chunk = 2048;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(ds.size(), s + chunk); ++i) idx.push_back(i);
    detail::gather(ds, idx, x, y, env);
    const Posterior p = encode_batch(v, x, y, env);
    for (std::size_t r = 0; r < idx.size(); ++r) out.push_back(p.row(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model file

inline constexpr std::uint32_t kModelVersion = 1;

inline io::Bytes encode_model(const CoVae& v) {
  io::ByteWriter w;
  w.magic("CBVA");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(v.n));
  w.u32(static_cast<std::uint32_t>(v.k));
  w.u32(static_cast<std::uint32_t>(v.m));
  w.u32(static_cast<std::uint32_t>(v.dim));
  w.u32(static_cast<std::uint32_t>(v.n_envs));
  write_mlp(w, v.encoder);
  write_mlp(w, v.decoder);
  write_mlp_weights(w, v.encoder);
  write_mlp_weights(w, v.decoder);
  for (const auto& row : v.prior.table()) {
    w.f64s(row.mu);
    w.f64s(row.log_var);
  }
  return w.take();
}

inline CoVae decode_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("CBVA");
  r.expect_version(kModelVersion);
  const std::uint64_t at = r.offset();
  CoVae v;
  v.n = r.u32("n");
  v.k = r.u32("k");
  v.m = r.u32("m");
  v.dim = r.u32("dim");
  v.n_envs = r.u32("n_envs");
  constexpr std::size_t kMax = 1u << 20;
  if (v.n == 0 || v.m == 0 || v.dim == 0 || v.n_envs == 0 || v.n > kMax || v.m > kMax || v.dim > kMax ||
      v.n_envs > kMax)
    throw FormatError(FormatErrorKind::dimension_overflow, at, "model header dimensions");
  if (v.k != 1 && v.k != 2) throw FormatError(FormatErrorKind::invalid_content, at + 4, "k must be 1 or 2");
  v.encoder = read_mlp_header(r);
  v.decoder = read_mlp_header(r);
  if (v.encoder.input_size() != v.dim + v.m + v.n_envs || v.encoder.output_size() != 2 * v.n ||
      v.decoder.input_size() != v.n + v.m || v.decoder.output_size() != v.dim)
    throw FormatError(FormatErrorKind::invalid_content, at, "network shapes disagree with header");
  read_mlp_weights(r, v.encoder);
  read_mlp_weights(r, v.decoder);
  v.prior = ExpFamilyPrior(v.n, v.k, v.m, v.n_envs);
  r.require(v.prior.table().size() * v.n * 16, "prior table");
  for (auto& row : v.prior.table()) {
    r.f64s(row.mu, "prior means");
    r.f64s(row.log_var, "prior log-variances");
  }
  r.expect_end();
  return v;
}

inline void save_model(const std::string& path, const CoVae& v) { io::write_file(path, encode_model(v)); }
inline CoVae load_model(const std::string& path) { return decode_model(io::read_file(path)); }

}  // namespace cbal
