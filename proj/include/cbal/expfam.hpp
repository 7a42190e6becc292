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

// Conditional factorial exponential-family prior p^e(Z | Y), Gaussian member.
//
// Each latent coordinate i has sufficient statistics T_i(z) = (z, z^2) when
// k = 2 and T_i(z) = z when k = 1 (unit variance). The natural parameters
// lambda^e_i(y) are stored through the equivalent (mean, log-variance) pair,
// one row per (environment, label); the normalizer and base measure are the
// Gaussian ones.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cbal/error.hpp"
#include "cbal/rng.hpp"

namespace cbal {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

inline double clamp_log_var(double lv) noexcept { return std::clamp(lv, kLogVarMin, kLogVarMax); }

/// Diagonal Gaussian N(mu, diag(exp(log_var))).
struct GaussianParams {
  std::vector<double> mu;
  std::vector<double> log_var;

  GaussianParams() = default;
  GaussianParams(std::vector<double> mean, std::vector<double> lv) : mu(std::move(mean)), log_var(std::move(lv)) {
    if (mu.size() != log_var.size()) throw DimensionError("GaussianParams: mu and log_var lengths differ");
    for (double& v : log_var) v = clamp_log_var(v);
  }
  static GaussianParams standard(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }

  std::size_t size() const noexcept { return mu.size(); }

  friend bool operator==(const GaussianParams&, const GaussianParams&) = default;
};

inline double log_normal_1d(double z, double mu, double log_var) noexcept {
  const double d = z - mu;
  return -0.5 * (std::log(2.0 * std::numbers::pi) + log_var + d * d * std::exp(-log_var));
}

/// KL(q || p) for diagonal Gaussians, summed over coordinates.
inline double kl_gaussian(const GaussianParams& q, const GaussianParams& p) {
  if (q.size() != p.size() || q.log_var.size() != p.log_var.size())
    throw DimensionError("kl_gaussian: length mismatch (" + std::to_string(q.size()) + " vs " +
                         std::to_string(p.size()) + ")");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double lq = q.log_var[i], lp = p.log_var[i];
    const double d = q.mu[i] - p.mu[i];
    kl += 0.5 * (std::exp(lq - lp) + d * d * std::exp(-lp) - 1.0 + lp - lq);
  }
  return kl;
}

/// Largest latent dimension n with n*k < m*|E_train|, capped.
inline std::size_t latent_dim_rule(std::size_t m, std::size_t n_train_envs, std::size_t k, std::size_t cap) {
  if (m == 0 || n_train_envs == 0 || k == 0 || cap == 0) throw DomainError("latent_dim_rule: arguments must be positive");
  const std::size_t pairs = m * n_train_envs;
  std::size_t n = pairs / k;
  if (n * k == pairs) n -= 1;  // keep m|E| > nk strict
  n = std::min(n, cap);
  if (n < 1)
    throw DomainError("latent_dim_rule: " + std::to_string(pairs) + " (label, environment) pairs cannot support k=" +
                      std::to_string(k));
  return n;
}

/// T(z): (z_1..z_n) for k = 1, (z_1, z_1^2, ..., z_n, z_n^2) for k = 2.
inline std::vector<double> sufficient_stats(std::span<const double> z, std::size_t k) {
  std::vector<double> t;
  t.reserve(z.size() * k);
  for (double v : z) {
    t.push_back(v);
    if (k == 2) t.push_back(v * v);
  }
  return t;
}

/// lambda for one Gaussian row, ordered to match sufficient_stats.
inline std::vector<double> natural_params(const GaussianParams& g, std::size_t k) {
  std::vector<double> lam;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double prec = std::exp(-g.log_var[i]);
    lam.push_back(g.mu[i] * prec);
    if (k == 2) lam.push_back(-0.5 * prec);
  }
  return lam;
}

class ExpFamilyPrior {
 public:
  ExpFamilyPrior() = default;
  ExpFamilyPrior(std::size_t n, std::size_t k, std::size_t m, std::size_t n_envs)
      : n_(n), k_(k), m_(m), n_envs_(n_envs), table_(m * n_envs, GaussianParams::standard(n)) {
    if (k != 1 && k != 2) throw DomainError("ExpFamilyPrior: k must be 1 or 2");
    if (n == 0 || m == 0 || n_envs == 0) throw DomainError("ExpFamilyPrior: dimensions must be positive");
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t m() const noexcept { return m_; }
  std::size_t n_envs() const noexcept { return n_envs_; }

  bool contains(int env, int y) const noexcept {
    return env >= 0 && y >= 0 && static_cast<std::size_t>(env) < n_envs_ && static_cast<std::size_t>(y) < m_;
  }

  const GaussianParams& at(int env, int y) const { return table_[slot(env, y)]; }
  GaussianParams& at(int env, int y) { return table_[slot(env, y)]; }

  /// Replaces a row, enforcing the log-variance clamp and k = 1 unit variance.
  void set(int env, int y, GaussianParams g) {
    if (g.size() != n_) throw DimensionError("ExpFamilyPrior::set: wrong latent dimension");
    for (double& v : g.log_var) v = k_ == 1 ? 0.0 : clamp_log_var(v);
    table_[slot(env, y)] = std::move(g);
  }

  /// Small random means to break the symmetry between rows.
  void randomize_means(Rng& rng, double scale) {
    for (auto& row : table_)
      for (double& v : row.mu) v = scale * rng.normal();
  }

  std::vector<GaussianParams>& table() noexcept { return table_; }
  const std::vector<GaussianParams>& table() const noexcept { return table_; }

  friend bool operator==(const ExpFamilyPrior&, const ExpFamilyPrior&) = default;

 private:
  std::size_t slot(int env, int y) const {
    if (!contains(env, y))
      throw LookupError("prior has no row for (env=" + std::to_string(env) + ", y=" + std::to_string(y) + ")");
    return static_cast<std::size_t>(env) * m_ + static_cast<std::size_t>(y);
  }

  std::size_t n_ = 0, k_ = 1, m_ = 0, n_envs_ = 0;
  std::vector<GaussianParams> table_;
};

/// log p^e(z | y) = sum_i log N(z_i; mu_i, exp(log_var_i)).
inline double log_prior(std::span<const double> z, int y, int env, const ExpFamilyPrior& prior) {
  const GaussianParams& g = prior.at(env, y);
  if (z.size() != g.size()) throw DimensionError("log_prior: z has wrong length");
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += log_normal_1d(z[i], g.mu[i], g.log_var[i]);
  return s;
}

}  // namespace cbal
