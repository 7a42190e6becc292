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

// Synthetic data from the graph Y -> X <- Z, with Z <-> Y varying by
// environment:
//
//   * a colored-pattern generator (label noise plus an environment-dependent
//     color that is spuriously correlated with the label),
//   * a linear-Gaussian SCM whose latents follow the conditional Gaussian
//     prior, used to probe identifiability,
//   * a fully enumerable discrete SCM used by the verification oracles.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/expfam.hpp"
#include "cbal/matrix.hpp"
#include "cbal/rng.hpp"

namespace cbal {

// ---------------------------------------------------------------------------
// Colored patterns

/// Latent sidecar columns written by the colored generators.
inline constexpr std::size_t kColorLatent = 0;
inline constexpr std::size_t kTrueClassLatent = 1;

struct ColoredSpec {
  int m = 2;
  /// Probability that the label-indexed color is replaced by a uniformly
  /// chosen other color, one entry per environment index.
  std::vector<double> flips = {0.1, 0.2, 0.9};
  double label_noise = 0.25;
  std::size_t pattern_dim = 16;
  std::size_t n_per_env = 20000;
  double pattern_scale = 1.0;  // amplitude of the +-1 class patterns
  double pattern_noise = 0.3;
  double color_intensity = 1.0;
  std::uint64_t pattern_seed = 7;

  std::size_t dim() const noexcept { return pattern_dim + static_cast<std::size_t>(m); }

  void validate() const {
    if (m < 2) throw DomainError("ColoredSpec: m must be at least 2");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(label_noise)) throw DomainError("ColoredSpec: label_noise outside [0,1]");
    for (double f : flips)
      if (!prob(f)) throw DomainError("ColoredSpec: flip probability outside [0,1]");
    if (pattern_dim == 0) throw DomainError("ColoredSpec: pattern_dim must be positive");
    if (pattern_noise < 0.0 || pattern_scale <= 0.0 || color_intensity <= 0.0)
      throw DomainError("ColoredSpec: noise must be non-negative, scale and intensity positive");
  }
};

/// One +-1 pattern per class; pairwise distinct.
inline std::vector<std::vector<double>> class_patterns(const ColoredSpec& spec) {
  Rng rng(spec.pattern_seed, 0x5041545445524eULL);
  std::vector<std::vector<double>> out;
  std::set<std::vector<double>> seen;
  while (out.size() < static_cast<std::size_t>(spec.m)) {
    std::vector<double> p(spec.pattern_dim);
    for (double& v : p) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    if (seen.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

namespace detail {

inline int other_uniform(int exclude, int m, Rng& rng) {
  int c = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(m - 1)));
  return c >= exclude ? c + 1 : c;
}

inline Dataset colored_impl(const ColoredSpec& spec, int env, std::uint64_t seed, bool balanced) {
  spec.validate();
  if (env < 0 || static_cast<std::size_t>(env) >= spec.flips.size())
    throw LookupError("gen_colored: no flip probability for env " + std::to_string(env));
  const auto patterns = class_patterns(spec);
  const double flip = spec.flips[static_cast<std::size_t>(env)];
  Rng rng = Rng(seed, streams::data).split(static_cast<std::uint64_t>(env) * 2 + (balanced ? 1 : 0));

  Dataset ds;
  ds.dim = spec.dim();
  ds.m = spec.m;
  ds.latent_dim = 2;
  ds.examples.reserve(spec.n_per_env);
  ds.latents.reserve(spec.n_per_env);
  for (std::size_t i = 0; i < spec.n_per_env; ++i) {
    const int truth = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.m)));
    const int label = rng.bernoulli(spec.label_noise) ? other_uniform(truth, spec.m, rng) : truth;
    int color;
    if (balanced)
      color = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.m)));
    else
      color = rng.bernoulli(flip) ? other_uniform(label, spec.m, rng) : label;

    Example ex;
    ex.y = label;
    ex.env = env;
    ex.x.resize(ds.dim, 0.0);
    const auto& pat = patterns[static_cast<std::size_t>(truth)];
    for (std::size_t j = 0; j < spec.pattern_dim; ++j)
      ex.x[j] = to_f32_exact(spec.pattern_scale * pat[j] + spec.pattern_noise * rng.normal());
    ex.x[spec.pattern_dim + static_cast<std::size_t>(color)] = to_f32_exact(spec.color_intensity);
    ds.examples.push_back(std::move(ex));
    ds.latents.push_back({static_cast<double>(color), static_cast<double>(truth)});
  }
  return ds;
}

}  // namespace detail

/// One environment slice of the colored-pattern data. Label = true class,
/// replaced by a uniform other class with probability label_noise; color =
/// label, replaced by a uniform other color with probability flips[env].
inline Dataset gen_colored(const ColoredSpec& spec, int env, std::uint64_t seed) {
  return detail::colored_impl(spec, env, seed, false);
}

/// Same as gen_colored but the color is uniform and independent of the label.
inline Dataset gen_colored_balanced(const ColoredSpec& spec, int env, std::uint64_t seed) {
  return detail::colored_impl(spec, env, seed, true);
}

// ---------------------------------------------------------------------------
// Linear-Gaussian SCM with known latents

struct GaussianScmSpec {
  std::size_t n = 2;        // latent dimension
  std::size_t d = 10;       // observed dimension, >= n + m
  std::size_t m = 3;        // classes
  std::size_t n_envs = 3;
  std::size_t k = 2;        // sufficient statistics per latent coordinate
  Matrix A;                 // d x (n + m), full column rank
  std::vector<GaussianParams> table;                 // (env, y) -> p(z | y, env)
  std::vector<std::vector<double>> label_marginals;  // per env
  double noise_std = 0.5;

  const GaussianParams& params(std::size_t env, std::size_t y) const { return table.at(env * m + y); }
};

inline Eigen::MatrixXd to_eigen(const Matrix& a) {
  Eigen::MatrixXd e(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
  return e;
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix a(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) = e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return a;
}

/// Ratio of extreme singular values; infinity for singular input.
inline double condition_number(const Matrix& a) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(s.size() - 1) == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / s(s.size() - 1);
}

inline std::size_t column_rank(const Matrix& a, double rel_tol = 1e-10) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(to_eigen(a));
  qr.setThreshold(rel_tol);
  return static_cast<std::size_t>(qr.rank());
}

/// The nk x nk contrast matrix whose columns are lambda(y_l, e_l) -
/// lambda(y_0, e_0) for the first nk + 1 (env, label) pairs in row-major order.
inline Matrix lambda_contrast_matrix(const GaussianScmSpec& spec) {
  const std::size_t nk = spec.n * spec.k;
  if (spec.m * spec.n_envs < nk + 1)
    throw DomainError("lambda_contrast_matrix: need m*|E| > nk (" + std::to_string(spec.m * spec.n_envs) +
                      " pairs for nk=" + std::to_string(nk) + ")");
  const auto base = natural_params(spec.table.at(0), spec.k);
  Matrix L(nk, nk);
  for (std::size_t l = 1; l <= nk; ++l) {
    const auto lam = natural_params(spec.table.at(l), spec.k);
    for (std::size_t r = 0; r < nk; ++r) L(r, l - 1) = lam[r] - base[r];
  }
  return L;
}

/// Throws unless A has full column rank and the contrast matrix is invertible
/// with condition number below `max_condition`.
inline void check_gaussian_scm(const GaussianScmSpec& spec, double max_condition = 1e6) {
  if (spec.A.rows() != spec.d || spec.A.cols() != spec.n + spec.m)
    throw DimensionError("GaussianScmSpec: A must be d x (n + m)");
  if (spec.d < spec.n + 1) throw DimensionError("GaussianScmSpec: d must be at least n + 1");
  if (column_rank(spec.A) != spec.n + spec.m) throw DomainError("GaussianScmSpec: A is rank deficient (not injective)");
  if (spec.table.size() != spec.m * spec.n_envs || spec.label_marginals.size() != spec.n_envs)
    throw DimensionError("GaussianScmSpec: table does not cover every (env, label)");
  for (const auto& g : spec.table)
    if (g.size() != spec.n) throw DimensionError("GaussianScmSpec: table row has wrong latent dimension");
  const double cond = condition_number(lambda_contrast_matrix(spec));
  if (!(cond < max_condition))
    throw DomainError("GaussianScmSpec: contrast matrix L is singular or ill-conditioned (cond=" + std::to_string(cond) + ")");
}

/// Random spec: Gaussian A, means in [-2, 2], log-variances in [-1.5, 1.5]
/// (zero when k = 1), uniform label marginals.
inline GaussianScmSpec make_gaussian_scm_spec(std::size_t n, std::size_t d, std::size_t m, std::size_t n_envs,
                                              std::size_t k, std::uint64_t seed, double noise_std = 0.5) {
  GaussianScmSpec spec;
  spec.n = n;
  spec.d = d;
  spec.m = m;
  spec.n_envs = n_envs;
  spec.k = k;
  spec.noise_std = noise_std;
  Rng rng(seed, 0x47534353ULL);
  spec.A = Matrix(d, n + m);
  for (double& v : spec.A.data()) v = rng.normal();
  for (std::size_t i = 0; i < m * n_envs; ++i) {
    std::vector<double> mu(n), lv(n, 0.0);
    for (double& v : mu) v = rng.uniform(-2.0, 2.0);
    if (k == 2)
      for (double& v : lv) v = rng.uniform(-1.5, 1.5);
    spec.table.emplace_back(std::move(mu), std::move(lv));
  }
  spec.label_marginals.assign(n_envs, std::vector<double>(m, 1.0 / static_cast<double>(m)));
  check_gaussian_scm(spec);
  return spec;
}

/// y ~ p^e(Y); z ~ N(mu(e,y), diag exp(log_var(e,y))); x = A [z; onehot(y)] + eps.
/// The latents sidecar holds z.
inline Dataset gen_gaussian_scm(const GaussianScmSpec& spec, int env, std::size_t count, std::uint64_t seed) {
  check_gaussian_scm(spec);
  if (env < 0 || static_cast<std::size_t>(env) >= spec.n_envs)
    throw LookupError("gen_gaussian_scm: unknown env " + std::to_string(env));
  Rng rng = Rng(seed, streams::data).split(static_cast<std::uint64_t>(env));
  const auto& marg = spec.label_marginals[static_cast<std::size_t>(env)];

  Dataset ds;
  ds.dim = spec.d;
  ds.m = static_cast<int>(spec.m);
  ds.latent_dim = spec.n;
  std::vector<double> code(spec.n + spec.m);
  for (std::size_t i = 0; i < count; ++i) {
    double u = rng.uniform(), acc = 0.0;
    std::size_t y = spec.m - 1;
    for (std::size_t c = 0; c < spec.m; ++c) {
      acc += marg[c];
      if (u < acc) {
        y = c;
        break;
      }
    }
    const GaussianParams& g = spec.params(static_cast<std::size_t>(env), y);
    std::vector<double> z(spec.n);
    for (std::size_t j = 0; j < spec.n; ++j) z[j] = to_f32_exact(g.mu[j] + std::exp(0.5 * g.log_var[j]) * rng.normal());
    std::fill(code.begin(), code.end(), 0.0);
    std::copy(z.begin(), z.end(), code.begin());
    code[spec.n + y] = 1.0;
    Example ex;
    ex.y = static_cast<int>(y);
    ex.env = env;
    ex.x.resize(spec.d);
    for (std::size_t r = 0; r < spec.d; ++r) {
      double v = 0.0;
      for (std::size_t c = 0; c < code.size(); ++c) v += spec.A(r, c) * code[c];
      ex.x[r] = to_f32_exact(v + spec.noise_std * rng.normal());
    }
    ds.push(std::move(ex), std::move(z));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Discrete SCM

/// Fully enumerable SCM: p^e(X, Y, Z) = sum_clean p(X | clean) [clean = f(Y, Z)]
/// p^e(Z | Y) p^e(Y).
struct DiscreteScm {
  std::size_t nz = 0, m = 0, nx = 0;
  std::vector<Matrix> p_z_given_y;           // per env, m x nz
  std::vector<std::vector<double>> p_y;      // per env, length m
  std::vector<std::size_t> f;                // y * nz + z -> clean x in [0, nx)
  Matrix noise;                              // nx x nx, row = clean, col = observed

  std::size_t n_envs() const noexcept { return p_y.size(); }

  void validate() const {
    constexpr double tol = 1e-12;
    auto stochastic = [&](std::span<const double> row, const std::string& what) {
      double s = 0.0;
      for (double v : row) {
        if (v < 0.0) throw DomainError(what + ": negative probability");
        s += v;
      }
      if (std::abs(s - 1.0) > tol) throw DomainError(what + ": row does not sum to 1");
    };
    if (p_z_given_y.size() != p_y.size()) throw DimensionError("DiscreteScm: env tables disagree");
    for (std::size_t e = 0; e < n_envs(); ++e) {
      if (p_y[e].size() != m || p_z_given_y[e].rows() != m || p_z_given_y[e].cols() != nz)
        throw DimensionError("DiscreteScm: table shape for env " + std::to_string(e));
      stochastic(p_y[e], "p(Y)");
      for (std::size_t y = 0; y < m; ++y) stochastic(p_z_given_y[e].row(y), "p(Z|Y)");
    }
    if (f.size() != m * nz) throw DimensionError("DiscreteScm: f must map every (y, z)");
    std::set<std::size_t> image(f.begin(), f.end());
    if (image.size() != f.size()) throw DomainError("DiscreteScm: f is not injective");
    if (*image.rbegin() >= nx) throw DomainError("DiscreteScm: f maps outside X");
    if (noise.rows() != nx || noise.cols() != nx) throw DimensionError("DiscreteScm: noise channel must be nx x nx");
    for (std::size_t x = 0; x < nx; ++x) stochastic(noise.row(x), "noise channel");
  }
};

/// Product channel: clean x = (y, z), observed x = (y', z') with
/// p(y', z' | y, z) = channel_y(y, y') channel_z(z, z'). Under this structure
/// Y and Z are conditionally independent given X whenever they are
/// independent a priori.
inline DiscreteScm make_disentangled_scm(const Matrix& channel_y, const Matrix& channel_z,
                                         std::vector<Matrix> p_z_given_y, std::vector<std::vector<double>> p_y) {
  DiscreteScm scm;
  scm.m = channel_y.rows();
  scm.nz = channel_z.rows();
  scm.nx = scm.m * scm.nz;
  scm.p_z_given_y = std::move(p_z_given_y);
  scm.p_y = std::move(p_y);
  scm.f.resize(scm.m * scm.nz);
  for (std::size_t i = 0; i < scm.f.size(); ++i) scm.f[i] = i;
  scm.noise = Matrix(scm.nx, scm.nx);
  for (std::size_t y = 0; y < scm.m; ++y)
    for (std::size_t z = 0; z < scm.nz; ++z)
      for (std::size_t y2 = 0; y2 < scm.m; ++y2)
        for (std::size_t z2 = 0; z2 < scm.nz; ++z2)
          scm.noise(y * scm.nz + z, y2 * scm.nz + z2) = channel_y(y, y2) * channel_z(z, z2);
  scm.validate();
  return scm;
}

/// Exact joint p(X, Y, Z | E = env), indexed [x][y][z].
struct JointTable {
  std::size_t nx = 0, m = 0, nz = 0;
  std::vector<double> p;

  double& at(std::size_t x, std::size_t y, std::size_t z) { return p[(x * m + y) * nz + z]; }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return p[(x * m + y) * nz + z]; }

  double p_xy(std::size_t x, std::size_t y) const {
    double s = 0.0;
    for (std::size_t z = 0; z < nz; ++z) s += at(x, y, z);
    return s;
  }
  double p_yz(std::size_t y, std::size_t z) const {
    double s = 0.0;
    for (std::size_t x = 0; x < nx; ++x) s += at(x, y, z);
    return s;
  }
  double total() const {
    double s = 0.0;
    for (double v : p) s += v;
    return s;
  }
};

inline JointTable enumerate_discrete(const DiscreteScm& scm, int env) {
  scm.validate();
  if (env < 0 || static_cast<std::size_t>(env) >= scm.n_envs())
    throw LookupError("enumerate_discrete: unknown env " + std::to_string(env));
  const auto e = static_cast<std::size_t>(env);
  JointTable t{scm.nx, scm.m, scm.nz, std::vector<double>(scm.nx * scm.m * scm.nz, 0.0)};
  for (std::size_t y = 0; y < scm.m; ++y)
    for (std::size_t z = 0; z < scm.nz; ++z) {
      const double pyz = scm.p_y[e][y] * scm.p_z_given_y[e](y, z);
      const std::size_t clean = scm.f[y * scm.nz + z];
      for (std::size_t x = 0; x < scm.nx; ++x) t.at(x, y, z) = pyz * scm.noise(clean, x);
    }
  return t;
}

struct DiscreteSample {
  std::size_t x, y, z;
};

inline std::size_t sample_categorical(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

/// Ancestral sampling: Y, then Z | Y, then observed X | f(Y, Z).
inline std::vector<DiscreteSample> sample_discrete(const DiscreteScm& scm, int env, std::size_t count, Rng& rng) {
  scm.validate();
  const auto e = static_cast<std::size_t>(env);
  if (e >= scm.n_envs()) throw LookupError("sample_discrete: unknown env");
  std::vector<DiscreteSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t y = sample_categorical(scm.p_y[e], rng);
    const std::size_t z = sample_categorical(scm.p_z_given_y[e].row(y), rng);
    const std::size_t x = sample_categorical(scm.noise.row(scm.f[y * scm.nz + z]), rng);
    out.push_back({x, y, z});
  }
  return out;
}

}  // namespace cbal
