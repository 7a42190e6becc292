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

// Brute-force checks of the balancing theory on enumerable instances:
//
//   verify_minimax        the balanced environment's Bayes classifier has the
//                         smallest worst-case cross-entropy over a grid
//   verify_finer          Y _||_ Z | b(Z)  <=>  b is finer than p(Y | Z)
//   verify_theorem4       empirical label mix inside matched groups vs the
//                         closed form of semi_balanced_label_dist
//   identifiability_score affine fit and matched correlations between true
//                         and learned latent statistics

#pragma once

#include <Eigen/Dense>
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cbal/balance.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/matrix.hpp"
#include "cbal/rng.hpp"
#include "cbal/scmgen.hpp"

namespace cbal {

inline constexpr double kOracleSlack = 1e-10;

// ---------------------------------------------------------------------------
// Minimax

struct EnvGrid {
  std::vector<Matrix> p_z_given_y;       // m x nz per candidate environment
  std::vector<std::vector<double>> p_y;  // length m per candidate environment
  std::vector<std::string> labels;       // human-readable description per env

  std::size_t size() const noexcept { return p_y.size(); }
};

struct MinimaxReport {
  std::vector<std::vector<double>> risk;  // risk[e][e'] = L^{e'}(p^e(Y|X))
  std::vector<double> worst;              // max over e'
  std::size_t balanced = 0;               // grid index of the balanced env
  std::size_t argmin = 0;
  double margin = 0.0;                    // second-best worst-case minus balanced
  bool passed = false;
};

inline bool is_balanced_env(const Matrix& pz, const std::vector<double>& py) {
  const double u = 1.0 / static_cast<double>(py.size());
  for (double p : py)
    if (std::abs(p - u) > kOracleSlack) return false;
  for (std::size_t y = 1; y < pz.rows(); ++y)
    for (std::size_t z = 0; z < pz.cols(); ++z)
      if (std::abs(pz(y, z) - pz(0, z)) > kOracleSlack) return false;
  return true;
}

/// Exact p^e(Y | X) as an nx x m table from the joint.
inline Matrix bayes_posterior(const JointTable& t) {
  Matrix post(t.nx, t.m);
  for (std::size_t x = 0; x < t.nx; ++x) {
    double px = 0.0;
    for (std::size_t y = 0; y < t.m; ++y) px += t.p_xy(x, y);
    for (std::size_t y = 0; y < t.m; ++y) post(x, y) = px > 0.0 ? t.p_xy(x, y) / px : 0.0;
  }
  return post;
}

/// L^e(q) = -sum_{x,y} p^e(x, y) log q(y | x).
inline double cross_entropy_risk(const JointTable& t, const Matrix& q) {
  double risk = 0.0;
  for (std::size_t x = 0; x < t.nx; ++x)
    for (std::size_t y = 0; y < t.m; ++y) {
      const double p = t.p_xy(x, y);
      if (p == 0.0) continue;
      if (!(q(x, y) > 0.0))
        throw DomainError("verify_minimax: zero-probability cell (x=" + std::to_string(x) + ", y=" + std::to_string(y) +
                          ") receives mass in another environment");
      risk -= p * std::log(q(x, y));
    }
  return risk;
}

/// Uses the skeleton's f and noise channel; environments come from the grid.
inline MinimaxReport verify_minimax(const DiscreteScm& skeleton, const EnvGrid& grid) {
  if (grid.size() == 0 || grid.p_z_given_y.size() != grid.size()) throw DomainError("verify_minimax: empty grid");
  DiscreteScm scm = skeleton;
  scm.p_z_given_y = grid.p_z_given_y;
  scm.p_y = grid.p_y;
  scm.validate();
  for (std::size_t e = 0; e < grid.size(); ++e) {
    for (double v : grid.p_y[e])
      if (!(v > 0.0)) throw DomainError("verify_minimax: grid env " + std::to_string(e) + " has a zero label probability");
    for (double v : grid.p_z_given_y[e].data())
      if (!(v > 0.0)) throw DomainError("verify_minimax: grid env " + std::to_string(e) + " has a zero p(Z|Y) cell");
  }
  MinimaxReport rep;
  std::vector<JointTable> joints;
  std::vector<Matrix> posts;
  bool found = false;
  for (std::size_t e = 0; e < grid.size(); ++e) {
    joints.push_back(enumerate_discrete(scm, static_cast<int>(e)));
    posts.push_back(bayes_posterior(joints.back()));
    if (!found && is_balanced_env(grid.p_z_given_y[e], grid.p_y[e])) {
      rep.balanced = e;
      found = true;
    }
  }
  if (!found) throw DomainError("verify_minimax: grid has no balanced environment");
  const std::size_t E = grid.size();
  rep.risk.assign(E, std::vector<double>(E, 0.0));
  rep.worst.assign(E, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t f = 0; f < E; ++f) {
      rep.risk[e][f] = cross_entropy_risk(joints[f], posts[e]);
      rep.worst[e] = std::max(rep.worst[e], rep.risk[e][f]);
    }
  rep.argmin = static_cast<std::size_t>(std::min_element(rep.worst.begin(), rep.worst.end()) - rep.worst.begin());
  rep.margin = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < E; ++e)
    if (e != rep.balanced) rep.margin = std::min(rep.margin, rep.worst[e] - rep.worst[rep.balanced]);
  rep.passed = E == 1 || rep.margin > kOracleSlack;
  return rep;
}

/// Symmetric 3-value latent with two labels: p(z | y=0) = (q, 1-q, 1)/2 and
/// p(z | y=1) = (1-q, q, 1)/2, crossed with p(Y=1) values. q = 0.5 with a
/// uniform label is the balanced environment.
inline EnvGrid make_flip_grid(const std::vector<double>& qs, const std::vector<double>& p1s) {
  EnvGrid g;
  for (double q : qs)
    for (double p1 : p1s) {
      g.p_z_given_y.push_back(Matrix::from_rows({{q / 2, (1 - q) / 2, 0.5}, {(1 - q) / 2, q / 2, 0.5}}));
      g.p_y.push_back({1.0 - p1, p1});
      g.labels.push_back("q=" + std::to_string(q) + ",p(y=1)=" + std::to_string(p1));
    }
  return g;
}

/// The default 25-environment grid: q and p(Y=1) each in {.1, .3, .5, .7, .9}.
inline EnvGrid default_minimax_grid() { return make_flip_grid({0.1, 0.3, 0.5, 0.7, 0.9}, {0.1, 0.3, 0.5, 0.7, 0.9}); }

/// Observation channel shared by the grid: label read correctly 80% of the
/// time, latent 90% of the time.
inline DiscreteScm default_minimax_skeleton() {
  const Matrix cy = Matrix::from_rows({{0.8, 0.2}, {0.2, 0.8}});
  const Matrix cz = Matrix::from_rows({{0.9, 0.05, 0.05}, {0.05, 0.9, 0.05}, {0.05, 0.05, 0.9}});
  const Matrix pz = Matrix::from_rows({{0.25, 0.25, 0.5}, {0.25, 0.25, 0.5}});
  return make_disentangled_scm(cy, cz, {pz}, {{0.5, 0.5}});
}

// ---------------------------------------------------------------------------
// Finer-than

struct FinerReport {
  bool is_balancing = false;
  bool is_finer = false;
  bool agree() const noexcept { return is_balancing == is_finer; }
};

/// p^e(Y | Z) as an nz x m table.
inline Matrix propensity_table(const DiscreteScm& scm, int env) {
  const auto e = static_cast<std::size_t>(env);
  if (e >= scm.n_envs()) throw LookupError("propensity_table: unknown env");
  Matrix s(scm.nz, scm.m);
  for (std::size_t z = 0; z < scm.nz; ++z) {
    double pz = 0.0;
    for (std::size_t y = 0; y < scm.m; ++y) pz += scm.p_y[e][y] * scm.p_z_given_y[e](y, z);
    for (std::size_t y = 0; y < scm.m; ++y) s(z, y) = pz > 0.0 ? scm.p_y[e][y] * scm.p_z_given_y[e](y, z) / pz : 0.0;
  }
  return s;
}

/// `b` assigns a level to every value of Z. is_balancing checks
/// p(y, z | b) = p(y | b) p(z | b) on the joint; is_finer checks that p(Y | z)
/// is constant on every level set of b.
inline FinerReport verify_finer(const DiscreteScm& scm, int env, const std::vector<std::size_t>& b) {
  scm.validate();
  if (b.size() != scm.nz) throw DimensionError("verify_finer: b must assign a level to every z");
  const auto e = static_cast<std::size_t>(env);
  if (e >= scm.n_envs()) throw LookupError("verify_finer: unknown env");
  const std::size_t levels = *std::max_element(b.begin(), b.end()) + 1;

  // Joint p(y, z) and its aggregates per level.
  Matrix pyz(scm.m, scm.nz);
  for (std::size_t y = 0; y < scm.m; ++y)
    for (std::size_t z = 0; z < scm.nz; ++z) pyz(y, z) = scm.p_y[e][y] * scm.p_z_given_y[e](y, z);
  std::vector<double> pb(levels, 0.0), pz(scm.nz, 0.0);
  Matrix pyb(scm.m, levels);
  for (std::size_t y = 0; y < scm.m; ++y)
    for (std::size_t z = 0; z < scm.nz; ++z) {
      pyb(y, b[z]) += pyz(y, z);
      pb[b[z]] += pyz(y, z);
      pz[z] += pyz(y, z);
    }

  FinerReport rep;
  rep.is_balancing = true;
  for (std::size_t y = 0; y < scm.m && rep.is_balancing; ++y)
    for (std::size_t z = 0; z < scm.nz; ++z) {
      const std::size_t l = b[z];
      const double pb_l = pb[l];
      if (pb_l == 0.0) continue;
      const double joint = pyz(y, z) / pb_l;
      const double product = (pyb(y, l) / pb_l) * (pz[z] / pb_l);
      if (std::abs(joint - product) > kOracleSlack) {
        rep.is_balancing = false;
        break;
      }
    }

  const Matrix s = propensity_table(scm, env);
  rep.is_finer = true;
  for (std::size_t z1 = 0; z1 < scm.nz && rep.is_finer; ++z1)
    for (std::size_t z2 = z1 + 1; z2 < scm.nz; ++z2) {
      if (b[z1] != b[z2] || pz[z1] == 0.0 || pz[z2] == 0.0) continue;
      double gap = 0.0;
      for (std::size_t y = 0; y < scm.m; ++y) gap = std::max(gap, std::abs(s(z1, y) - s(z2, y)));
      if (gap > kOracleSlack) {
        rep.is_finer = false;
        break;
      }
    }
  return rep;
}

struct FinerSweepReport {
  std::size_t instances = 0;
  std::size_t disagreements = 0;
  std::size_t balancing = 0;  // how many candidates were balancing scores
};

/// Random instances with deliberately repeated propensities, so both
/// outcomes are exercised. Candidates are random partitions, partitions by
/// propensity value, and refinements of those.
inline FinerSweepReport finer_sweep(std::size_t count, std::uint64_t seed) {
  Rng rng(seed, streams::oracle);
  FinerSweepReport rep;
  for (std::size_t t = 0; t < count; ++t) {
    Rng r = rng.split(t);
    const std::size_t m = 2 + r.uniform_index(3), base = 2 + r.uniform_index(3);
    // Base columns with distinct propensities, then copies with the same
    // column shape scaled, which keeps p(Y | z) identical.
    std::vector<std::vector<double>> cols;
    std::vector<std::size_t> origin;
    for (std::size_t c = 0; c < base; ++c) {
      std::vector<double> col(m);
      for (double& v : col) v = r.uniform(0.05, 1.0);
      cols.push_back(col);
      origin.push_back(c);
    }
    const std::size_t copies = r.uniform_index(4);
    for (std::size_t c = 0; c < copies; ++c) {
      const std::size_t src = r.uniform_index(base);
      const double scale = r.uniform(0.2, 2.0);
      std::vector<double> col = cols[src];
      for (double& v : col) v *= scale;
      cols.push_back(col);
      origin.push_back(src);
    }
    const std::size_t nz = cols.size();
    std::vector<double> py(m);
    for (double& v : py) v = r.uniform(0.2, 1.0);
    double sy = 0.0;
    for (double v : py) sy += v;
    for (double& v : py) v /= sy;
    // p(y | z) ∝ p(y) cols[z][y] / sum_z' cols[z'][y], so a scaled copy of a
    // column shares its propensity.
    Matrix table(m, nz);
    for (std::size_t y = 0; y < m; ++y) {
      double s = 0.0;
      for (std::size_t z = 0; z < nz; ++z) s += cols[z][y];
      for (std::size_t z = 0; z < nz; ++z) table(y, z) = cols[z][y] / s;
    }
    DiscreteScm scm;
    scm.nz = nz;
    scm.m = m;
    scm.nx = m * nz;
    scm.p_z_given_y = {table};
    scm.p_y = {py};
    scm.f.resize(m * nz);
    for (std::size_t i = 0; i < scm.f.size(); ++i) scm.f[i] = i;
    scm.noise = Matrix::identity(scm.nx);

    std::vector<std::size_t> b(nz);
    switch (r.uniform_index(3)) {
      case 0:
        for (auto& v : b) v = r.uniform_index(nz);
        break;
      case 1:
        b = origin;
        break;
      default:
        for (std::size_t z = 0; z < nz; ++z) b[z] = origin[z] * 2 + r.uniform_index(2);
        break;
    }
    const FinerReport fr = verify_finer(scm, 0, b);
    ++rep.instances;
    if (!fr.agree()) ++rep.disagreements;
    if (fr.is_balancing) ++rep.balancing;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Semi-balanced label distribution

struct Theorem4Report {
  std::size_t m = 0, a = 0, anchors = 0;
  double max_tv = 0.0;                     // over z values
  std::vector<std::vector<double>> empirical;  // per z, per y
  std::vector<std::vector<double>> expected;
};

/// Builds a dataset with `per_cell_scale` examples spread over every (z, y)
/// cell in proportion to p^e(y, z) (exact duplicates of each score), matches
/// on the exact propensity, and tallies labels inside anchor groups.
inline Theorem4Report verify_theorem4(const DiscreteScm& scm, int env, std::size_t a, std::size_t anchors,
                                      std::uint64_t seed, std::size_t per_cell_scale = 3000) {
  scm.validate();
  const auto e = static_cast<std::size_t>(env);
  if (e >= scm.n_envs()) throw LookupError("verify_theorem4: unknown env");
  const std::size_t m = scm.m;
  if (a < 1 || a + 1 > m) throw DomainError("verify_theorem4: a outside [1, m-1]");

  Dataset ds;
  ds.dim = 1;
  ds.m = static_cast<int>(m);
  ds.latent_dim = 1;
  std::vector<BalancingScore> scores;
  const Matrix s = propensity_table(scm, env);
  Matrix counts(scm.nz, m);
  for (std::size_t z = 0; z < scm.nz; ++z)
    for (std::size_t y = 0; y < m; ++y) {
      const double p = scm.p_y[e][y] * scm.p_z_given_y[e](y, z);
      const auto c = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p * static_cast<double>(per_cell_scale))));
      counts(z, y) = static_cast<double>(c);
      for (std::size_t i = 0; i < c; ++i) {
        ds.push({{static_cast<double>(z)}, static_cast<int>(y), 0}, {static_cast<double>(z)});
        scores.push_back({std::vector<double>(s.row(z).begin(), s.row(z).end())});
      }
    }
  const MatchIndex mi = precompute_matches(ds, scores, Metric::l1);
  for (double d : mi.distance)
    if (d != 0.0) throw DomainError("verify_theorem4: a match is not exact");

  BatchSpec spec;
  spec.B = 1000;
  spec.a = a;
  spec.metric = Metric::l1;
  BalancedSampler sampler(ds, mi, spec);
  Rng rng(seed, streams::oracle);
  Matrix tally(scm.nz, m);
  std::size_t drawn = 0;
  while (drawn < anchors) {
    const Batch b = sampler.next(rng);
    for (std::size_t i = 0; i < b.examples.size(); ++i) {
      // Group z is the anchor's; matches are exact so each member shares it.
      const auto z = static_cast<std::size_t>(ds.latents[b.examples[i]][0]);
      tally(z, static_cast<std::size_t>(ds.examples[b.examples[i]].y)) += 1.0;
    }
    drawn += spec.B;
  }

  Theorem4Report rep;
  rep.m = m;
  rep.a = a;
  rep.anchors = drawn;
  for (std::size_t z = 0; z < scm.nz; ++z) {
    double total = 0.0, cz = 0.0;
    for (std::size_t y = 0; y < m; ++y) {
      total += tally(z, y);
      cz += counts(z, y);
    }
    std::vector<double> emp(m), exp(m);
    double tv = 0.0;
    for (std::size_t y = 0; y < m; ++y) {
      emp[y] = total > 0.0 ? tally(z, y) / total : 0.0;
      exp[y] = semi_balanced_label_dist(counts(z, y) / cz, a, m);
      tv += 0.5 * std::abs(emp[y] - exp[y]);
    }
    rep.max_tv = std::max(rep.max_tv, tv);
    rep.empirical.push_back(emp);
    rep.expected.push_back(exp);
  }
  return rep;
}

/// Single-environment SCM with |Z| = nz and p(Y | z) given row by row; p(z)
/// uniform.
inline DiscreteScm scm_from_conditionals(const std::vector<std::vector<double>>& p_y_given_z) {
  const std::size_t nz = p_y_given_z.size(), m = p_y_given_z.at(0).size();
  std::vector<double> py(m, 0.0);
  for (const auto& row : p_y_given_z)
    for (std::size_t y = 0; y < m; ++y) py[y] += row[y] / static_cast<double>(nz);
  Matrix pz(m, nz);
  for (std::size_t y = 0; y < m; ++y)
    for (std::size_t z = 0; z < nz; ++z) pz(y, z) = p_y_given_z[z][y] / static_cast<double>(nz) / py[y];
  DiscreteScm scm;
  scm.nz = nz;
  scm.m = m;
  scm.nx = m * nz;
  scm.p_z_given_y = {pz};
  scm.p_y = {py};
  scm.f.resize(m * nz);
  for (std::size_t i = 0; i < scm.f.size(); ++i) scm.f[i] = i;
  scm.noise = Matrix::identity(scm.nx);
  // Guard against rounding drift in the row sums.
  for (std::size_t y = 0; y < m; ++y) {
    double s = 0.0;
    for (std::size_t z = 0; z < nz; ++z) s += scm.p_z_given_y[0](y, z);
    for (std::size_t z = 0; z < nz; ++z) scm.p_z_given_y[0](y, z) /= s;
  }
  double s = 0.0;
  for (double v : scm.p_y[0]) s += v;
  for (double& v : scm.p_y[0]) v /= s;
  scm.validate();
  return scm;
}

/// Three latent values with increasingly skewed conditionals, for m classes.
inline DiscreteScm default_theorem4_scm(std::size_t m) {
  std::vector<std::vector<double>> rows;
  const double peaks[3] = {0.5, 0.7, 0.9};
  for (std::size_t z = 0; z < 3; ++z) {
    std::vector<double> row(m, (1.0 - peaks[z]) / static_cast<double>(m - 1));
    row[z % m] = peaks[z];
    rows.push_back(row);
  }
  return scm_from_conditionals(rows);
}

// ---------------------------------------------------------------------------
// Identifiability

struct AffineFit {
  Matrix A;                       // true ≈ A * learned + c
  std::vector<double> c;
  std::vector<double> r2_per_dim;
  double mean_abs_corr = 0.0;
  std::vector<std::size_t> assignment;  // true dim -> learned dim
};

/// Maximum-weight assignment of rows to columns (rows <= cols) by the
/// Hungarian method on the negated weights.
inline std::vector<std::size_t> hungarian_max(const Matrix& w) {
  const std::size_t n = w.rows(), m = w.cols();
  if (n > m) throw DimensionError("hungarian_max: more rows than columns");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -w(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  return assign;
}

inline Matrix abs_correlation(const Matrix& a, const Matrix& b) {
  const Eigen::MatrixXd ea = to_eigen(a), eb = to_eigen(b);
  const Eigen::MatrixXd ca = ea.rowwise() - ea.colwise().mean();
  const Eigen::MatrixXd cb = eb.rowwise() - eb.colwise().mean();
  Matrix out(a.cols(), b.cols());
  for (Eigen::Index i = 0; i < ca.cols(); ++i)
    for (Eigen::Index j = 0; j < cb.cols(); ++j) {
      const double den = ca.col(i).norm() * cb.col(j).norm();
      out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = den > 0.0 ? std::abs(ca.col(i).dot(cb.col(j))) / den : 0.0;
    }
  return out;
}

/// Least-squares fit of true statistics on learned ones with an intercept.
inline AffineFit identifiability_score(const Matrix& true_stats, const Matrix& learned_stats) {
  if (true_stats.rows() != learned_stats.rows()) throw DimensionError("identifiability_score: sample counts differ");
  const std::size_t N = true_stats.rows(), p = true_stats.cols(), q = learned_stats.cols();
  if (N <= q + 1) throw DomainError("identifiability_score: too few samples");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(q + 1));
  X.leftCols(static_cast<Eigen::Index>(q)) = to_eigen(learned_stats);
  X.col(static_cast<Eigen::Index>(q)).setOnes();
  const Eigen::MatrixXd Y = to_eigen(true_stats);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (static_cast<std::size_t>(qr.rank()) < q + 1) throw DomainError("identifiability_score: rank-deficient design");
  const Eigen::MatrixXd coef = qr.solve(Y);  // (q+1) x p
  const Eigen::MatrixXd resid = Y - X * coef;

  AffineFit fit;
  fit.A = from_eigen(coef.topRows(static_cast<Eigen::Index>(q)).transpose());
  for (std::size_t j = 0; j < p; ++j) fit.c.push_back(coef(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(j)));
  for (std::size_t j = 0; j < p; ++j) {
    const auto col = Y.col(static_cast<Eigen::Index>(j));
    const double ss_tot = (col.array() - col.mean()).square().sum();
    const double ss_res = resid.col(static_cast<Eigen::Index>(j)).squaredNorm();
    fit.r2_per_dim.push_back(ss_tot > 0.0 ? std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0) : 1.0);
  }

  const Matrix corr = abs_correlation(true_stats, learned_stats);
  if (p <= q) {
    fit.assignment = hungarian_max(corr);
    for (std::size_t i = 0; i < p; ++i) fit.mean_abs_corr += corr(i, fit.assignment[i]) / static_cast<double>(p);
  } else {
    const auto back = hungarian_max(transpose(corr));
    fit.assignment.assign(p, q);  // unassigned marker
    for (std::size_t j = 0; j < q; ++j) {
      fit.assignment[back[j]] = j;
      fit.mean_abs_corr += corr(back[j], j) / static_cast<double>(q);
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------
// JSON reports

inline nlohmann::json to_json(const MinimaxReport& r, const EnvGrid& g) {
  return {{"assertion", "balanced environment has the strictly smallest worst-case cross-entropy"},
          {"passed", r.passed},
          {"balanced_env", r.balanced},
          {"argmin_env", r.argmin},
          {"margin", r.margin},
          {"worst_case_risk", r.worst},
          {"risk_matrix", r.risk},
          {"grid", g.labels}};
}

inline nlohmann::json to_json(const FinerSweepReport& r) {
  return {{"assertion", "balancing score <=> finer than the propensity score"},
          {"passed", r.disagreements == 0},
          {"instances", r.instances},
          {"disagreements", r.disagreements},
          {"balancing_candidates", r.balancing}};
}

inline nlohmann::json to_json(const Theorem4Report& r, double tolerance) {
  return {{"assertion", "matched-group label distribution equals the semi-balanced closed form"},
          {"passed", r.max_tv <= tolerance},
          {"m", r.m},
          {"a", r.a},
          {"anchors", r.anchors},
          {"max_tv", r.max_tv},
          {"tolerance", tolerance},
          {"empirical", r.empirical},
          {"expected", r.expected}};
}

inline nlohmann::json to_json(const AffineFit& f, double threshold) {
  return {{"assertion", "learned latents match the true latents up to an affine map"},
          {"passed", f.mean_abs_corr >= threshold},
          {"mean_abs_corr", f.mean_abs_corr},
          {"threshold", threshold},
          {"r2_per_dim", f.r2_per_dim},
          {"assignment", f.assignment}};
}

}  // namespace cbal
