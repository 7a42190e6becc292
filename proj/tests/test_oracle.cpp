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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cbal/oracle.hpp"

namespace cbal {
namespace {

TEST(Minimax, DefaultGridBalancedEnvWins) {
  const EnvGrid g = default_minimax_grid();
  ASSERT_EQ(g.size(), 25u);
  const MinimaxReport r = verify_minimax(default_minimax_skeleton(), g);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.balanced, 12u);  // q = 0.5, p(Y=1) = 0.5
  EXPECT_EQ(r.argmin, r.balanced);
  EXPECT_GT(r.margin, 0.0);
}

TEST(Minimax, OwnEnvironmentPosteriorIsOptimalThere) {
  const MinimaxReport r = verify_minimax(default_minimax_skeleton(), default_minimax_grid());
  for (std::size_t f = 0; f < r.risk.size(); ++f)
    for (std::size_t e = 0; e < r.risk.size(); ++e) EXPECT_LE(r.risk[f][f], r.risk[e][f] + 1e-12);
}

TEST(Minimax, RiskMatchesDirectSum) {
  const DiscreteScm scm = default_minimax_skeleton();
  const JointTable t = enumerate_discrete(scm, 0);
  const Matrix q = bayes_posterior(t);
  double direct = 0.0;
  for (std::size_t x = 0; x < t.nx; ++x)
    for (std::size_t y = 0; y < t.m; ++y) {
      double pxy = 0.0;
      for (std::size_t z = 0; z < t.nz; ++z) pxy += t.at(x, y, z);
      if (pxy > 0.0) direct -= pxy * std::log(q(x, y));
    }
  EXPECT_NEAR(cross_entropy_risk(t, q), direct, 1e-12);
}

TEST(Minimax, SingleEnvironmentGridPassesTrivially) {
  const MinimaxReport r = verify_minimax(default_minimax_skeleton(), make_flip_grid({0.5}, {0.5}));
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.worst.size(), 1u);
}

TEST(Minimax, GridWithoutBalancedEnvironmentThrows) {
  EXPECT_THROW(verify_minimax(default_minimax_skeleton(), make_flip_grid({0.1, 0.9}, {0.3})), DomainError);
  EXPECT_THROW(verify_minimax(default_minimax_skeleton(), EnvGrid{}), DomainError);
}

TEST(Minimax, SkewedPredictorLosesToChanceOnTheMirrorEnv) {
  const MinimaxReport r = verify_minimax(default_minimax_skeleton(), make_flip_grid({0.1, 0.5, 0.9}, {0.1, 0.5, 0.9}));
  // Env 0 (q=0.1, p=0.1) evaluated on env 8 (q=0.9, p=0.9).
  EXPECT_GT(r.risk[0][8], std::log(2.0));
  EXPECT_GT(r.worst[0], r.worst[r.balanced]);
}

TEST(Finer, KnownPartitions) {
  const DiscreteScm scm = scm_from_conditionals({{0.5, 0.5}, {0.5, 0.5}, {0.8, 0.2}, {0.1, 0.9}});
  struct Case {
    std::vector<std::size_t> b;
    bool finer;
  };
  const Case cases[] = {
      {{0, 1, 2, 3}, true},   // identity
      {{0, 0, 1, 2}, true},   // merges equal propensities only
      {{0, 1, 2, 2}, false},  // merges distinct propensities
      {{0, 0, 0, 0}, false},  // constant
  };
  for (const auto& c : cases) {
    const FinerReport r = verify_finer(scm, 0, c.b);
    EXPECT_EQ(r.is_finer, c.finer);
    EXPECT_EQ(r.is_balancing, c.finer);
  }
}

TEST(Finer, ConstantIsBalancingWhenLabelIndependent) {
  const DiscreteScm scm = scm_from_conditionals({{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}});
  const FinerReport r = verify_finer(scm, 0, {0, 0, 0});
  EXPECT_TRUE(r.is_finer);
  EXPECT_TRUE(r.is_balancing);
}

TEST(Finer, BadInputsThrow) {
  const DiscreteScm scm = scm_from_conditionals({{0.5, 0.5}, {0.2, 0.8}});
  EXPECT_THROW(verify_finer(scm, 0, {0}), DimensionError);
  EXPECT_THROW(verify_finer(scm, 1, {0, 1}), LookupError);
}

TEST(Finer, RandomSweepHasNoDisagreements) {
  const FinerSweepReport r = finer_sweep(300, 4);
  EXPECT_EQ(r.instances, 300u);
  EXPECT_EQ(r.disagreements, 0u);
  EXPECT_GT(r.balancing, 0u);
  EXPECT_LT(r.balancing, r.instances);
}

TEST(SemiBalancedOracle, TwoClassesAreFullyBalanced) {
  const Theorem4Report r = verify_theorem4(default_theorem4_scm(2), 0, 1, 20000, 1, 600);
  for (const auto& row : r.expected)
    for (double v : row) EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_LE(r.max_tv, 0.02);
}

TEST(SemiBalancedOracle, PartialMatchingFourClasses) {
  const DiscreteScm scm = default_theorem4_scm(4);
  const Theorem4Report r = verify_theorem4(scm, 0, 2, 40000, 2, 600);
  EXPECT_LE(r.max_tv, 0.02);
  const Matrix s = propensity_table(scm, 0);
  for (std::size_t z = 0; z < scm.nz; ++z) {
    double sum = 0.0;
    for (std::size_t y = 0; y < 4; ++y) {
      // Rounded cell counts keep the expected value within 1e-3 of the exact score.
      EXPECT_NEAR(r.expected[z][y], semi_balanced_label_dist(s(z, y), 2, 4), 1e-3);
      sum += r.expected[z][y];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(SemiBalancedOracle, RejectsBadArguments) {
  const DiscreteScm scm = default_theorem4_scm(3);
  EXPECT_THROW(verify_theorem4(scm, 0, 3, 100, 0), DomainError);
  EXPECT_THROW(verify_theorem4(scm, 1, 1, 100, 0), LookupError);
}

Matrix random_latents(std::size_t N, std::size_t p, Rng& rng) {
  Matrix m(N, p);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

TEST(Identifiability, ExactCopyScoresOne) {
  Rng rng(5);
  const Matrix z = random_latents(500, 3, rng);
  const AffineFit f = identifiability_score(z, z);
  EXPECT_NEAR(f.mean_abs_corr, 1.0, 1e-12);
  for (double r2 : f.r2_per_dim) EXPECT_NEAR(r2, 1.0, 1e-12);
  EXPECT_EQ(f.assignment, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Identifiability, PermutationAndScaleRecovered) {
  Rng rng(6);
  const Matrix z = random_latents(500, 3, rng);
  Matrix l(500, 3);
  for (std::size_t i = 0; i < 500; ++i) {
    l(i, 0) = -2.0 * z(i, 2) + 1.0;
    l(i, 1) = 0.5 * z(i, 0) - 3.0;
    l(i, 2) = 4.0 * z(i, 1);
  }
  const AffineFit f = identifiability_score(z, l);
  EXPECT_NEAR(f.mean_abs_corr, 1.0, 1e-12);
  EXPECT_EQ(f.assignment, (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_NEAR(f.A(2, 0), -0.5, 1e-10);
  EXPECT_NEAR(f.c[2], 0.5, 1e-10);
}

TEST(Identifiability, SmallNoiseCostsLittle) {
  Rng rng(7);
  const Matrix z = random_latents(4000, 2, rng);
  Matrix l = z;
  for (double& v : l.data()) v += 0.1 * rng.normal();
  const AffineFit f = identifiability_score(z, l);
  EXPECT_GE(f.mean_abs_corr, 0.98);
  EXPECT_LE(1.0 - f.mean_abs_corr, 0.1);
}

TEST(Identifiability, InvariantToInvertibleAffineMaps) {
  Rng rng(8);
  const Matrix z = random_latents(1000, 2, rng);
  Matrix l = random_latents(1000, 2, rng);
  for (std::size_t i = 0; i < 1000; ++i) l(i, 0) += 0.7 * z(i, 0), l(i, 1) += 0.4 * z(i, 1);
  Matrix mixed(1000, 2);
  for (std::size_t i = 0; i < 1000; ++i) {
    mixed(i, 0) = 2.0 * l(i, 0) + 1.0 * l(i, 1) + 5.0;
    mixed(i, 1) = -1.0 * l(i, 0) + 3.0 * l(i, 1) - 2.0;
  }
  const AffineFit a = identifiability_score(z, l), b = identifiability_score(z, mixed);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(a.r2_per_dim[j], b.r2_per_dim[j], 1e-10);
}

TEST(Identifiability, IndependentLatentsScoreLow) {
  Rng rng(9);
  const Matrix z = random_latents(5000, 2, rng), l = random_latents(5000, 2, rng);
  EXPECT_LT(identifiability_score(z, l).mean_abs_corr, 0.1);
}

TEST(Identifiability, ShapeErrors) {
  Rng rng(10);
  EXPECT_THROW(identifiability_score(random_latents(10, 2, rng), random_latents(11, 2, rng)), DimensionError);
  EXPECT_THROW(identifiability_score(random_latents(3, 2, rng), random_latents(3, 2, rng)), DomainError);
  Matrix dup(50, 2);
  EXPECT_THROW(identifiability_score(random_latents(50, 2, rng), dup), DomainError);
}

TEST(Hungarian, AgreesWithExhaustiveSearch) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.uniform_index(5), m = n + rng.uniform_index(2);
    Matrix w(n, m);
    for (double& v : w.data()) v = rng.uniform();
    const auto got = hungarian_max(w);
    double got_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) got_sum += w(i, got[i]);
    std::vector<std::size_t> cols(m);
    std::iota(cols.begin(), cols.end(), 0);
    double best = -1.0;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += w(i, cols[i]);
      best = std::max(best, s);
    } while (std::next_permutation(cols.begin(), cols.end()));
    EXPECT_NEAR(got_sum, best, 1e-12);
    std::vector<std::size_t> sorted = got;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  }
  EXPECT_THROW(hungarian_max(Matrix(3, 2)), DimensionError);
}

TEST(Reports, JsonCarriesVerdict) {
  const FinerSweepReport r = finer_sweep(20, 1);
  const auto j = to_json(r);
  EXPECT_EQ(j["passed"], true);
  EXPECT_EQ(j["instances"], 20);
  Theorem4Report t;
  t.max_tv = 0.05;
  EXPECT_EQ(to_json(t, 0.02)["passed"], false);
}

}  // namespace
}  // namespace cbal
