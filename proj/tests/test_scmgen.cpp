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

#include <cmath>
#include <filesystem>

#include "cbal/dataset.hpp"
#include "cbal/scmgen.hpp"

namespace cbal {
namespace {

ColoredSpec spec_with(std::vector<double> flips, std::size_t n, double label_noise = 0.25) {
  ColoredSpec s;
  s.flips = std::move(flips);
  s.n_per_env = n;
  s.label_noise = label_noise;
  return s;
}

int color_of(const Dataset& ds, std::size_t i) { return static_cast<int>(ds.latents[i][kColorLatent]); }

double agreement(const Dataset& ds) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hit += color_of(ds, i) == ds.examples[i].y;
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

TEST(GenColored, DeterministicLimit) {
  ColoredSpec s = spec_with({0.0}, 2000, 0.0);
  s.m = 3;
  const Dataset ds = gen_colored(s, 0, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(color_of(ds, i), ds.examples[i].y);
    EXPECT_EQ(ds.latents[i][kTrueClassLatent], ds.examples[i].y);
  }
}

TEST(GenColored, FlipConventionAgreement) {
  const ColoredSpec s = spec_with({0.1, 0.2, 0.9}, 50000);
  const double want[] = {0.9, 0.8, 0.1};
  for (int e = 0; e < 3; ++e) EXPECT_NEAR(agreement(gen_colored(s, e, 3)), want[e], 0.01) << "env " << e;
}

TEST(GenColored, ColorBlockIsOneHot) {
  ColoredSpec s = spec_with({0.3}, 500);
  s.m = 4;
  s.color_intensity = 2.0;
  const Dataset ds = gen_colored(s, 0, 4);
  EXPECT_EQ(ds.dim, s.pattern_dim + 4);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (int c = 0; c < 4; ++c)
      EXPECT_EQ(ds.examples[i].x[s.pattern_dim + static_cast<std::size_t>(c)], c == color_of(ds, i) ? 2.0 : 0.0);
}

TEST(GenColored, PatternOnlyBayesClassifierCeiling) {
  const ColoredSpec s = spec_with({0.5}, 50000);
  const auto pats = class_patterns(s);
  const Dataset ds = gen_colored(s, 0, 5);
  std::size_t correct = 0;
  for (const auto& ex : ds.examples) {
    // Equal isotropic noise: the likelihood is maximal at the nearest pattern.
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < s.m; ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < s.pattern_dim; ++j) d += std::pow(ex.x[j] - pats[static_cast<std::size_t>(c)][j], 2);
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == ex.y;
  }
  EXPECT_NEAR(static_cast<double>(correct) / static_cast<double>(ds.size()), 0.75, 0.01);
}

TEST(GenColored, ReproducibleAndSeedSensitive) {
  const ColoredSpec s = spec_with({0.1, 0.2}, 300);
  EXPECT_EQ(gen_colored(s, 1, 9), gen_colored(s, 1, 9));
  EXPECT_NE(gen_colored(s, 1, 9), gen_colored(s, 1, 10));
  EXPECT_NE(gen_colored(s, 0, 9).examples, gen_colored(s, 1, 9).examples);
}

TEST(GenColored, InvalidSpec) {
  ColoredSpec s = spec_with({1.5}, 10);
  EXPECT_THROW(gen_colored(s, 0, 0), DomainError);
  s = spec_with({0.1}, 10);
  s.m = 1;
  EXPECT_THROW(gen_colored(s, 0, 0), DomainError);
  EXPECT_THROW(gen_colored(spec_with({0.1}, 10), 1, 0), LookupError);
}

TEST(GenColoredBalanced, IndependentUniformCells) {
  const ColoredSpec s = spec_with({0.1}, 50000);
  const Dataset ds = gen_colored_balanced(s, 0, 6);
  double cell[2][2] = {};
  for (std::size_t i = 0; i < ds.size(); ++i) cell[ds.examples[i].y][color_of(ds, i)] += 1.0 / static_cast<double>(ds.size());
  double mi = 0.0;
  for (int y = 0; y < 2; ++y)
    for (int c = 0; c < 2; ++c) {
      EXPECT_NEAR(cell[y][c], 0.25, 0.01);
      const double py = cell[y][0] + cell[y][1], pc = cell[0][c] + cell[1][c];
      mi += cell[y][c] * std::log(cell[y][c] / (py * pc));
    }
  EXPECT_LE(mi, 0.01);
}

TEST(GenColoredBalanced, PatternBlockMatchesGenColored) {
  const ColoredSpec s = spec_with({0.1}, 20000);
  const Dataset a = gen_colored(s, 0, 7), b = gen_colored_balanced(s, 0, 7);
  for (int y = 0; y < 2; ++y)
    for (std::size_t j = 0; j < s.pattern_dim; ++j) {
      double sa = 0, sb = 0;
      std::size_t na = 0, nb = 0;
      for (const auto& e : a.examples)
        if (e.y == y) sa += e.x[j], ++na;
      for (const auto& e : b.examples)
        if (e.y == y) sb += e.x[j], ++nb;
      // Per-class means differ only by sampling noise; the spread of a
      // pattern coordinate given the label is at most 1 (pattern) + noise.
      const double se = 1.1 * std::sqrt(1.0 / static_cast<double>(na) + 1.0 / static_cast<double>(nb));
      EXPECT_NEAR(sa / static_cast<double>(na), sb / static_cast<double>(nb), 4.0 * se);
    }
}

TEST(GaussianScm, NoiselessOrthonormalIsExactlyInvertible) {
  GaussianScmSpec spec = make_gaussian_scm_spec(2, 8, 3, 2, 1, 4, 0.0);
  // Replace A with orthonormal columns.
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(spec.A));
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(8, 5);
  spec.A = from_eigen(Q);
  const Dataset ds = gen_gaussian_scm(spec, 1, 200, 3);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Eigen::VectorXd x(8);
    for (int r = 0; r < 8; ++r) x(r) = ds.examples[i].x[static_cast<std::size_t>(r)];
    const Eigen::VectorXd code = Q.transpose() * x;
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(code(j), ds.latents[i][static_cast<std::size_t>(j)], 1e-5);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(code(2 + c), c == ds.examples[i].y ? 1.0 : 0.0, 1e-5);
  }
}

TEST(GaussianScm, SharedParametersGiveSharedMoments) {
  // n = k = 1 keeps the contrast matrix on env 0, so env 1 may copy it.
  GaussianScmSpec spec = make_gaussian_scm_spec(1, 6, 2, 2, 1, 8);
  for (std::size_t y = 0; y < 2; ++y) spec.table[2 + y] = spec.table[y];
  const Dataset a = gen_gaussian_scm(spec, 0, 20000, 1), b = gen_gaussian_scm(spec, 1, 20000, 2);
  for (int y = 0; y < 2; ++y)
    for (std::size_t j = 0; j < 1; ++j) {
      double sa = 0, sb = 0;
      std::size_t na = 0, nb = 0;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a.examples[i].y == y) sa += a.latents[i][j], ++na;
      for (std::size_t i = 0; i < b.size(); ++i)
        if (b.examples[i].y == y) sb += b.latents[i][j], ++nb;
      const double sd = std::exp(0.5 * spec.table[static_cast<std::size_t>(y)].log_var[j]);
      const double se = sd * std::sqrt(1.0 / static_cast<double>(na) + 1.0 / static_cast<double>(nb));
      EXPECT_NEAR(sa / static_cast<double>(na), sb / static_cast<double>(nb), 3.0 * se);
    }
}

TEST(GaussianScm, ContrastMatrixInvertibleForIdentifiabilitySetup) {
  const GaussianScmSpec spec = make_gaussian_scm_spec(2, 10, 3, 3, 2, 1);
  const Matrix L = lambda_contrast_matrix(spec);
  EXPECT_EQ(L.rows(), 4u);
  EXPECT_GT(std::abs(to_eigen(L).determinant()), 1e-8);
  EXPECT_NO_THROW(check_gaussian_scm(spec));
}

TEST(GaussianScm, RankDeficientAIsRejected) {
  GaussianScmSpec spec = make_gaussian_scm_spec(2, 6, 2, 2, 1, 2);
  for (std::size_t r = 0; r < spec.A.rows(); ++r) spec.A(r, 1) = 2.0 * spec.A(r, 0);
  EXPECT_THROW(gen_gaussian_scm(spec, 0, 10, 0), DomainError);
}

TEST(GaussianScm, TooFewPairsForContrast) {
  // m |E| = 2 pairs cannot give nk + 1 = 5.
  EXPECT_THROW(make_gaussian_scm_spec(2, 6, 2, 1, 2, 0), DomainError);
}

DiscreteScm random_scm(Rng& rng, std::size_t nz, std::size_t m) {
  auto stochastic = [&](std::size_t n) {
    std::vector<double> p(n);
    double s = 0;
    for (double& v : p) s += (v = 0.1 + rng.uniform());
    for (double& v : p) v /= s;
    return p;
  };
  Matrix cy(m, m), cz(nz, nz), pz(m, nz);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = stochastic(m);
    std::copy(r.begin(), r.end(), cy.row(i).begin());
    const auto q = stochastic(nz);
    std::copy(q.begin(), q.end(), pz.row(i).begin());
  }
  for (std::size_t i = 0; i < nz; ++i) {
    const auto r = stochastic(nz);
    std::copy(r.begin(), r.end(), cz.row(i).begin());
  }
  return make_disentangled_scm(cy, cz, {pz}, {stochastic(m)});
}

TEST(Discrete, JointSumsToOne) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) EXPECT_NEAR(enumerate_discrete(random_scm(rng, 3, 2), 0).total(), 1.0, 1e-10);
}

TEST(Discrete, UniformNoiselessJointIsUniformOnImage) {
  const Matrix I2 = Matrix::identity(2), I3 = Matrix::identity(3);
  const DiscreteScm scm = make_disentangled_scm(I2, I3, {Matrix(2, 3, 1.0 / 3.0)}, {{0.5, 0.5}});
  const JointTable t = enumerate_discrete(scm, 0);
  for (std::size_t x = 0; x < 6; ++x)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t z = 0; z < 3; ++z)
        EXPECT_DOUBLE_EQ(t.at(x, y, z), scm.f[y * 3 + z] == x ? 1.0 / 6.0 : 0.0);
}

TEST(Discrete, BalancedConstructionIsIndependent) {
  Rng rng(2);
  DiscreteScm scm = random_scm(rng, 4, 3);
  const std::vector<double> shared{0.1, 0.2, 0.3, 0.4};
  for (std::size_t y = 0; y < 3; ++y) std::copy(shared.begin(), shared.end(), scm.p_z_given_y[0].row(y).begin());
  scm.p_y[0] = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  const JointTable t = enumerate_discrete(scm, 0);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t z = 0; z < 4; ++z) EXPECT_NEAR(t.p_yz(y, z), shared[z] / 3.0, 1e-15);
}

TEST(Discrete, SamplingMatchesEnumeration) {
  Rng rng(3);
  const DiscreteScm scm = random_scm(rng, 3, 2);
  const JointTable t = enumerate_discrete(scm, 0);
  const std::size_t N = 100000;
  Rng draw(4);
  std::vector<double> freq(scm.nx * scm.m, 0.0);
  for (const auto& s : sample_discrete(scm, 0, N, draw)) freq[s.x * scm.m + s.y] += 1.0;
  for (std::size_t x = 0; x < scm.nx; ++x)
    for (std::size_t y = 0; y < scm.m; ++y) {
      const double p = t.p_xy(x, y);
      const double sd = std::sqrt(p * (1 - p) / static_cast<double>(N));
      EXPECT_NEAR(freq[x * scm.m + y] / static_cast<double>(N), p, 3.0 * sd + 1e-12);
    }
}

TEST(Discrete, ValidationRejectsBadTables) {
  Rng rng(5);
  DiscreteScm scm = random_scm(rng, 3, 2);
  scm.p_y[0][0] += 0.1;
  EXPECT_THROW(scm.validate(), DomainError);
  scm = random_scm(rng, 3, 2);
  scm.f[1] = scm.f[0];
  EXPECT_THROW(scm.validate(), DomainError);
}

// ---------------------------------------------------------------------------
// Dataset file format

Dataset small_dataset() {
  ColoredSpec s = spec_with({0.1, 0.3}, 40);
  s.m = 3;
  const Dataset parts[] = {gen_colored(s, 0, 1), gen_colored(s, 1, 1)};
  return concat(parts);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cbal_test_" + name)).string();
}

TEST(DatasetFormat, RoundTripIsBitExact) {
  const Dataset ds = small_dataset();
  const std::string path = temp_path("roundtrip.cbds");
  write_dataset(path, ds);
  const Dataset back = read_dataset(path);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(encode_dataset(back), io::read_file(path));
  std::filesystem::remove(path);
  std::filesystem::remove(latents_path(path));
}

TEST(DatasetFormat, HeaderLayout) {
  const Dataset ds = small_dataset();
  const auto bytes = encode_dataset(ds);
  ASSERT_EQ(bytes.size(), 24 + ds.size() * (ds.dim * 4 + 4));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CBDS");
  auto u32 = [&](std::size_t at) {
    return bytes[at] | bytes[at + 1] << 8 | bytes[at + 2] << 16 | static_cast<std::uint32_t>(bytes[at + 3]) << 24;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), ds.size());
  EXPECT_EQ(u32(12), ds.dim);
  EXPECT_EQ(u32(16), 3u);
  EXPECT_EQ(u32(20), 2u);
}

TEST(DatasetFormat, CorruptMagic) {
  auto bytes = encode_dataset(small_dataset());
  bytes[0] = 'X';
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::magic_mismatch);
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(DatasetFormat, TruncatedMidExampleNamesOffset) {
  const Dataset ds = small_dataset();
  auto bytes = encode_dataset(ds);
  const std::size_t record = ds.dim * 4 + 4;
  const std::size_t cut = 24 + 5 * record + 7;
  bytes.resize(cut);
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::truncated);
    EXPECT_EQ(e.offset(), cut);
    EXPECT_NE(std::string(e.what()).find(std::to_string(24 + 5 * record)), std::string::npos);
  }
}

TEST(DatasetFormat, DimensionOverflow) {
  auto bytes = encode_dataset(small_dataset());
  // n_examples = 2^32 - 1 with dim = 2^20 overflows the size bound.
  for (int i = 0; i < 4; ++i) bytes[8 + i] = 0xFF;
  bytes[12] = 0, bytes[13] = 0, bytes[14] = 0x10, bytes[15] = 0;
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::dimension_overflow);
  }
}

TEST(DatasetFormat, VersionMismatch) {
  auto bytes = encode_dataset(small_dataset());
  bytes[4] = 2;
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::version_mismatch);
  }
}

TEST(DatasetFormat, MissingFile) {
  EXPECT_THROW(read_dataset(temp_path("does_not_exist.cbds")), FormatError);
}

TEST(DatasetFormat, IdxLoader) {
  // 2 images of 2x2 bytes, and their labels.
  io::Bytes img = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 10, 20, 30, 40, 50, 60};
  io::Bytes lab = {0, 0, 8, 1, 0, 0, 0, 2, 1, 0};
  const Dataset ds = dataset_from_idx(decode_idx(img), decode_idx(lab), 2, 0);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim, 4u);
  EXPECT_EQ(ds.examples[0].y, 1);
  EXPECT_DOUBLE_EQ(ds.examples[0].x[1], 1.0);
  EXPECT_EQ(ds.examples[1].y, 0);
}

TEST(Dataset, ValidateRequiresEveryLabelPerEnv) {
  Dataset ds;
  ds.dim = 1;
  ds.m = 2;
  ds.push({{0.0}, 0, 0});
  ds.push({{0.0}, 1, 0});
  ds.push({{0.0}, 0, 1});
  EXPECT_NO_THROW(ds.validate());
  EXPECT_THROW(ds.validate(true), LookupError);
  EXPECT_THROW(ds.push({{0.0, 1.0}, 0, 0}), DimensionError);
  EXPECT_THROW(ds.push({{0.0}, 2, 0}), DomainError);
}

}  // namespace
}  // namespace cbal
