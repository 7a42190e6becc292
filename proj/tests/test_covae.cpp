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
#include <numbers>

#include <Eigen/Dense>

#include "cbal/covae.hpp"
#include "cbal/scmgen.hpp"
#include "gradcheck.hpp"

namespace cbal {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

Dataset gaussian_data(std::size_t per_env, std::uint64_t seed) {
  const auto spec = make_gaussian_scm_spec(2, 6, 2, 2, 1, seed);
  const Dataset parts[] = {gen_gaussian_scm(spec, 0, per_env, seed), gen_gaussian_scm(spec, 1, per_env, seed)};
  return concat(parts);
}

VaeTrainConfig small_config(std::size_t epochs) {
  VaeTrainConfig c;
  c.epochs = epochs;
  c.hidden = {16};
  c.batch_size = 32;
  c.seed = 5;
  return c;
}

TEST(Encode, ZeroWeightEncoderReturnsBias) {
  Rng rng(1);
  CoVae v = CoVae::create(4, 2, 2, 3, 2, {5}, Activation::relu, rng);
  for (auto& w : v.encoder.weights) w.fill(0.0);
  v.encoder.biases.back() = {0.1, 0.2, 0.3, -0.4, -0.5, -0.6};
  for (int t = 0; t < 5; ++t) {
    std::vector<double> x(4);
    for (double& e : x) e = rng.normal();
    const GaussianParams q = encode(v, x, t % 2, (t / 2) % 2);
    EXPECT_EQ(q.mu, (std::vector<double>{0.1, 0.2, 0.3}));
    EXPECT_EQ(q.log_var, (std::vector<double>{-0.4, -0.5, -0.6}));
  }
}

TEST(Encode, EnvironmentIsWiredIn) {
  Rng rng(2);
  const CoVae v = CoVae::create(4, 2, 3, 2, 1, {8}, Activation::tanh, rng);
  const std::vector<double> x{0.5, -0.2, 1.0, 0.3};
  EXPECT_NE(encode(v, x, 0, 0).mu, encode(v, x, 0, 1).mu);
  EXPECT_NE(encode(v, x, 0, 0).mu, encode(v, x, 1, 0).mu);
  EXPECT_THROW(encode(v, std::vector<double>{1.0}, 0, 0), DimensionError);
}

TEST(Encode, OutputWidthIsTwoN) {
  Rng rng(3);
  const CoVae v = CoVae::create(5, 3, 2, 4, 1, {8}, Activation::relu, rng);
  EXPECT_EQ(v.encoder.output_size(), 8u);
  EXPECT_EQ(v.decoder.input_size(), 4u + 3u);
  EXPECT_EQ(v.decoder.output_size(), 5u);
}

TEST(Reparameterize, DegenerateVarianceCollapsesToMean) {
  Rng rng(4);
  const GaussianParams p({1.0, -2.0}, {-1e6, -1e6});
  EXPECT_EQ(p.log_var[0], kLogVarMin);
  double dev = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto z = reparameterize(p, rng);
    dev += (std::abs(z[0] - 1.0) + std::abs(z[1] + 2.0)) / 2000.0;
  }
  EXPECT_LT(dev, 1e-2);
}

TEST(Reparameterize, SampleMean) {
  Rng rng(5);
  const GaussianParams p({0.7}, {0.4});
  const int N = 100000;
  double s = 0.0;
  for (int i = 0; i < N; ++i) s += reparameterize(p, rng)[0];
  EXPECT_NEAR(s / N, 0.7, 3.0 * std::exp(0.2) / std::sqrt(N));
}

TEST(Reparameterize, UnitDerivativeInMean) {
  const GaussianParams a({0.3}, {0.1}), b({0.3 + 0.25}, {0.1});
  Rng r1(6), r2(6);
  EXPECT_DOUBLE_EQ(reparameterize(b, r2)[0] - reparameterize(a, r1)[0], 0.25);
}

TEST(Elbo, PosteriorEqualToPriorHasZeroKl) {
  Rng rng(7);
  CoVae v = CoVae::create(3, 2, 2, 2, 2, {4}, Activation::relu, rng);
  for (auto& w : v.encoder.weights) w.fill(0.0);
  for (auto& b : v.encoder.biases) std::fill(b.begin(), b.end(), 0.0);
  const Matrix x = random_matrix(6, 3, rng);
  const std::vector<int> y{0, 1, 0, 1, 0, 1}, env{0, 0, 1, 1, 0, 1};
  const ElboResult r = elbo(v, x, y, env, rng);
  EXPECT_EQ(r.kl, 0.0);
}

TEST(Elbo, PerfectReconstruction) {
  Rng rng(8);
  CoVae v = CoVae::create(3, 2, 1, 1, 1, {4}, Activation::relu, rng);
  for (auto& w : v.decoder.weights) w.fill(0.0);
  v.decoder.biases.back() = {0.25, -1.0, 2.0};
  Matrix x(4, 3);
  for (std::size_t i = 0; i < 4; ++i) x.row(i)[0] = 0.25, x.row(i)[1] = -1.0, x.row(i)[2] = 2.0;
  const std::vector<int> y{0, 1, 1, 0}, env{0, 0, 0, 0};
  const ElboResult r = elbo(v, x, y, env, rng);
  EXPECT_NEAR(r.recon, -1.5 * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(Elbo, UnknownPriorRowThrows) {
  Rng rng(9);
  const CoVae v = CoVae::create(3, 2, 1, 1, 1, {4}, Activation::relu, rng);
  const Matrix x = random_matrix(1, 3, rng);
  EXPECT_THROW(elbo(v, x, std::vector<int>{0}, std::vector<int>{1}, rng), LookupError);
}

TEST(Elbo, FiniteDifferenceGradients) {
  for (std::size_t k : {1u, 2u}) {
    Rng rng(10 + k);
    const CoVae v = testing::small_vae(3, 2, 2, k == 1 ? 1 : 2, k, rng);
    const Matrix x = random_matrix(5, 3, rng);
    const std::vector<int> y{0, 1, 1, 0, 1}, env{0, 1, 0, 1, 1};
    const Matrix eta = standard_noise(5, v.n, rng);
    EXPECT_LE(testing::elbo_gradcheck(v, x, y, env, eta), 1e-4) << "k=" << k;
    const std::vector<double> w{0.1, 0.3, 0.2, 0.25, 0.15};
    EXPECT_LE(testing::elbo_gradcheck(v, x, y, env, eta, w), 1e-4) << "weighted k=" << k;
  }
}

TEST(Elbo, KlNonNegativeOnRandomModels) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const CoVae v = testing::small_vae(3, 2, 2, 2, 2, rng);
    const Matrix x = random_matrix(8, 3, rng);
    const std::vector<int> y{0, 1, 0, 1, 0, 1, 0, 1}, env{0, 0, 1, 1, 0, 0, 1, 1};
    EXPECT_GE(elbo(v, x, y, env, rng).kl, 0.0);
  }
}

TEST(Elbo, LowerBoundOnLinearGaussianModel) {
  // Identity activations make the decoder affine: x = A z + B y + c + eps.
  // Then log p(x | y, env) = log N(x; A mu + B y + c, A A^T + I) exactly.
  Rng rng(13);
  CoVae v = CoVae::create(3, 2, 1, 2, 2, {4}, Activation::identity, rng);
  for (auto& row : v.prior.table()) row = GaussianParams({rng.normal(), rng.normal()}, {rng.uniform(-0.5, 0.5), 0.2});
  // Collapse the decoder into one affine map.
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(4, 4);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(4);
  Eigen::MatrixXd W1 = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(
      v.decoder.weights[0].data().data(), 4, 4);
  Eigen::MatrixXd W2 = Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(
      v.decoder.weights[1].data().data(), 4, 3);
  for (int i = 0; i < 4; ++i) v.decoder.biases[0][static_cast<std::size_t>(i)] = 0.1 * i;
  Eigen::RowVectorXd b1(4), b2(3);
  for (int i = 0; i < 4; ++i) b1(i) = v.decoder.biases[0][static_cast<std::size_t>(i)];
  for (int i = 0; i < 3; ++i) b2(i) = v.decoder.biases[1][static_cast<std::size_t>(i)];
  const Eigen::MatrixXd M = W1 * W2;               // [z; y] -> x
  const Eigen::RowVectorXd c = b1 * W2 + b2;
  const Eigen::MatrixXd A = M.topRows(2).transpose();  // 3 x 2

  for (int y = 0; y < 2; ++y) {
    const auto& g = v.prior.at(0, y);
    Eigen::Vector2d mu(g.mu[0], g.mu[1]);
    Eigen::Matrix2d S = Eigen::Matrix2d::Zero();
    S(0, 0) = std::exp(g.log_var[0]);
    S(1, 1) = std::exp(g.log_var[1]);
    const Eigen::Vector3d mean = A * mu + M.row(2 + y).transpose() + c.transpose();
    const Eigen::Matrix3d C = A * S * A.transpose() + Eigen::Matrix3d::Identity();
    Eigen::Vector3d xv(rng.normal(), rng.normal(), rng.normal());
    xv = mean + xv;
    const Eigen::Vector3d d = xv - mean;
    const double logp = -0.5 * (3 * std::log(2 * std::numbers::pi) + std::log(C.determinant()) + d.dot(C.ldlt().solve(d)));

    Matrix x(1, 3);
    for (int j = 0; j < 3; ++j) x(0, static_cast<std::size_t>(j)) = xv(j);
    const std::vector<int> ys{y}, es{0};
    double mean_elbo = 0.0;
    const int draws = 20000;
    Rng noise(50 + y);
    for (int t = 0; t < draws; ++t) mean_elbo += elbo(v, x, ys, es, noise).elbo / draws;
    EXPECT_LE(mean_elbo, logp + 0.05) << "y=" << y;
  }
  (void)W;
  (void)b;
}

TEST(TrainVae, ElboImprovesAndPriorVariesAcrossEnvs) {
  const Dataset ds = gaussian_data(600, 3);
  const VaeTrainResult r = train_vae(ds, small_config(50));
  ASSERT_EQ(r.curve.size(), 51u);
  EXPECT_GT(r.curve.back().elbo, r.curve.front().elbo);
  for (const auto& pt : r.curve) EXPECT_GE(pt.kl, 0.0);
  double max_delta = 0.0;
  for (int y = 0; y < 2; ++y)
    for (std::size_t j = 0; j < r.model.n; ++j)
      max_delta = std::max(max_delta, std::abs(r.model.prior.at(0, y).mu[j] - r.model.prior.at(1, y).mu[j]));
  EXPECT_GT(max_delta, 0.1);
  EXPECT_EQ(r.model.n, 3u);
}

TEST(TrainVae, SeedIdenticalRunsAreBitIdentical) {
  const Dataset ds = gaussian_data(200, 4);
  const auto a = train_vae(ds, small_config(3)), b = train_vae(ds, small_config(3));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(encode_model(a.model), encode_model(b.model));
  auto c = small_config(3);
  c.seed = 6;
  EXPECT_NE(train_vae(ds, c).model, a.model);
}

TEST(TrainVae, KTwoKeepsPriorVarianceInRange) {
  const Dataset ds = gaussian_data(200, 5);
  auto c = small_config(5);
  c.k = 2;
  const auto r = train_vae(ds, c);
  for (const auto& row : r.model.prior.table())
    for (double lv : row.log_var) {
      EXPECT_GE(lv, kLogVarMin);
      EXPECT_LE(lv, kLogVarMax);
    }
}

TEST(TrainVae, RequiresContiguousEnvironments) {
  Dataset ds = gaussian_data(50, 6);
  for (auto& e : ds.examples) e.env += 1;
  EXPECT_THROW(train_vae(ds, small_config(1)), DomainError);
}

TEST(TrainVae, PosteriorMeansClusterByColor) {
  ColoredSpec s;
  s.flips = {0.1, 0.2};
  s.n_per_env = 1500;
  const Dataset parts[] = {gen_colored(s, 0, 1), gen_colored(s, 1, 1)};
  const Dataset ds = concat(parts);
  VaeTrainConfig c = small_config(15);
  c.hidden = {32, 32};
  const CoVae v = train_vae(ds, c).model;
  const Matrix mu = posterior_means(v, ds);

  // Mean silhouette over a subsample, clusters = true color.
  const std::size_t N = 600;
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double d[2] = {0, 0};
    std::size_t cnt[2] = {0, 0};
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      double s2 = 0.0;
      for (std::size_t q = 0; q < v.n; ++q) s2 += std::pow(mu(i, q) - mu(j, q), 2);
      const auto cj = static_cast<std::size_t>(ds.latents[j][kColorLatent]);
      d[cj] += std::sqrt(s2);
      ++cnt[cj];
    }
    const auto ci = static_cast<std::size_t>(ds.latents[i][kColorLatent]);
    const double a = d[ci] / static_cast<double>(cnt[ci]), b = d[1 - ci] / static_cast<double>(cnt[1 - ci]);
    total += (b - a) / std::max(a, b);
  }
  EXPECT_GT(total / static_cast<double>(N), 0.0);
}

TEST(ModelFormat, RoundTrip) {
  const Dataset ds = gaussian_data(100, 7);
  const CoVae v = train_vae(ds, small_config(2)).model;
  const auto bytes = encode_model(v);
  const CoVae back = decode_model(bytes);
  EXPECT_EQ(back, v);
  EXPECT_EQ(encode_model(back), bytes);
  EXPECT_EQ(posterior_means(back, ds), posterior_means(v, ds));
}

TEST(ModelFormat, TruncatedAndCorrupt) {
  Rng rng(8);
  const CoVae v = CoVae::create(3, 2, 2, 2, 2, {4}, Activation::relu, rng);
  auto bytes = encode_model(v);
  auto cut = bytes;
  cut.resize(bytes.size() - 9);
  try {
    decode_model(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::truncated);
    EXPECT_EQ(e.offset(), cut.size());
  }
  auto bad = bytes;
  bad[4] = 9;
  try {
    decode_model(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::version_mismatch);
  }
  bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(decode_model(bad), FormatError);
}

}  // namespace
}  // namespace cbal
