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

// cbal: command-line driver for the balanced mini-batch pipeline.
//
//   cbal [--config run.json] [--out DIR] [--force] <command>
//
// Exit codes: 0 ok, 1 usage or runtime error, 2 verification failure,
// 3 missing or stale upstream artifact.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbal.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitMissing = 3;

void print_row(const std::string& label, const std::vector<double>& values) {
  std::printf("%-10s", label.c_str());
  for (double v : values) std::printf(" %9.4f", v);
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal balanced mini-batch sampling experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  bool force = false;
  app.add_option("--config", config_path, "JSON run config (defaults apply to missing keys)")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory (overrides out_dir in the config)");
  app.add_flag("--force", force, "Accept upstream artifacts built from a different config");

  auto* gen = app.add_subcommand("gen", "Generate train/val/test colored datasets");
  auto* train_vae = app.add_subcommand("train-vae", "Fit the conditional VAE on the training split");
  auto* match = app.add_subcommand("match", "Precompute nearest-score matches for every example");

  std::string sampler = "random";
  auto* train = app.add_subcommand("train", "Train a classifier with the chosen mini-batch sampler");
  train->add_option("--sampler", sampler, "random, balanced or oracle")
      ->check(CLI::IsMember({"random", "balanced", "oracle"}));

  std::vector<double> envs;
  auto* eval = app.add_subcommand("eval", "Accuracy table of trained classifiers across flip probabilities");
  eval->add_option("--envs", envs, "Flip probabilities (default: eval.flips from the config)")->delimiter(',');

  std::string theorem;
  auto* verify = app.add_subcommand("verify", "Run a brute-force oracle and write a JSON report");
  verify->add_option("--theorem", theorem, "1 (minimax), 3 (finer-than), 4 (semi-balanced) or ident")
      ->required()
      ->check(CLI::IsMember({"1", "3", "4", "ident"}));

  std::string sweep;
  auto* ablate = app.add_subcommand("ablate", "Ablation sweep written as CSV");
  ablate->add_option("--sweep", sweep, "beta, a or testenv")->required()->check(CLI::IsMember({"beta", "a", "testenv"}));

  auto* show = app.add_subcommand("config", "Print the effective run config as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    cbal::RunConfig cfg = config_path.empty() ? cbal::RunConfig{} : cbal::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();

    if (*show) {
      std::cout << cbal::to_json(cfg).dump(2) << '\n';
    } else if (*gen) {
      const auto s = cbal::cmd_gen(cfg);
      std::printf("train %zu  val %zu  test %zu examples in %s\n", s.train, s.val, s.test, cfg.out_dir.c_str());
      const auto flips = cfg.generator().flips;
      for (std::size_t e = 0; e < flips.size(); ++e)
        std::printf("env %zu flip %.3f color-label agreement %.4f\n", e, flips[e], s.color_agreement[e]);
    } else if (*train_vae) {
      const auto r = cbal::cmd_train_vae(cfg, force);
      std::printf("latent dim %zu, k %zu\n", r.model.n, r.model.k);
      for (const auto& pt : r.curve) std::printf("epoch %3zu  elbo %.5f  recon %.5f  kl %.5f\n", pt.epoch, pt.elbo, pt.recon, pt.kl);
    } else if (*match) {
      const auto s = cbal::cmd_match(cfg, force);
      for (const auto& [q, v] : s.quantiles) std::printf("distance q%.2f %.6g\n", q, v);
      std::printf("distinct matches %zu  max frequency %zu\n", s.distinct_matches, s.max_match_frequency);
      if (s.latent_agreement >= 0.0) std::printf("matched pairs sharing color %.4f\n", s.latent_agreement);
    } else if (*train) {
      const auto r = cbal::cmd_train(cfg, cbal::parse_sampler(sampler), force);
      std::printf("sampler %s  best step %zu  validation accuracy %.4f\n", sampler.c_str(), r.best_step, r.best_val_accuracy);
    } else if (*eval) {
      const auto t = cbal::cmd_eval(cfg, envs.empty() ? cfg.eval_flips : envs, force);
      std::printf("%-10s", "flip");
      for (auto s : t.samplers) std::printf(" %9s", cbal::to_string(s).c_str());
      std::printf("\n");
      for (std::size_t f = 0; f < t.flips.size(); ++f) print_row(std::to_string(t.flips[f]).substr(0, 5), t.accuracy[f]);
    } else if (*verify) {
      const auto r = cbal::cmd_verify(cfg, theorem);
      std::printf("verify %s: %s\n", theorem.c_str(), r.passed ? "passed" : "FAILED");
      if (!r.passed) return kExitVerify;
    } else if (*ablate) {
      const auto t = cbal::cmd_ablate(cfg, sweep, force);
      std::printf("%-10s", sweep.c_str());
      for (const auto& c : t.columns) std::printf(" %9s", c.c_str());
      std::printf("\n");
      for (const auto& r : t.rows) print_row(std::to_string(r.value).substr(0, 5), r.accuracy);
    }
  } catch (const cbal::MissingArtifactError& e) {
    std::fprintf(stderr, "cbal: %s\n", e.what());
    return kExitMissing;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cbal: %s\n", e.what());
    return kExitUsage;
  }
  return kExitOk;
}
