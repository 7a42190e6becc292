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

// Experiment pipeline behind the cbal command-line tool: a JSON run config,
// per-stage config hashes, artifact sidecars and one function per command.
//
// Artifacts in the output directory:
//   train.cbds val.cbds test.cbds   (+ .latents)   gen
//   vae.cbva vae_curve.csv                          train-vae
//   matches.cbmi match_stats.csv                    match
//   clf_<sampler>.cbcl train_log_<sampler>.csv      train
//   eval.csv                                        eval
//   verify_<theorem>.json                           verify
//   ablate_<sweep>.csv                              ablate
// Every binary artifact has a "<file>.meta.json" sidecar holding the hash of
// the config sections it was built from.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cbal/balance.hpp"
#include "cbal/covae.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/oracle.hpp"
#include "cbal/scmgen.hpp"
#include "cbal/trainer.hpp"
#include "json.hpp"

namespace cbal {

/// An upstream artifact is absent or was built from a different config.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Config

struct VerifyConfig {
  std::uint64_t seed = 0;
  std::size_t theorem4_anchors = 100000;
  double theorem4_tolerance = 0.02;
  std::size_t finer_instances = 1000;
  std::size_t ident_per_env = 5000;
  std::size_t ident_test = 10000;
  std::size_t ident_epochs = 40;
  std::vector<std::size_t> ident_hidden = {64, 64};
  double ident_threshold = 0.8;
};

struct AblateConfig {
  std::vector<double> betas = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t a_classes = 10;
  std::vector<std::size_t> as = {1, 2, 3, 5, 7, 9};
  std::vector<double> flips = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
};

struct RunConfig {
  std::string out_dir = "cbal_run";

  // data
  ColoredSpec colored;  // `flips` is ignored; see train_flips / test_flips
  std::vector<double> train_flips = {0.1, 0.2};
  std::vector<double> test_flips = {0.9};
  std::uint64_t data_seed = 11;
  double val_fraction = 0.1;

  VaeTrainConfig vae;

  // batch
  std::size_t B = 64;
  std::size_t a = 1;
  Metric metric = Metric::skl;

  TrainConfig clf;

  // eval
  std::vector<double> eval_flips = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::uint64_t eval_seed = 99;

  VerifyConfig verify;
  AblateConfig ablate;

  RunConfig() {
    vae.hidden = {128, 128};
    vae.epochs = 10;
    clf.steps = 3000;
    clf.seed = 3;
  }

  /// The generator spec with train environments first, then test ones.
  ColoredSpec generator() const {
    ColoredSpec s = colored;
    s.flips = train_flips;
    s.flips.insert(s.flips.end(), test_flips.begin(), test_flips.end());
    return s;
  }

  TrainConfig train_config(SamplerKind sampler) const {
    TrainConfig c = clf;
    c.B = B;
    c.a = a;
    c.sampler = sampler;
    return c;
  }

  void validate() const {
    generator().validate();
    if (train_flips.empty()) throw DomainError("config: at least one training environment is required");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw DomainError("config: val_fraction outside [0,1)");
    if (a < 1 || a + 1 > static_cast<std::size_t>(colored.m)) throw DomainError("config: a must lie in [1, m-1]");
    if (B == 0) throw DomainError("config: B must be positive");
    vae.validate();
    train_config(SamplerKind::random).validate();
    if (ablate.a_classes < 2) throw DomainError("config: ablate.a_classes must be at least 2");
    for (std::size_t v : ablate.as)
      if (v < 1 || v + 1 > ablate.a_classes) throw DomainError("config: ablate.as entries must lie in [1, a_classes-1]");
  }
};

namespace detail {

using nlohmann::json;

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw DomainError("config: section '" + section + "' must be an object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw DomainError("config: unknown key '" + section + "." + k + "'");
}

}  // namespace detail

inline nlohmann::json data_json(const RunConfig& c) {
  const ColoredSpec& s = c.colored;
  return {{"generator", "colored"},      {"m", s.m},
          {"train_flips", c.train_flips}, {"test_flips", c.test_flips},
          {"label_noise", s.label_noise}, {"pattern_dim", s.pattern_dim},
          {"n_per_env", s.n_per_env},     {"pattern_scale", s.pattern_scale},
          {"pattern_noise", s.pattern_noise}, {"color_intensity", s.color_intensity},
          {"pattern_seed", s.pattern_seed}, {"seed", c.data_seed},
          {"val_fraction", c.val_fraction}};
}

inline nlohmann::json vae_json(const RunConfig& c) {
  const VaeTrainConfig& v = c.vae;
  nlohmann::json j = {{"lr", v.lr},           {"batch_size", v.batch_size}, {"epochs", v.epochs},
                      {"seed", v.seed},       {"cap", v.cap},               {"k", v.k},
                      {"hidden", v.hidden},   {"activation", to_string(v.activation)},
                      {"prior_init_scale", v.prior_init_scale}};
  j["latent_dim"] = v.latent_dim ? nlohmann::json(*v.latent_dim) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json batch_json(const RunConfig& c) {
  return {{"B", c.B}, {"a", c.a}, {"metric", to_string(c.metric)}};
}

inline nlohmann::json classifier_json(const RunConfig& c) {
  const TrainConfig& t = c.clf;
  return {{"lr", t.lr},           {"steps", t.steps},           {"beta", t.beta},
          {"seed", t.seed},       {"eval_every", t.eval_every}, {"hidden", t.hidden},
          {"activation", to_string(t.activation)}, {"select_best", t.select_best}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  const VerifyConfig& v = c.verify;
  const AblateConfig& a = c.ablate;
  return {{"out_dir", c.out_dir},
          {"data", data_json(c)},
          {"vae", vae_json(c)},
          {"batch", batch_json(c)},
          {"classifier", classifier_json(c)},
          {"eval", {{"flips", c.eval_flips}, {"seed", c.eval_seed}}},
          {"verify",
           {{"seed", v.seed},
            {"theorem4_anchors", v.theorem4_anchors},
            {"theorem4_tolerance", v.theorem4_tolerance},
            {"finer_instances", v.finer_instances},
            {"ident_per_env", v.ident_per_env},
            {"ident_test", v.ident_test},
            {"ident_epochs", v.ident_epochs},
            {"ident_hidden", v.ident_hidden},
            {"ident_threshold", v.ident_threshold}}},
          {"ablate", {{"betas", a.betas}, {"a_classes", a.a_classes}, {"as", a.as}, {"flips", a.flips}}}};
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw DomainError("config: unknown activation '" + s + "'");
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, "", {"out_dir", "data", "vae", "batch", "classifier", "eval", "verify", "ablate"});
  try {
    read_field(j, "out_dir", c.out_dir);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, "data", {"generator", "m", "train_flips", "test_flips", "label_noise", "pattern_dim", "n_per_env",
                                 "pattern_scale", "pattern_noise", "color_intensity", "pattern_seed", "seed", "val_fraction"});
      if (d.contains("generator") && d.at("generator").get<std::string>() != "colored")
        throw DomainError("config: data.generator must be \"colored\"");
      read_field(d, "m", c.colored.m);
      read_field(d, "train_flips", c.train_flips);
      read_field(d, "test_flips", c.test_flips);
      read_field(d, "label_noise", c.colored.label_noise);
      read_field(d, "pattern_dim", c.colored.pattern_dim);
      read_field(d, "n_per_env", c.colored.n_per_env);
      read_field(d, "pattern_scale", c.colored.pattern_scale);
      read_field(d, "pattern_noise", c.colored.pattern_noise);
      read_field(d, "color_intensity", c.colored.color_intensity);
      read_field(d, "pattern_seed", c.colored.pattern_seed);
      read_field(d, "seed", c.data_seed);
      read_field(d, "val_fraction", c.val_fraction);
    }
    if (j.contains("vae")) {
      const auto& v = j.at("vae");
      reject_unknown(v, "vae", {"lr", "batch_size", "epochs", "seed", "cap", "k", "hidden", "activation", "prior_init_scale",
                                "latent_dim"});
      read_field(v, "lr", c.vae.lr);
      read_field(v, "batch_size", c.vae.batch_size);
      read_field(v, "epochs", c.vae.epochs);
      read_field(v, "seed", c.vae.seed);
      read_field(v, "cap", c.vae.cap);
      read_field(v, "k", c.vae.k);
      read_field(v, "hidden", c.vae.hidden);
      read_field(v, "prior_init_scale", c.vae.prior_init_scale);
      if (v.contains("activation")) c.vae.activation = parse_activation(v.at("activation").get<std::string>());
      if (v.contains("latent_dim") && !v.at("latent_dim").is_null()) c.vae.latent_dim = v.at("latent_dim").get<std::size_t>();
    }
    if (j.contains("batch")) {
      const auto& b = j.at("batch");
      reject_unknown(b, "batch", {"B", "a", "metric"});
      read_field(b, "B", c.B);
      read_field(b, "a", c.a);
      if (b.contains("metric")) c.metric = parse_metric(b.at("metric").get<std::string>());
    }
    if (j.contains("classifier")) {
      const auto& t = j.at("classifier");
      reject_unknown(t, "classifier", {"lr", "steps", "beta", "seed", "eval_every", "hidden", "activation", "select_best"});
      read_field(t, "lr", c.clf.lr);
      read_field(t, "steps", c.clf.steps);
      read_field(t, "beta", c.clf.beta);
      read_field(t, "seed", c.clf.seed);
      read_field(t, "eval_every", c.clf.eval_every);
      read_field(t, "hidden", c.clf.hidden);
      read_field(t, "select_best", c.clf.select_best);
      if (t.contains("activation")) c.clf.activation = parse_activation(t.at("activation").get<std::string>());
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, "eval", {"flips", "seed"});
      read_field(e, "flips", c.eval_flips);
      read_field(e, "seed", c.eval_seed);
    }
    if (j.contains("verify")) {
      const auto& v = j.at("verify");
      reject_unknown(v, "verify", {"seed", "theorem4_anchors", "theorem4_tolerance", "finer_instances", "ident_per_env",
                                   "ident_test", "ident_epochs", "ident_hidden", "ident_threshold"});
      read_field(v, "seed", c.verify.seed);
      read_field(v, "theorem4_anchors", c.verify.theorem4_anchors);
      read_field(v, "theorem4_tolerance", c.verify.theorem4_tolerance);
      read_field(v, "finer_instances", c.verify.finer_instances);
      read_field(v, "ident_per_env", c.verify.ident_per_env);
      read_field(v, "ident_test", c.verify.ident_test);
      read_field(v, "ident_epochs", c.verify.ident_epochs);
      read_field(v, "ident_hidden", c.verify.ident_hidden);
      read_field(v, "ident_threshold", c.verify.ident_threshold);
    }
    if (j.contains("ablate")) {
      const auto& a = j.at("ablate");
      reject_unknown(a, "ablate", {"betas", "a_classes", "as", "flips"});
      read_field(a, "betas", c.ablate.betas);
      read_field(a, "a_classes", c.ablate.a_classes);
      read_field(a, "as", c.ablate.as);
      read_field(a, "flips", c.ablate.flips);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("config: ") + e.what());
  }
  c.clf.val_fraction = c.val_fraction;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DomainError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Hashes and sidecars

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

enum class Stage { gen, vae, match, train, eval };

/// Hash of exactly the config sections a stage's outputs depend on. Object
/// keys are serialized sorted, so the dump is canonical.
inline std::string stage_hash(const RunConfig& c, Stage stage, SamplerKind sampler = SamplerKind::random) {
  nlohmann::json j = {{"data", data_json(c)}};
  const bool needs_vae = stage == Stage::vae || stage == Stage::match || stage == Stage::eval ||
                         (stage == Stage::train && sampler == SamplerKind::balanced);
  if (needs_vae) j["vae"] = vae_json(c);
  if (stage == Stage::match || stage == Stage::train || stage == Stage::eval) j["batch"] = batch_json(c);
  if (stage == Stage::train || stage == Stage::eval) j["classifier"] = classifier_json(c);
  if (stage == Stage::train) j["sampler"] = to_string(sampler);
  if (stage == Stage::eval) j["eval"] = {{"flips", c.eval_flips}, {"seed", c.eval_seed}};
  return fnv1a_hex(j.dump());
}

inline std::string meta_path(const std::string& artifact) { return artifact + ".meta.json"; }

inline void write_meta(const std::string& artifact, const std::string& command, const std::string& hash) {
  std::ofstream out(meta_path(artifact), std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, 0, "cannot create " + meta_path(artifact));
  out << nlohmann::json{{"command", command}, {"config_hash", hash}}.dump(2) << '\n';
}

/// Throws MissingArtifactError naming `command` unless `artifact` exists and,
/// without `force`, carries `hash`.
inline void require_artifact(const std::string& artifact, const std::string& command, const std::string& hash,
                             bool force) {
  namespace fs = std::filesystem;
  if (!fs::exists(artifact))
    throw MissingArtifactError("missing " + artifact + "; run `cbal " + command + "` first");
  if (force) return;
  std::ifstream in(meta_path(artifact));
  std::string found;
  if (in) {
    try {
      found = nlohmann::json::parse(in).value("config_hash", "");
    } catch (const nlohmann::json::exception&) {
    }
  }
  if (found != hash)
    throw MissingArtifactError(artifact + " was built from a different config (hash " + (found.empty() ? "?" : found) +
                               ", expected " + hash + "); rerun `cbal " + command + "` or pass --force");
}

// ---------------------------------------------------------------------------
// Commands

struct Paths {
  std::string dir;
  explicit Paths(std::string d) : dir(std::move(d)) {}
  std::string operator()(const std::string& name) const { return (std::filesystem::path(dir) / name).string(); }
};

inline std::string classifier_file(SamplerKind s) { return "clf_" + to_string(s) + ".cbcl"; }

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, 0, "cannot create " + path);
  return out;
}

inline double latent_label_agreement(const Dataset& ds, std::size_t column) {
  if (!ds.has_latents() || ds.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) hit += ds.latents[i][column] == ds.examples[i].y;
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

}  // namespace detail

struct GenSummary {
  std::size_t train = 0, val = 0, test = 0;
  std::vector<double> color_agreement;  // per generator env index
};

inline GenSummary cmd_gen(const RunConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);
  const Paths p(cfg.out_dir);
  const ColoredSpec spec = cfg.generator();
  const std::size_t T = cfg.train_flips.size();
  GenSummary sum;
  std::vector<Dataset> train_parts, test_parts;
  for (std::size_t e = 0; e < spec.flips.size(); ++e) {
    Dataset d = gen_colored(spec, static_cast<int>(e), cfg.data_seed);
    sum.color_agreement.push_back(detail::latent_label_agreement(d, kColorLatent));
    (e < T ? train_parts : test_parts).push_back(std::move(d));
  }
  auto [train, val] = split_train_val(concat(train_parts), cfg.val_fraction, cfg.data_seed);
  const Dataset test = test_parts.empty() ? Dataset{} : concat(test_parts);
  const std::string h = stage_hash(cfg, Stage::gen);
  write_dataset(p("train.cbds"), train);
  write_meta(p("train.cbds"), "gen", h);
  write_dataset(p("val.cbds"), val);
  write_meta(p("val.cbds"), "gen", h);
  if (!test_parts.empty()) {
    write_dataset(p("test.cbds"), test);
    write_meta(p("test.cbds"), "gen", h);
  }
  sum.train = train.size();
  sum.val = val.size();
  sum.test = test.size();
  return sum;
}

inline VaeTrainResult cmd_train_vae(const RunConfig& cfg, bool force = false) {
  cfg.validate();
  const Paths p(cfg.out_dir);
  require_artifact(p("train.cbds"), "gen", stage_hash(cfg, Stage::gen), force);
  const Dataset train = read_dataset(p("train.cbds"));
  VaeTrainResult r = train_vae(train, cfg.vae);
  const std::string h = stage_hash(cfg, Stage::vae);
  save_model(p("vae.cbva"), r.model);
  write_meta(p("vae.cbva"), "train-vae", h);
  auto out = detail::open_csv(p("vae_curve.csv"));
  out << "epoch,elbo,recon,kl,config_hash\n";
  for (const auto& pt : r.curve)
    out << pt.epoch << ',' << detail::fmt(pt.elbo) << ',' << detail::fmt(pt.recon) << ',' << detail::fmt(pt.kl) << ','
        << h << '\n';
  return r;
}

struct MatchStats {
  std::vector<std::pair<double, double>> quantiles;  // (q, distance)
  double mean_distance = 0.0;
  std::size_t distinct_matches = 0;
  std::size_t max_match_frequency = 0;
  double latent_agreement = -1.0;  // matched pairs sharing the color latent; -1 without latents
};

inline MatchStats match_stats(const Dataset& ds, const MatchIndex& mi) {
  MatchStats s;
  std::vector<double> d = mi.distance;
  std::sort(d.begin(), d.end());
  for (double q : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0}) {
    const double v = d.empty() ? 0.0 : d[static_cast<std::size_t>(std::llround(q * static_cast<double>(d.size() - 1)))];
    s.quantiles.emplace_back(q, v);
  }
  for (double v : d) s.mean_distance += v / static_cast<double>(d.size());
  std::vector<std::size_t> freq(ds.size(), 0);
  for (std::uint32_t j : mi.index) ++freq[j];
  for (std::size_t f : freq) {
    s.distinct_matches += f > 0;
    s.max_match_frequency = std::max(s.max_match_frequency, f);
  }
  if (ds.has_latents()) {
    std::size_t same = 0;
    for (std::size_t i = 0; i < mi.index.size(); ++i)
      same += ds.latents[i / mi.slots()][kColorLatent] == ds.latents[mi.index[i]][kColorLatent];
    s.latent_agreement = mi.index.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(mi.index.size());
  }
  return s;
}

inline MatchStats cmd_match(const RunConfig& cfg, bool force = false) {
  cfg.validate();
  const Paths p(cfg.out_dir);
  require_artifact(p("train.cbds"), "gen", stage_hash(cfg, Stage::gen), force);
  require_artifact(p("vae.cbva"), "train-vae", stage_hash(cfg, Stage::vae), force);
  const Dataset train = read_dataset(p("train.cbds"));
  const CoVae model = load_model(p("vae.cbva"));
  MatchIndex mi;
  if (cfg.metric == Metric::gauss_kl) {
    mi = precompute_matches(train, posteriors(model, train));
  } else {
    const auto marg = label_marginals(train, model.n_envs);
    mi = precompute_matches(train, compute_scores(train, model, marg), cfg.metric);
  }
  const std::string h = stage_hash(cfg, Stage::match);
  write_match_index(p("matches.cbmi"), mi);
  write_meta(p("matches.cbmi"), "match", h);
  const MatchStats s = match_stats(train, mi);
  auto out = detail::open_csv(p("match_stats.csv"));
  out << "stat,value,config_hash\n";
  for (const auto& [q, v] : s.quantiles) out << "distance_q" << detail::fmt(q) << ',' << detail::fmt(v) << ',' << h << '\n';
  out << "distance_mean," << detail::fmt(s.mean_distance) << ',' << h << '\n';
  out << "distinct_matches," << s.distinct_matches << ',' << h << '\n';
  out << "max_match_frequency," << s.max_match_frequency << ',' << h << '\n';
  if (s.latent_agreement >= 0.0) out << "color_agreement," << detail::fmt(s.latent_agreement) << ',' << h << '\n';
  return s;
}

inline TrainResult cmd_train(const RunConfig& cfg, SamplerKind sampler, bool force = false) {
  cfg.validate();
  const Paths p(cfg.out_dir);
  const std::string gh = stage_hash(cfg, Stage::gen);
  require_artifact(p("train.cbds"), "gen", gh, force);
  require_artifact(p("val.cbds"), "gen", gh, force);
  const Dataset train = read_dataset(p("train.cbds"));
  const Dataset val = read_dataset(p("val.cbds"));
  std::optional<MatchIndex> mi;
  if (sampler == SamplerKind::balanced) {
    require_artifact(p("matches.cbmi"), "match", stage_hash(cfg, Stage::match), force);
    mi = read_match_index(p("matches.cbmi"));
    if (mi->n_examples != train.size()) throw MissingArtifactError("matches.cbmi does not index train.cbds; rerun `cbal match`");
  }
  if (sampler == SamplerKind::oracle_balanced && !train.has_latents())
    throw MissingArtifactError("missing " + latents_path(p("train.cbds")) + "; run `cbal gen` first");
  TrainResult r = train_classifier(train, val, cfg.train_config(sampler), mi ? &*mi : nullptr);
  const std::string h = stage_hash(cfg, Stage::train, sampler);
  const std::string file = p(classifier_file(sampler));
  save_classifier(file, r.clf);
  write_meta(file, "train --sampler " + to_string(sampler), h);
  write_train_log(p("train_log_" + to_string(sampler) + ".csv"), r.log, h);
  return r;
}

struct EvalTable {
  std::vector<double> flips;
  std::vector<SamplerKind> samplers;
  std::vector<std::vector<double>> accuracy;  // [flip][sampler]
};

/// Accuracy of every trained classifier on fresh slices per flip value.
inline EvalTable cmd_eval(const RunConfig& cfg, const std::vector<double>& flips, bool force = false) {
  cfg.validate();
  const Paths p(cfg.out_dir);
  EvalTable t;
  t.flips = flips;
  std::vector<Classifier> clfs;
  for (SamplerKind s : {SamplerKind::random, SamplerKind::balanced, SamplerKind::oracle_balanced}) {
    const std::string file = p(classifier_file(s));
    if (!std::filesystem::exists(file)) continue;
    require_artifact(file, "train --sampler " + to_string(s), stage_hash(cfg, Stage::train, s), force);
    t.samplers.push_back(s);
    clfs.push_back(load_classifier(file));
  }
  if (clfs.empty()) throw MissingArtifactError("no classifier in " + cfg.out_dir + "; run `cbal train` first");
  t.accuracy.assign(flips.size(), std::vector<double>(clfs.size()));
  for (std::size_t c = 0; c < clfs.size(); ++c) {
    const auto sweep = env_sweep(clfs[c], cfg.generator(), flips, cfg.eval_seed);
    for (std::size_t f = 0; f < flips.size(); ++f) t.accuracy[f][c] = sweep[f].result.accuracy;
  }
  const std::string h = stage_hash(cfg, Stage::eval);
  auto out = detail::open_csv(p("eval.csv"));
  out << "flip";
  for (SamplerKind s : t.samplers) out << ',' << to_string(s);
  out << ",config_hash\n";
  for (std::size_t f = 0; f < flips.size(); ++f) {
    out << detail::fmt(flips[f]);
    for (double a : t.accuracy[f]) out << ',' << detail::fmt(a);
    out << ',' << h << '\n';
  }
  return t;
}

// ---------------------------------------------------------------------------
// Verification

struct VerifyResult {
  bool passed = false;
  nlohmann::json report;
};

/// Fits a conditional VAE on a random Gaussian SCM with an invertible
/// contrast matrix and scores held-out posterior means against the true z.
inline VerifyResult verify_identifiability(const VerifyConfig& v) {
  const auto spec = make_gaussian_scm_spec(2, 10, 3, 3, 2, v.seed + 1);
  std::vector<Dataset> tr, te;
  for (int e = 0; e < 3; ++e) {
    tr.push_back(gen_gaussian_scm(spec, e, v.ident_per_env, v.seed + 2));
    const std::size_t share = v.ident_test / 3 + (static_cast<std::size_t>(e) < v.ident_test % 3 ? 1 : 0);
    te.push_back(gen_gaussian_scm(spec, e, share, v.seed + 3));
  }
  const Dataset train = concat(tr), test = concat(te);
  VaeTrainConfig c;
  c.k = 2;
  c.latent_dim = spec.n;
  c.epochs = v.ident_epochs;
  c.hidden = v.ident_hidden;
  c.seed = v.seed + 1;
  const CoVae model = train_vae(train, c).model;
  Matrix truth(test.size(), spec.n);
  for (std::size_t i = 0; i < test.size(); ++i)
    std::copy(test.latents[i].begin(), test.latents[i].end(), truth.row(i).begin());
  const AffineFit fit = identifiability_score(truth, posterior_means(model, test));
  VerifyResult r;
  r.passed = fit.mean_abs_corr >= v.ident_threshold;
  r.report = to_json(fit, v.ident_threshold);
  r.report["held_out"] = test.size();
  r.report["contrast_condition_number"] = condition_number(lambda_contrast_matrix(spec));
  return r;
}

/// theorem: "1" (minimax), "3" (finer-than), "4" (semi-balanced), "ident".
inline VerifyResult run_verification(const std::string& theorem, const VerifyConfig& v) {
  VerifyResult r;
  if (theorem == "1") {
    const EnvGrid grid = default_minimax_grid();
    const MinimaxReport rep = verify_minimax(default_minimax_skeleton(), grid);
    r.passed = rep.passed;
    r.report = to_json(rep, grid);
  } else if (theorem == "3") {
    const FinerSweepReport rep = finer_sweep(v.finer_instances, v.seed);
    r.passed = rep.disagreements == 0;
    r.report = to_json(rep);
  } else if (theorem == "4") {
    r.passed = true;
    r.report = {{"assertion", "matched-group label distribution equals the semi-balanced closed form"}};
    nlohmann::json cases = nlohmann::json::array();
    double worst = 0.0;
    for (std::size_t m : {2, 4, 10}) {
      const DiscreteScm scm = default_theorem4_scm(m);
      for (std::size_t a = 1; a < m; ++a) {
        const Theorem4Report rep = verify_theorem4(scm, 0, a, v.theorem4_anchors, v.seed + 10 * m + a);
        worst = std::max(worst, rep.max_tv);
        r.passed = r.passed && rep.max_tv <= v.theorem4_tolerance;
        cases.push_back(to_json(rep, v.theorem4_tolerance));
      }
    }
    r.report["passed"] = r.passed;
    r.report["max_tv"] = worst;
    r.report["tolerance"] = v.theorem4_tolerance;
    r.report["cases"] = std::move(cases);
  } else if (theorem == "ident") {
    r = verify_identifiability(v);
  } else {
    throw DomainError("unknown theorem '" + theorem + "' (expected 1, 3, 4 or ident)");
  }
  return r;
}

inline VerifyResult cmd_verify(const RunConfig& cfg, const std::string& theorem) {
  VerifyResult r = run_verification(theorem, cfg.verify);
  std::filesystem::create_directories(cfg.out_dir);
  const std::string path = Paths(cfg.out_dir)("verify_" + theorem + ".json");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, 0, "cannot create " + path);
  out << r.report.dump(2) << '\n';
  return r;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblateRow {
  double value = 0.0;                // beta, a or flip
  std::vector<double> accuracy;      // one per column
  std::string config_hash;
};

struct AblateTable {
  std::string sweep;
  std::vector<std::string> columns;
  std::vector<AblateRow> rows;
};

namespace detail {

struct SplitData {
  Dataset train, val, test;
};

inline SplitData make_split(const RunConfig& cfg) {
  const ColoredSpec spec = cfg.generator();
  const std::size_t T = cfg.train_flips.size();
  std::vector<Dataset> tr, te;
  for (std::size_t e = 0; e < spec.flips.size(); ++e)
    (e < T ? tr : te).push_back(gen_colored(spec, static_cast<int>(e), cfg.data_seed));
  if (te.empty()) throw DomainError("ablate: config has no test environment");
  SplitData s;
  std::tie(s.train, s.val) = split_train_val(concat(tr), cfg.val_fraction, cfg.data_seed);
  s.test = concat(te);
  return s;
}

inline SplitData load_split(const RunConfig& cfg, bool force) {
  const Paths p(cfg.out_dir);
  const std::string gh = stage_hash(cfg, Stage::gen);
  for (const char* f : {"train.cbds", "val.cbds", "test.cbds"}) require_artifact(p(f), "gen", gh, force);
  return {read_dataset(p("train.cbds")), read_dataset(p("val.cbds")), read_dataset(p("test.cbds"))};
}

}  // namespace detail

/// sweep: "beta" and "a" use the oracle-matched sampler; "testenv" compares
/// the random and oracle-matched samplers across flip values. The beta and
/// testenv sweeps read the gen artifacts; the a sweep generates its own data
/// with `ablate.a_classes` classes. Sweep points run on up to CB_THREADS
/// workers; each point is seeded from the config alone.
inline AblateTable cmd_ablate(const RunConfig& cfg, const std::string& sweep, bool force = false) {
  cfg.validate();
  AblateTable t;
  t.sweep = sweep;
  if (sweep == "beta") {
    const detail::SplitData d = detail::load_split(cfg, force);
    t.columns = {"accuracy"};
    t.rows.resize(cfg.ablate.betas.size());
    parallel_ranges(t.rows.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        RunConfig pc = cfg;
        pc.clf.beta = cfg.ablate.betas[i];
        const auto r = train_classifier(d.train, d.val, pc.train_config(SamplerKind::oracle_balanced));
        t.rows[i] = {pc.clf.beta, {evaluate(r.clf, d.test).accuracy},
                     stage_hash(pc, Stage::train, SamplerKind::oracle_balanced)};
      }
    });
  } else if (sweep == "a") {
    RunConfig base = cfg;
    base.colored.m = static_cast<int>(cfg.ablate.a_classes);
    const detail::SplitData d = detail::make_split(base);
    t.columns = {"accuracy"};
    t.rows.resize(cfg.ablate.as.size());
    parallel_ranges(t.rows.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        RunConfig pc = base;
        pc.a = cfg.ablate.as[i];
        const auto r = train_classifier(d.train, d.val, pc.train_config(SamplerKind::oracle_balanced));
        t.rows[i] = {static_cast<double>(pc.a), {evaluate(r.clf, d.test).accuracy},
                     stage_hash(pc, Stage::train, SamplerKind::oracle_balanced)};
      }
    });
  } else if (sweep == "testenv") {
    const detail::SplitData d = detail::load_split(cfg, force);
    const std::vector<SamplerKind> kinds = {SamplerKind::random, SamplerKind::oracle_balanced};
    for (SamplerKind s : kinds) t.columns.push_back(to_string(s));
    std::vector<Classifier> clfs(kinds.size());
    parallel_ranges(kinds.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) clfs[i] = train_classifier(d.train, d.val, cfg.train_config(kinds[i])).clf;
    });
    const std::string h = stage_hash(cfg, Stage::eval);
    for (double f : cfg.ablate.flips) t.rows.push_back({f, {}, h});
    for (const Classifier& c : clfs) {
      const auto sw = env_sweep(c, cfg.generator(), cfg.ablate.flips, cfg.eval_seed);
      for (std::size_t i = 0; i < sw.size(); ++i) t.rows[i].accuracy.push_back(sw[i].result.accuracy);
    }
  } else {
    throw DomainError("unknown sweep '" + sweep + "' (expected beta, a or testenv)");
  }

  std::filesystem::create_directories(cfg.out_dir);
  auto out = detail::open_csv(Paths(cfg.out_dir)("ablate_" + sweep + ".csv"));
  out << (sweep == "testenv" ? "flip" : sweep);
  for (const auto& c : t.columns) out << ',' << c;
  out << ",config_hash\n";
  for (const auto& r : t.rows) {
    out << detail::fmt(r.value);
    for (double a : r.accuracy) out << ',' << detail::fmt(a);
    out << ',' << r.config_hash << '\n';
  }
  return t;
}

}  // namespace cbal
