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

// Cross-entropy classifier training with random, matched, or oracle-matched
// mini-batches, and per-environment evaluation.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbal/balance.hpp"
#include "cbal/binary_io.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/numkit.hpp"
#include "cbal/rng.hpp"
#include "cbal/scmgen.hpp"

namespace cbal {

struct Classifier {
  Mlp net;
  int m = 0;

  friend bool operator==(const Classifier&, const Classifier&) = default;
};

enum class SamplerKind : std::uint32_t { random = 0, balanced = 1, oracle_balanced = 2 };

inline std::string to_string(SamplerKind s) {
  switch (s) {
    case SamplerKind::random: return "random";
    case SamplerKind::balanced: return "balanced";
    case SamplerKind::oracle_balanced: return "oracle";
  }
  return "?";
}

inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "random") return SamplerKind::random;
  if (s == "balanced") return SamplerKind::balanced;
  if (s == "oracle" || s == "oracle_balanced") return SamplerKind::oracle_balanced;
  throw DomainError("unknown sampler '" + s + "' (expected random, balanced, oracle)");
}

struct TrainConfig {
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t B = 64;  // anchors per environment
  std::size_t a = 1;   // alternates per anchor; random batches use the same B * (a + 1) size
  SamplerKind sampler = SamplerKind::random;
  double beta = 1.0;   // fraction of anchor groups that are matched
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  std::size_t eval_every = 100;
  std::vector<std::size_t> hidden = {64, 64};
  Activation activation = Activation::relu;
  bool select_best = true;  // keep the best train-domain validation checkpoint
  std::size_t oracle_column = kColorLatent;

  void validate() const {
    if (!(lr > 0.0) || steps == 0 || B == 0 || a == 0 || eval_every == 0)
      throw DomainError("TrainConfig: lr, steps, B, a and eval_every must be positive");
    if (beta < 0.0 || beta > 1.0) throw DomainError("TrainConfig: beta outside [0,1]");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw DomainError("TrainConfig: val_fraction outside [0,1)");
  }
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::string split;  // "train" or "val"
  int env = -1;       // -1 = all environments
  double accuracy = 0.0;
};

struct TrainResult {
  Classifier clf;
  std::vector<TrainLogRow> log;
  std::size_t best_step = 0;
  double best_val_accuracy = 0.0;
};

struct EvalResult {
  double accuracy = 0.0;
  double cross_entropy = 0.0;
  std::size_t count = 0;
};

/// Per-environment random split; returns (train, validation).
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  Rng rng(seed, streams::classifier);
  std::vector<std::size_t> tr, va;
  for (int env : ds.env_ids()) {
    auto idx = ds.indices_of_env(env);
    Rng r = rng.split(static_cast<std::uint64_t>(env));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[r.uniform_index(i)]);
    const auto nv = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(idx.size())));
    std::vector<std::size_t> v(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
    std::vector<std::size_t> t(idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
    std::sort(v.begin(), v.end());
    std::sort(t.begin(), t.end());
    va.insert(va.end(), v.begin(), v.end());
    tr.insert(tr.end(), t.begin(), t.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {subset(ds, tr), subset(ds, va)};
}

inline EvalResult evaluate(const Classifier& clf, const Dataset& ds) {
  if (ds.size() == 0) throw DomainError("evaluate: empty dataset");
  if (ds.m != clf.m) throw DimensionError("evaluate: class count differs from the classifier");
  EvalResult r;
  r.count = ds.size();
  const std::size_t chunk = 4096;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    idx.clear();
    for (std::size_t i = s; i < std::min(ds.size(), s + chunk); ++i) idx.push_back(i);
    const Matrix logits = mlp_predict(clf.net, ds.features(idx));
    for (std::size_t r_ = 0; r_ < idx.size(); ++r_) {
      const auto row = logits.row(r_);
      const int y = ds.examples[idx[r_]].y;
      const double lse = log_sum_exp(row);
      r.cross_entropy -= row[static_cast<std::size_t>(y)] - lse;
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == y) r.accuracy += 1.0;
    }
  }
  r.accuracy /= static_cast<double>(ds.size());
  r.cross_entropy /= static_cast<double>(ds.size());
  return r;
}

/// Oracle matching: alternates are drawn uniformly among the examples of the
/// same environment that share the anchor's ground-truth latent category and
/// carry the alternate label. Every such candidate is at distance zero, so a
/// uniform draw replaces the lowest-index tie rule.
class OracleSampler {
 public:
  OracleSampler(const Dataset& ds, std::size_t column, std::size_t a) : ds_(&ds), a_(a) {
    if (!ds.has_latents() || column >= ds.latent_dim)
      throw LookupError("oracle sampler needs the ground-truth latent sidecar (column " + std::to_string(column) + ")");
    if (a < 1 || a + 1 > static_cast<std::size_t>(ds.m)) throw DomainError("oracle sampler: a outside [1, m-1]");
    for (int env : ds.env_ids()) envs_.push_back(ds.indices_of_env(env));
    cat_.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      cat_[i] = static_cast<int>(ds.latents[i][column]);
      strata_[{ds.examples[i].env, ds.examples[i].y, cat_[i]}].push_back(i);
    }
  }

  void add_group(std::size_t e, Rng& rng, Batch& out) const {
    const auto& pool = envs_[e];
    const std::size_t anchor = pool[rng.uniform_index(pool.size())];
    const Example& ex = ds_->examples[anchor];
    const std::size_t g = out.examples.empty() ? 0 : out.group.back() + 1;
    out.examples.push_back(anchor);
    out.group.push_back(g);
    out.anchor.push_back(true);
    for (int alt : sample_alternates(ex.y, a_, static_cast<std::size_t>(ds_->m), rng)) {
      const auto it = strata_.find({ex.env, alt, cat_[anchor]});
      if (it == strata_.end())
        throw DomainError("oracle sampler: no example with label " + std::to_string(alt) + " and latent category " +
                          std::to_string(cat_[anchor]) + " in env " + std::to_string(ex.env));
      out.examples.push_back(it->second[rng.uniform_index(it->second.size())]);
      out.group.push_back(g);
      out.anchor.push_back(false);
    }
  }

 private:
  const Dataset* ds_;
  std::size_t a_;
  std::vector<std::vector<std::size_t>> envs_;
  std::vector<int> cat_;
  std::map<std::tuple<int, int, int>, std::vector<std::size_t>> strata_;
};

namespace detail {

inline void softmax_xent(const Matrix& logits, std::span<const int> y, double& loss, Matrix& grad) {
  const std::size_t N = logits.rows();
  grad = Matrix(N, logits.cols());
  loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const auto p = softmax(logits.row(i));
    loss -= std::log(std::max(p[static_cast<std::size_t>(y[i])], 1e-300));
    for (std::size_t c = 0; c < p.size(); ++c)
      grad(i, c) = (p[c] - (static_cast<int>(c) == y[i] ? 1.0 : 0.0)) / static_cast<double>(N);
  }
  loss /= static_cast<double>(N);
}

}  // namespace detail

/// Trains an MLP classifier on `train`; `val` (may be empty) drives
/// checkpoint selection. `mi` is required for the balanced sampler.
inline TrainResult train_classifier(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                                    const MatchIndex* mi = nullptr) {
  cfg.validate();
  train.validate(true);
  const auto m = static_cast<std::size_t>(train.m);
  const std::vector<int> envs = train.env_ids();
  std::vector<std::vector<std::size_t>> pools;
  for (int e : envs) pools.push_back(train.indices_of_env(e));

  std::optional<BalancedSampler> matched;
  std::optional<OracleSampler> oracle;
  const bool mixing = cfg.sampler != SamplerKind::random && cfg.beta > 0.0;
  if (cfg.sampler == SamplerKind::balanced && mixing) {
    if (mi == nullptr) throw DomainError("balanced sampler requires a match index (run the match stage first)");
    matched.emplace(train, *mi, BatchSpec{cfg.B, cfg.a, mi->metric, cfg.seed});
  } else if (cfg.sampler == SamplerKind::oracle_balanced && mixing) {
    oracle.emplace(train, cfg.oracle_column, cfg.a);
  } else if (cfg.a + 1 > m) {
    throw DomainError("TrainConfig: a must be at most m-1");
  }
  const auto matched_groups = static_cast<std::size_t>(std::llround(cfg.beta * static_cast<double>(cfg.B)));

  Rng root(cfg.seed, streams::classifier);
  Rng init = root.split(1), draw = root.split(2);
  std::vector<std::size_t> sizes{train.dim};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(m);

  TrainResult res;
  res.clf.m = train.m;
  res.clf.net = Mlp::create(sizes, cfg.activation, init);
  Classifier best = res.clf;
  double best_acc = -1.0;
  std::size_t best_step = 0;

  std::vector<Dataset> val_envs;
  std::vector<int> val_ids;
  if (val.size() > 0)
    for (int e : val.env_ids()) {
      val_envs.push_back(subset(val, val.indices_of_env(e)));
      val_ids.push_back(e);
    }

  AdamState adam;
  adam.lr = cfg.lr;
  Batch batch;
  std::vector<int> ys;
  Matrix grad;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    batch = Batch{};
    for (std::size_t e = 0; e < pools.size(); ++e) {
      std::size_t groups = 0;
      if (matched || oracle) {
        groups = matched_groups;
        for (std::size_t g = 0; g < groups; ++g) matched ? matched->add_group(e, draw, batch) : oracle->add_group(e, draw, batch);
      }
      const std::size_t rest = (cfg.B - groups) * (cfg.a + 1);
      for (std::size_t i = 0; i < rest; ++i) {
        batch.examples.push_back(pools[e][draw.uniform_index(pools[e].size())]);
        batch.group.push_back(batch.group.empty() ? 0 : batch.group.back() + 1);
        batch.anchor.push_back(true);
      }
    }
    ys.resize(batch.examples.size());
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = train.examples[batch.examples[i]].y;

    const MlpTrace trace = mlp_forward(res.clf.net, train.features(batch.examples));
    double loss = 0.0;
    detail::softmax_xent(trace.output(), ys, loss, grad);
    if (!std::isfinite(loss)) throw NumericalError("train_classifier: non-finite loss at step " + std::to_string(step));
    const MlpGrads g = mlp_backward(res.clf.net, trace, grad);
    ParamViews pv;
    GradViews gv;
    append_params(res.clf.net, pv);
    append_grads(g, gv);
    adam_step(pv, gv, adam);
    res.log.push_back({step, loss, "train", -1, 0.0});

    if (!val_envs.empty() && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      double mean_acc = 0.0;
      for (std::size_t e = 0; e < val_envs.size(); ++e) {
        const EvalResult er = evaluate(res.clf, val_envs[e]);
        res.log.push_back({step, er.cross_entropy, "val", val_ids[e], er.accuracy});
        mean_acc += er.accuracy / static_cast<double>(val_envs.size());
      }
      res.log.push_back({step, 0.0, "val", -1, mean_acc});
      if (mean_acc > best_acc) {
        best_acc = mean_acc;
        best_step = step;
        best = res.clf;
      }
    }
  }
  if (cfg.select_best && best_acc >= 0.0) {
    res.clf = best;
    res.best_step = best_step;
  } else {
    res.best_step = cfg.steps;
  }
  res.best_val_accuracy = std::max(best_acc, 0.0);
  return res;
}

/// Accuracy on freshly generated colored slices, one per flip probability.
struct SweepPoint {
  double flip = 0.0;
  EvalResult result;
};

inline std::vector<SweepPoint> env_sweep(const Classifier& clf, const ColoredSpec& spec, const std::vector<double>& flips,
                                         std::uint64_t seed) {
  std::vector<SweepPoint> out;
  for (std::size_t i = 0; i < flips.size(); ++i) {
    ColoredSpec s = spec;
    s.flips = {flips[i]};
    const Dataset ds = gen_colored(s, 0, Rng(seed, streams::evaluation).split(i).next_u64());
    out.push_back({flips[i], evaluate(clf, ds)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log, const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatErrorKind::io, 0, "cannot create " + path);
  out << "step,loss,split,env,accuracy,config_hash\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%s,%d,%.6f,", r.step, r.loss, r.split.c_str(), r.env, r.accuracy);
    out << buf << config_hash << '\n';
  }
}

inline constexpr std::uint32_t kClassifierVersion = 1;

inline io::Bytes encode_classifier(const Classifier& c) {
  io::ByteWriter w;
  w.magic("CBCL");
  w.u32(kClassifierVersion);
  w.u32(static_cast<std::uint32_t>(c.m));
  write_mlp(w, c.net);
  write_mlp_weights(w, c.net);
  return w.take();
}

inline Classifier decode_classifier(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("CBCL");
  r.expect_version(kClassifierVersion);
  Classifier c;
  const std::uint64_t at = r.offset();
  c.m = static_cast<int>(r.u32("m"));
  c.net = read_mlp_header(r);
  if (c.m < 2 || c.net.output_size() != static_cast<std::size_t>(c.m))
    throw FormatError(FormatErrorKind::invalid_content, at, "classifier output size differs from m");
  read_mlp_weights(r, c.net);
  r.expect_end();
  return c;
}

inline void save_classifier(const std::string& path, const Classifier& c) { io::write_file(path, encode_classifier(c)); }
inline Classifier load_classifier(const std::string& path) { return decode_classifier(io::read_file(path)); }

}  // namespace cbal
