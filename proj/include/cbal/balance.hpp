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

// Propensity scores from the learned prior, score distances, exhaustive
// offline matching, and the balanced mini-batch sampler.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "cbal/binary_io.hpp"
#include "cbal/covae.hpp"
#include "cbal/dataset.hpp"
#include "cbal/error.hpp"
#include "cbal/expfam.hpp"
#include "cbal/numkit.hpp"
#include "cbal/rng.hpp"

namespace cbal {

/// Worker count from CB_THREADS, defaulting to the hardware concurrency.
inline std::size_t worker_count() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return std::min<std::size_t>(static_cast<std::size_t>(v), hw);
  }
  return hw;
}

/// Runs fn(begin, end) over [0, count) on up to worker_count() threads.
template <class Fn>
void parallel_ranges(std::size_t count, Fn fn) {
  const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(1, count / 256));
  if (workers <= 1) {
    fn(std::size_t{0}, count);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(count, b + chunk);
    if (b < e) pool.emplace_back([=, &fn] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Scores

struct BalancingScore {
  std::vector<double> probs;

  friend bool operator==(const BalancingScore&, const BalancingScore&) = default;
};

/// s^e(z)_y = p^e(z | y) p^e(y) / sum_y' p^e(z | y') p^e(y').
inline BalancingScore propensity(std::span<const double> z, int env, const ExpFamilyPrior& prior,
                                 const std::vector<std::vector<double>>& marginals) {
  if (env < 0 || static_cast<std::size_t>(env) >= prior.n_envs() || static_cast<std::size_t>(env) >= marginals.size())
    throw LookupError("propensity: unknown env " + std::to_string(env));
  const auto& py = marginals[static_cast<std::size_t>(env)];
  if (py.size() != prior.m()) throw DimensionError("propensity: marginal length differs from class count");
  std::vector<double> logits(prior.m());
  for (std::size_t y = 0; y < prior.m(); ++y) {
    if (!(py[y] > 0.0)) throw DomainError("propensity: label marginal must be positive");
    logits[y] = log_prior(z, static_cast<int>(y), env, prior) + std::log(py[y]);
  }
  const double lse = log_sum_exp(logits);
  BalancingScore s;
  s.probs.resize(logits.size());
  for (std::size_t y = 0; y < logits.size(); ++y) s.probs[y] = std::exp(logits[y] - lse);
  return s;
}

/// Propensity at the posterior mean of the example under its own environment.
inline BalancingScore balancing_score_of(const Example& ex, const CoVae& model,
                                         const std::vector<std::vector<double>>& marginals) {
  const GaussianParams q = encode(model, ex.x, ex.y, ex.env);
  return propensity(q.mu, ex.env, model.prior, marginals);
}

inline std::vector<BalancingScore> compute_scores(const Dataset& ds, const CoVae& model,
                                                  const std::vector<std::vector<double>>& marginals) {
  const Matrix mu = posterior_means(model, ds);
  std::vector<BalancingScore> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out[i] = propensity(mu.row(i), ds.examples[i].env, model.prior, marginals);
  return out;
}

/// One-hot of an integer ground-truth latent column (e.g. the color index).
inline std::vector<BalancingScore> oracle_scores(const Dataset& ds, std::size_t column, std::size_t width) {
  if (!ds.has_latents() || column >= ds.latent_dim)
    throw LookupError("oracle scores need a latent sidecar with column " + std::to_string(column));
  std::vector<BalancingScore> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double c = ds.latents[i][column];
    if (c < 0.0 || c >= static_cast<double>(width) || c != std::floor(c))
      throw DomainError("oracle scores: latent value is not a category index");
    out[i].probs.assign(width, 0.0);
    out[i].probs[static_cast<std::size_t>(c)] = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distances

enum class Metric : std::uint32_t { l1 = 0, l2 = 1, linf = 2, skl = 3, gauss_kl = 4 };

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::l1: return "l1";
    case Metric::l2: return "l2";
    case Metric::linf: return "linf";
    case Metric::skl: return "skl";
    case Metric::gauss_kl: return "gauss_kl";
  }
  return "?";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "l1") return Metric::l1;
  if (s == "l2") return Metric::l2;
  if (s == "linf") return Metric::linf;
  if (s == "skl" || s == "kld") return Metric::skl;
  if (s == "gauss_kl") return Metric::gauss_kl;
  throw DomainError("unknown metric '" + s + "' (expected l1, l2, linf, skl, gauss_kl)");
}

inline constexpr double kProbFloor = 1e-12;

inline double score_distance(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (a.size() != b.size()) throw DimensionError("score_distance: length mismatch");
  double acc = 0.0;
  switch (metric) {
    case Metric::l1:
      for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
      return acc;
    case Metric::l2:
      for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
      return std::sqrt(acc);
    case Metric::linf:
      for (std::size_t i = 0; i < a.size(); ++i) acc = std::max(acc, std::abs(a[i] - b[i]));
      return acc;
    case Metric::skl:
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double p = std::max(a[i], kProbFloor), q = std::max(b[i], kProbFloor);
        acc += (p - q) * (std::log(p) - std::log(q));
      }
      return 0.5 * acc;
    case Metric::gauss_kl:
      break;
  }
  throw DomainError("score_distance: gauss_kl compares posteriors, not score vectors");
}

inline double score_distance(const BalancingScore& a, const BalancingScore& b, Metric metric) {
  return score_distance(a.probs, b.probs, metric);
}

/// Symmetrized KL between two diagonal Gaussians.
inline double gaussian_distance(const GaussianParams& a, const GaussianParams& b) {
  return 0.5 * (kl_gaussian(a, b) + kl_gaussian(b, a));
}

// ---------------------------------------------------------------------------
// Match index

/// For every example and every label other than its own: the nearest example
/// of that label in the same environment. Slot order per example follows the
/// alternate labels in increasing order.
struct MatchIndex {
  std::size_t n_examples = 0;
  std::size_t m = 0;
  Metric metric = Metric::skl;
  std::vector<std::uint32_t> index;
  std::vector<double> distance;

  std::size_t slots() const noexcept { return m - 1; }
  static std::size_t slot_of(int own, int alt) noexcept {
    return static_cast<std::size_t>(alt < own ? alt : alt - 1);
  }
  std::uint32_t match(std::size_t example, int own, int alt) const {
    return index.at(example * slots() + slot_of(own, alt));
  }
  double match_distance(std::size_t example, int own, int alt) const {
    return distance.at(example * slots() + slot_of(own, alt));
  }

  friend bool operator==(const MatchIndex&, const MatchIndex&) = default;
};

namespace detail {

using Groups = std::map<std::pair<int, int>, std::vector<std::size_t>>;

inline Groups group_by_env_label(const Dataset& ds) {
  Groups g;
  for (std::size_t i = 0; i < ds.size(); ++i) g[{ds.examples[i].env, ds.examples[i].y}].push_back(i);
  for (int env : ds.env_ids())
    for (int y = 0; y < ds.m; ++y)
      if (g.find({env, y}) == g.end())
        throw DomainError("matching: no examples with label " + std::to_string(y) + " in env " + std::to_string(env));
  return g;
}

template <class Dist>
MatchIndex match_with(const Dataset& ds, Metric metric, Dist dist) {
  if (ds.m < 2) throw DomainError("matching needs at least two classes");
  if (ds.size() > std::numeric_limits<std::uint32_t>::max()) throw DomainError("matching: too many examples");
  const Groups groups = group_by_env_label(ds);
  MatchIndex mi;
  mi.n_examples = ds.size();
  mi.m = static_cast<std::size_t>(ds.m);
  mi.metric = metric;
  mi.index.assign(ds.size() * mi.slots(), 0);
  mi.distance.assign(ds.size() * mi.slots(), 0.0);
  parallel_ranges(ds.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Example& ex = ds.examples[i];
      for (int alt = 0; alt < ds.m; ++alt) {
        if (alt == ex.y) continue;
        const auto& cand = groups.at({ex.env, alt});
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = cand.front();
        for (std::size_t j : cand) {  // ascending, strict < keeps the lowest index on ties
          const double d = dist(i, j);
          if (d < best) {
            best = d;
            arg = j;
          }
        }
        const std::size_t s = i * mi.slots() + MatchIndex::slot_of(ex.y, alt);
        mi.index[s] = static_cast<std::uint32_t>(arg);
        mi.distance[s] = best;
      }
    }
  });
  return mi;
}

}  // namespace detail

/// Exhaustive nearest match by score distance; ties go to the lowest index.
inline MatchIndex precompute_matches(const Dataset& ds, const std::vector<BalancingScore>& scores, Metric metric) {
  if (scores.size() != ds.size()) throw DimensionError("precompute_matches: one score per example required");
  if (metric == Metric::gauss_kl) throw DomainError("precompute_matches: gauss_kl needs posteriors");
  if (metric != Metric::skl)
    return detail::match_with(ds, metric, [&](std::size_t i, std::size_t j) {
      return score_distance(scores[i].probs, scores[j].probs, metric);
    });
  // Symmetrized KL with the logs computed once.
  std::vector<std::vector<double>> logs(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (double p : scores[i].probs) logs[i].push_back(std::log(std::max(p, kProbFloor)));
  return detail::match_with(ds, metric, [&](std::size_t i, std::size_t j) {
    const auto& a = scores[i].probs;
    const auto& b = scores[j].probs;
    double acc = 0.0;
    for (std::size_t y = 0; y < a.size(); ++y)
      acc += (std::max(a[y], kProbFloor) - std::max(b[y], kProbFloor)) * (logs[i][y] - logs[j][y]);
    return 0.5 * acc;
  });
}

/// Matching on posterior Gaussians with the symmetrized Gaussian KL.
inline MatchIndex precompute_matches(const Dataset& ds, const std::vector<GaussianParams>& post) {
  if (post.size() != ds.size()) throw DimensionError("precompute_matches: one posterior per example required");
  return detail::match_with(ds, Metric::gauss_kl,
                            [&](std::size_t i, std::size_t j) { return gaussian_distance(post[i], post[j]); });
}

// ---------------------------------------------------------------------------
// Balanced batches

struct BatchSpec {
  std::size_t B = 64;  // anchors per environment
  std::size_t a = 1;   // alternates per anchor
  Metric metric = Metric::skl;
  std::uint64_t seed = 0;
};

struct Batch {
  std::vector<std::size_t> examples;  // dataset indices
  std::vector<std::size_t> group;     // anchor group of each entry
  std::vector<bool> anchor;           // whether the entry is the group's anchor
};

/// Sample `a` distinct labels from {0..m-1} \ {own}, in draw order.
inline std::vector<int> sample_alternates(int own, std::size_t a, std::size_t m, Rng& rng) {
  if (a < 1 || a + 1 > m) throw DomainError("alternates per anchor must lie in [1, m-1]");
  std::vector<int> pool;
  pool.reserve(m - 1);
  for (std::size_t y = 0; y < m; ++y)
    if (static_cast<int>(y) != own) pool.push_back(static_cast<int>(y));
  for (std::size_t i = 0; i < a; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
  pool.resize(a);
  return pool;
}

/// Draws anchors uniformly within each environment and resolves their
/// alternates through a match function (env-local by construction).
class BalancedSampler {
 public:
  BalancedSampler(const Dataset& ds, const MatchIndex& mi, BatchSpec spec) : ds_(&ds), mi_(&mi), spec_(spec) {
    if (mi.n_examples != ds.size() || mi.m != static_cast<std::size_t>(ds.m))
      throw DimensionError("BalancedSampler: match index does not cover the dataset");
    if (spec.a < 1 || spec.a + 1 > static_cast<std::size_t>(ds.m))
      throw DomainError("BatchSpec: a=" + std::to_string(spec.a) + " outside [1, m-1] for m=" + std::to_string(ds.m));
    if (spec.B == 0) throw DomainError("BatchSpec: B must be positive");
    for (int env : ds.env_ids()) envs_.push_back(ds.indices_of_env(env));
  }

  /// Appends one anchor group drawn from environment slot `e` to `out`.
  void add_group(std::size_t e, Rng& rng, Batch& out) const {
    const auto& pool = envs_[e];
    const std::size_t anchor = pool[rng.uniform_index(pool.size())];
    const int y = ds_->examples[anchor].y;
    const std::size_t g = out.examples.empty() ? 0 : out.group.back() + 1;
    out.examples.push_back(anchor);
    out.group.push_back(g);
    out.anchor.push_back(true);
    for (int alt : sample_alternates(y, spec_.a, static_cast<std::size_t>(ds_->m), rng)) {
      out.examples.push_back(mi_->match(anchor, y, alt));
      out.group.push_back(g);
      out.anchor.push_back(false);
    }
  }

  Batch next(Rng& rng) const {
    Batch b;
    b.examples.reserve(spec_.B * envs_.size() * (spec_.a + 1));
    for (std::size_t e = 0; e < envs_.size(); ++e)
      for (std::size_t i = 0; i < spec_.B; ++i) add_group(e, rng, b);
    return b;
  }

  std::size_t n_envs() const noexcept { return envs_.size(); }
  const BatchSpec& spec() const noexcept { return spec_; }

 private:
  const Dataset* ds_;
  const MatchIndex* mi_;
  BatchSpec spec_;
  std::vector<std::vector<std::size_t>> envs_;
};

/// B anchors per environment, each followed by its a matched alternates:
/// B * |E| * (a + 1) examples.
inline Batch sample_balanced_batch(const Dataset& ds, const MatchIndex& mi, const BatchSpec& spec, Rng& rng) {
  return BalancedSampler(ds, mi, spec).next(rng);
}

/// Label probability inside an anchor group after matching `a` alternates,
/// for a label whose conditional probability given the score is p.
inline double semi_balanced_label_dist(double p, std::size_t a, std::size_t m) {
  if (m < 2 || a < 1 || a + 1 > m) throw DomainError("semi_balanced_label_dist: need 1 <= a <= m-1");
  if (p < 0.0 || p > 1.0) throw DomainError("semi_balanced_label_dist: p outside [0,1]");
  const double md = static_cast<double>(m), ad = static_cast<double>(a);
  return (ad / (md - 1.0) + ((md - ad - 1.0) / (md - 1.0)) * p) / (ad + 1.0);
}

// ---------------------------------------------------------------------------
// Match index file

inline constexpr std::uint32_t kMatchVersion = 1;

inline io::Bytes encode_match_index(const MatchIndex& mi) {
  io::ByteWriter w;
  w.magic("CBMI");
  w.u32(kMatchVersion);
  w.u32(static_cast<std::uint32_t>(mi.n_examples));
  w.u32(static_cast<std::uint32_t>(mi.m));
  w.u32(static_cast<std::uint32_t>(mi.slots()));
  w.u32(static_cast<std::uint32_t>(mi.metric));
  for (std::size_t s = 0; s < mi.index.size(); ++s) {
    w.u32(mi.index[s]);
    w.f64(mi.distance[s]);
  }
  return w.take();
}

inline MatchIndex decode_match_index(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("CBMI");
  r.expect_version(kMatchVersion);
  const std::uint64_t at = r.offset();
  MatchIndex mi;
  mi.n_examples = r.u32("n_examples");
  mi.m = r.u32("m");
  const std::uint32_t slots = r.u32("slots");
  const std::uint32_t metric = r.u32("metric");
  if (mi.m < 2 || slots != mi.m - 1) throw FormatError(FormatErrorKind::invalid_content, at + 4, "slot count != m-1");
  if (metric > 4) throw FormatError(FormatErrorKind::invalid_content, at + 12, "unknown metric tag");
  mi.metric = static_cast<Metric>(metric);
  const std::uint64_t total = static_cast<std::uint64_t>(mi.n_examples) * slots;
  if (total * 12 > (std::uint64_t{1} << 40)) throw FormatError(FormatErrorKind::dimension_overflow, at, "index size");
  r.require(total * 12, "match slots");
  mi.index.resize(static_cast<std::size_t>(total));
  mi.distance.resize(static_cast<std::size_t>(total));
  for (std::size_t s = 0; s < total; ++s) {
    mi.index[s] = r.u32("match index");
    if (mi.index[s] >= mi.n_examples)
      throw FormatError(FormatErrorKind::invalid_content, r.offset() - 4, "match points past the dataset");
    mi.distance[s] = r.f64("match distance");
  }
  r.expect_end();
  return mi;
}

inline void write_match_index(const std::string& path, const MatchIndex& mi) {
  io::write_file(path, encode_match_index(mi));
}
inline MatchIndex read_match_index(const std::string& path) { return decode_match_index(io::read_file(path)); }

}  // namespace cbal
