/*
 * Copyright 2026 The biasattr Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Path-integrated gradient attribution of a bias functional to the neurons
// feeding the projection layer, plus mask construction and the bound check.
//
// For a single prompt with activation h̄ and functional B,
//
//   score_j = h̄_j * (1/n) * sum_{k=1..n} dB/dh_j (path(k/n))
//
// where the per-neuron path scales only h_j (others stay at h̄) and the
// joint path scales the whole vector. With several prompts (the JSD case)
// neuron j is scaled in every prompt at once and the per-prompt terms add up,
// so the score telescopes to B(h̄) - B(h̄ with h_j = 0).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"
#include "biasattr/model.hpp"
#include "json.hpp"

namespace biasattr::attr {

using math::BiasFunctional;
using math::ProjectionSlice;

enum class PathMode { kPerNeuron, kJoint };

inline std::string_view PathModeName(PathMode mode) {
  return mode == PathMode::kPerNeuron ? "per_neuron" : "joint";
}

inline PathMode ParsePathMode(std::string_view name) {
  if (name == "per_neuron") return PathMode::kPerNeuron;
  if (name == "joint") return PathMode::kJoint;
  Fail(ErrorKind::kConfig, "unknown path mode '", name,
       "' (expected per_neuron or joint)");
}

enum class Method { kForwardIg, kBackwardIg, kIg2, kRandom };

inline std::string_view MethodName(Method method) {
  switch (method) {
    case Method::kForwardIg:
      return "forward_ig";
    case Method::kBackwardIg:
      return "backward_ig";
    case Method::kIg2:
      return "ig2";
    case Method::kRandom:
      return "random";
  }
  return "unknown";
}

inline Method ParseMethod(std::string_view name) {
  for (Method m : {Method::kForwardIg, Method::kBackwardIg, Method::kIg2,
                   Method::kRandom}) {
    if (MethodName(m) == name) return m;
  }
  Fail(ErrorKind::kFormat, "unknown attribution method '", name, "'");
}

struct AttributionConfig {
  int n_step = 20;
  double beta = 0.2;
  double clamp_value = 0.0;
  LayerTag layer = LayerTag::kProjectionInput;
  PathMode path_mode = PathMode::kPerNeuron;
  double epsilon = math::kDefaultEpsilon;
  // Backward-IG only: multiply by the mean activation over the prompts
  // instead of summing per-prompt terms.
  bool literal_mean_activation = false;

  void Validate() const {
    Require(n_step >= 1, "n_step must be >= 1, got ", n_step);
    Require(beta > 0.0 && beta <= 1.0, "beta must be in (0, 1], got ", beta);
    Require(std::isfinite(clamp_value), "clamp value must be finite");
    Require(epsilon > 0.0 && epsilon <= 1e-6, "epsilon must be in (0, 1e-6]");
  }
};

// The map from activations at the attribution layer to the projection input.
// Identity at the projection input; the backend's lift at hidden1.
class LayerMap {
 public:
  static LayerMap Identity() { return LayerMap(nullptr); }

  static LayerMap ForLayer(const ModelBackend& backend, LayerTag layer) {
    if (layer == LayerTag::kProjectionInput) return Identity();
    backend.Capabilities().DimAt(layer);  // throws if unsupported
    return LayerMap(&backend);
  }

  bool identity() const { return backend_ == nullptr; }

  Vec Lift(const Vec& h) const {
    return identity() ? h : backend_->LiftHidden1(h);
  }

  Vec PullBack(const Vec& h, const Vec& grad) const {
    return identity() ? grad : backend_->PullBackToHidden1(h, grad);
  }

 private:
  explicit LayerMap(const ModelBackend* backend) : backend_(backend) {}
  const ModelBackend* backend_;
};

namespace internal {

// dB/dh at the attribution layer for every prompt.
inline std::vector<Vec> GradAtLayer(const BiasFunctional& functional,
                                    std::span<const ProjectionSlice> slices,
                                    std::span<const Vec> hiddens,
                                    const LayerMap& map) {
  std::vector<Vec> lifted;
  lifted.reserve(hiddens.size());
  for (const Vec& h : hiddens) lifted.push_back(map.Lift(h));
  std::vector<Vec> grads =
      math::GradBiasWrtHidden(functional, slices, lifted);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    grads[i] = map.PullBack(hiddens[i], grads[i]);
  }
  return grads;
}

}  // namespace internal

// Path-integrated scores for one or more prompts sharing a functional. With
// `mean_multiplier` the per-prompt gradients are summed and multiplied by the
// mean activation instead of weighting each prompt by its own activation.
inline Vec PathIntegratedScores(const BiasFunctional& functional,
                                std::span<const ProjectionSlice> slices,
                                std::span<const Vec> hbars, const LayerMap& map,
                                int n_step, PathMode mode,
                                bool mean_multiplier = false) {
  Require(n_step >= 1, "n_step must be >= 1, got ", n_step);
  Require(!hbars.empty() && slices.size() == hbars.size(), "got ",
          slices.size(), " slices for ", hbars.size(), " activations");
  const Eigen::Index dim = hbars[0].size();
  for (const Vec& h : hbars) {
    Require(h.size() == dim, "activations differ in length");
    Require(h.allFinite(), "activation contains non-finite values");
  }
  const std::size_t n_prompts = hbars.size();
  const double inv_n = 1.0 / n_step;

  // gradient_sums[i][j] = sum_k dB/dh_j^(i) along the path for neuron j.
  std::vector<Vec> gradient_sums(n_prompts, Vec::Zero(dim));

  if (mode == PathMode::kJoint) {
    std::vector<Vec> scaled(n_prompts);
    for (int k = 1; k <= n_step; ++k) {
      const double alpha = k * inv_n;
      for (std::size_t i = 0; i < n_prompts; ++i) scaled[i] = alpha * hbars[i];
      const std::vector<Vec> g =
          internal::GradAtLayer(functional, slices, scaled, map);
      for (std::size_t i = 0; i < n_prompts; ++i) gradient_sums[i] += g[i];
    }
  } else if (map.identity()) {
    // Only z = rows h + b moves, along rows.col(j).
    std::vector<Vec> base_logits(n_prompts);
    for (std::size_t i = 0; i < n_prompts; ++i) {
      slices[i].Validate();
      base_logits[i] = math::SliceLogits(slices[i], hbars[i]);
    }
    std::vector<Vec> logits(n_prompts);
    for (Eigen::Index j = 0; j < dim; ++j) {
      bool all_zero = true;
      for (const Vec& h : hbars) all_zero = all_zero && h[j] == 0.0;
      if (all_zero) continue;
      for (int k = 1; k <= n_step; ++k) {
        const double shrink = k * inv_n - 1.0;
        for (std::size_t i = 0; i < n_prompts; ++i) {
          logits[i] =
              base_logits[i] + slices[i].rows.col(j) * (shrink * hbars[i][j]);
        }
        const std::vector<Vec> g = math::GradWrtLogits(functional, logits);
        for (std::size_t i = 0; i < n_prompts; ++i) {
          gradient_sums[i][j] += slices[i].rows.col(j).dot(g[i]);
        }
      }
    }
  } else {
    std::vector<Vec> moved(hbars.begin(), hbars.end());
    for (Eigen::Index j = 0; j < dim; ++j) {
      bool all_zero = true;
      for (const Vec& h : hbars) all_zero = all_zero && h[j] == 0.0;
      if (all_zero) continue;
      for (int k = 1; k <= n_step; ++k) {
        const double alpha = k * inv_n;
        for (std::size_t i = 0; i < n_prompts; ++i) {
          moved[i][j] = alpha * hbars[i][j];
        }
        const std::vector<Vec> g =
            internal::GradAtLayer(functional, slices, moved, map);
        for (std::size_t i = 0; i < n_prompts; ++i) {
          gradient_sums[i][j] += g[i][j];
        }
      }
      for (std::size_t i = 0; i < n_prompts; ++i) moved[i][j] = hbars[i][j];
    }
  }

  Vec scores = Vec::Zero(dim);
  if (mean_multiplier) {
    Vec mean_h = Vec::Zero(dim);
    Vec total_grad = Vec::Zero(dim);
    for (std::size_t i = 0; i < n_prompts; ++i) {
      mean_h += hbars[i];
      total_grad += gradient_sums[i];
    }
    mean_h /= static_cast<double>(n_prompts);
    return (mean_h.array() * total_grad.array() * inv_n).matrix();
  }
  for (std::size_t i = 0; i < n_prompts; ++i) {
    scores += (hbars[i].array() * gradient_sums[i].array() * inv_n).matrix();
  }
  return scores;
}

// -- Backend-level methods -----------------------------------------------------

// Forward-IG: inverse entropy of the group distribution after `prompt`.
inline Vec ForwardIg(const ModelBackend& backend, const TokenSeq& prompt,
                     std::span<const TokenId> group_tokens,
                     const AttributionConfig& config) {
  config.Validate();
  const ProjectionSlice slice = backend.ProjectionSlice(group_tokens);
  const Vec hbar = backend.Snapshot(prompt, config.layer).h;
  return PathIntegratedScores(BiasFunctional::InverseEntropy(config.epsilon),
                              std::span(&slice, 1), std::span(&hbar, 1),
                              LayerMap::ForLayer(backend, config.layer),
                              config.n_step, config.path_mode);
}

// IG2 baseline: |P(first) - P(second)| over the group distribution.
inline Vec Ig2(const ModelBackend& backend, const TokenSeq& prompt,
               std::span<const TokenId> group_tokens, std::size_t first,
               std::size_t second, const AttributionConfig& config) {
  config.Validate();
  Require(first < group_tokens.size() && second < group_tokens.size() &&
              first != second,
          "IG2 pair (", first, ", ", second, ") is not in the schema");
  const ProjectionSlice slice = backend.ProjectionSlice(group_tokens);
  const Vec hbar = backend.Snapshot(prompt, config.layer).h;
  return PathIntegratedScores(
      BiasFunctional::AbsGap(static_cast<Eigen::Index>(first),
                             static_cast<Eigen::Index>(second)),
      std::span(&slice, 1), std::span(&hbar, 1),
      LayerMap::ForLayer(backend, config.layer), config.n_step,
      config.path_mode);
}

// Backward-IG: JSD between the option distributions of prompts that differ
// only in the demographic group.
inline Vec BackwardIg(const ModelBackend& backend,
                      std::span<const TokenSeq> prompts,
                      std::span<const TokenId> option_tokens,
                      const AttributionConfig& config) {
  config.Validate();
  Require(prompts.size() >= 2, "Backward-IG needs prompts for at least 2 "
          "groups, got ", prompts.size(), " (fewer than 2 groups)");
  const ProjectionSlice slice = backend.ProjectionSlice(option_tokens);
  std::vector<ProjectionSlice> slices(prompts.size(), slice);
  std::vector<Vec> hbars;
  hbars.reserve(prompts.size());
  for (const TokenSeq& p : prompts) {
    hbars.push_back(backend.Snapshot(p, config.layer).h);
  }
  return PathIntegratedScores(BiasFunctional::GeneralizedJsd(config.epsilon),
                              slices, hbars,
                              LayerMap::ForLayer(backend, config.layer),
                              config.n_step, config.path_mode,
                              config.literal_mean_activation);
}

// -- Reports and masks ---------------------------------------------------------

// Arithmetic mean in index order, so the result is independent of how the
// per-sample vectors were computed.
inline Vec AverageScores(std::span<const Vec> per_sample) {
  Require(!per_sample.empty(), "no score vectors to average");
  Vec total = Vec::Zero(per_sample[0].size());
  for (const Vec& v : per_sample) {
    Require(v.size() == total.size(), "score vectors differ in length: ",
            v.size(), " vs ", total.size());
    total += v;
  }
  return total / static_cast<double>(per_sample.size());
}

struct AttributionReport {
  Method method = Method::kForwardIg;
  AttributionConfig config;
  Vec scores;
  std::size_t sample_count = 0;
  std::string backend_fingerprint;
  std::uint64_t seed = 0;  // Random reports only.

  void Validate() const {
    Require(sample_count >= 1, "report sample_count must be >= 1");
    Require(scores.size() > 0 && scores.allFinite(),
            "report scores must be non-empty and finite");
  }
};

inline nlohmann::json ConfigToJson(const AttributionConfig& c) {
  return {{"n_step", c.n_step},
          {"beta", c.beta},
          {"clamp_value", c.clamp_value},
          {"layer", LayerTagName(c.layer)},
          {"path_mode", PathModeName(c.path_mode)},
          {"epsilon", c.epsilon},
          {"literal_mean_activation", c.literal_mean_activation},
          // Neurons other than j stay at their observed activation.
          {"per_neuron_others_held_at", "observed"}};
}

inline AttributionConfig ConfigFromJson(const nlohmann::json& j) {
  AttributionConfig c;
  c.n_step = j.value("n_step", c.n_step);
  c.beta = j.value("beta", c.beta);
  c.clamp_value = j.value("clamp_value", c.clamp_value);
  c.layer = ParseLayerTag(j.value("layer", std::string("proj_input")));
  c.path_mode = ParsePathMode(j.value("path_mode", std::string("per_neuron")));
  c.epsilon = j.value("epsilon", c.epsilon);
  c.literal_mean_activation =
      j.value("literal_mean_activation", c.literal_mean_activation);
  return c;
}

inline nlohmann::json ReportToJson(const AttributionReport& r) {
  nlohmann::json j = {{"method", MethodName(r.method)},
                      {"layer", LayerTagName(r.config.layer)},
                      {"config", ConfigToJson(r.config)},
                      {"scores", std::vector<double>(r.scores.begin(),
                                                     r.scores.end())},
                      {"sample_count", r.sample_count},
                      {"backend_fingerprint", r.backend_fingerprint}};
  if (r.method == Method::kRandom) j["seed"] = r.seed;
  return j;
}

inline AttributionReport ReportFromJson(const nlohmann::json& j) {
  try {
    AttributionReport r;
    r.method = ParseMethod(j.at("method").get<std::string>());
    r.config = ConfigFromJson(j.at("config"));
    const auto scores = j.at("scores").get<std::vector<double>>();
    r.scores = Eigen::Map<const Vec>(scores.data(),
                                     static_cast<Eigen::Index>(scores.size()));
    r.sample_count = j.at("sample_count").get<std::size_t>();
    r.backend_fingerprint = j.value("backend_fingerprint", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
    r.Validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kFormat, "malformed attribution report: ", e.what());
  }
}

// Number of neurons masked for a fraction beta of M; at least one. The small
// offset keeps products like 0.3 * 10 from rounding down to 2.
inline std::size_t MaskSize(std::size_t m, double beta) {
  Require(beta > 0.0 && beta <= 1.0, "beta must be in (0, 1], got ", beta);
  Require(m >= 1, "cannot mask an empty layer");
  const auto n = static_cast<std::size_t>(
      std::floor(beta * static_cast<double>(m) + 1e-9));
  return std::clamp<std::size_t>(n, 1, m);
}

// Top floor(beta * M) neurons by descending score; ties go to the lower index.
inline InterventionMask RankAndMask(const Vec& scores, double beta,
                                    double clamp_value, LayerTag layer) {
  Require(scores.size() > 0 && scores.allFinite(),
          "scores must be non-empty and finite");
  const auto m = static_cast<std::size_t>(scores.size());
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](int a, int b) { return scores[a] > scores[b]; });
  order.resize(MaskSize(m, beta));
  return InterventionMask(std::move(order), clamp_value, layer);
}

// Uniform sample of floor(beta * M) neurons without replacement.
inline InterventionMask RandomMask(std::size_t m, double beta,
                                   double clamp_value, std::uint64_t seed,
                                   LayerTag layer = LayerTag::kProjectionInput) {
  const std::size_t n = MaskSize(m, beta);
  std::vector<int> pool(m);
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: the first n slots end up a uniform sample.
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(pool[i], pool[i + rng.Below(m - i)]);
  }
  pool.resize(n);
  return InterventionMask(std::move(pool), clamp_value, layer);
}

// Scores drawn uniformly from [0, 1); ranking them gives a random mask.
inline AttributionReport RandomReport(std::size_t m, std::uint64_t seed,
                                      const AttributionConfig& config,
                                      std::string fingerprint) {
  Require(m >= 1, "hidden_dim must be >= 1");
  AttributionReport r;
  r.method = Method::kRandom;
  r.config = config;
  r.scores.resize(static_cast<Eigen::Index>(m));
  Rng rng(seed);
  for (auto& s : r.scores) s = rng.Uniform();
  r.sample_count = 1;
  r.backend_fingerprint = std::move(fingerprint);
  r.seed = seed;
  return r;
}

inline nlohmann::json MaskToJson(const InterventionMask& mask) {
  return {{"idx", mask.indices()},
          {"c", mask.clamp_value()},
          {"layer", LayerTagName(mask.layer())}};
}

inline InterventionMask MaskFromJson(const nlohmann::json& j) {
  try {
    return InterventionMask(j.at("idx").get<std::vector<int>>(),
                            j.at("c").get<double>(),
                            ParseLayerTag(j.value("layer", "proj_input")));
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kFormat, "malformed mask: ", e.what());
  }
}

// -- Bound check ---------------------------------------------------------------

struct BoundCheck {
  double delta_b = 0.0;
  double delta_y_norm = 0.0;
  double sup_grad_norm = 0.0;
  bool satisfied = true;
};

inline constexpr double kBoundSlack = 1e-9;

// Checks |B(y1) - B(y0)| <= sup_theta ||grad B(y0 + theta dy)|| * ||dy||, y
// being the restricted logits of every prompt stacked into one vector.
inline BoundCheck VerifyBoundLogits(const BiasFunctional& functional,
                                    std::span<const Vec> y0,
                                    std::span<const Vec> y1, int grid) {
  Require(grid >= 16, "bound check grid must be >= 16, got ", grid);
  Require(y0.size() == y1.size() && !y0.empty(), "logit lists differ");
  std::vector<Vec> dy(y0.size());
  double dy_sq = 0.0;
  for (std::size_t i = 0; i < y0.size(); ++i) {
    Require(y0[i].size() == y1[i].size(), "logit vectors differ in length");
    dy[i] = y1[i] - y0[i];
    dy_sq += dy[i].squaredNorm();
  }
  BoundCheck check;
  check.delta_b =
      math::EvaluateLogits(functional, y1) - math::EvaluateLogits(functional, y0);
  check.delta_y_norm = std::sqrt(dy_sq);
  std::vector<Vec> y(y0.size());
  for (int k = 0; k <= grid; ++k) {
    const double theta = static_cast<double>(k) / grid;
    for (std::size_t i = 0; i < y0.size(); ++i) y[i] = y0[i] + theta * dy[i];
    double g_sq = 0.0;
    for (const Vec& g : math::GradWrtLogits(functional, y)) {
      g_sq += g.squaredNorm();
    }
    check.sup_grad_norm = std::max(check.sup_grad_norm, std::sqrt(g_sq));
  }
  check.satisfied = std::abs(check.delta_b) <=
                    check.sup_grad_norm * check.delta_y_norm + kBoundSlack;
  return check;
}

// Bound check for masking `prompts` (one prompt for single-distribution
// functionals, one per group for the JSD).
inline BoundCheck VerifyBound(const ModelBackend& backend,
                              std::span<const TokenSeq> prompts,
                              const InterventionMask& mask,
                              const BiasFunctional& functional,
                              const ProjectionSlice& slice, int grid) {
  std::vector<Vec> y0, y1;
  for (const TokenSeq& p : prompts) {
    y0.push_back(math::SliceLogits(slice, ProjectionInput(backend, p, nullptr)));
    y1.push_back(math::SliceLogits(slice, ProjectionInput(backend, p, &mask)));
  }
  return VerifyBoundLogits(functional, y0, y1, grid);
}

// mean |first| / mean |last|.
inline double LayerMagnitudeRatio(const Vec& first_layer_scores,
                                  const Vec& last_layer_scores) {
  Require(first_layer_scores.size() > 0 && last_layer_scores.size() > 0,
          "empty score vectors");
  const double last = last_layer_scores.cwiseAbs().mean();
  Require(last > 0.0, "last-layer scores are all zero");
  return first_layer_scores.cwiseAbs().mean() / last;
}

// Spearman rank correlation with average ranks for ties.
inline double SpearmanCorrelation(const Vec& a, const Vec& b) {
  Require(a.size() == b.size() && a.size() >= 2,
          "Spearman needs two equal-length vectors of length >= 2");
  auto ranks = [](const Vec& v) {
    const auto n = static_cast<std::size_t>(v.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&v](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    Vec r(v.size());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j);
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const Vec ra = ranks(a).array() - ranks(a).mean();
  const Vec rb = ranks(b).array() - ranks(b).mean();
  const double denom = ra.norm() * rb.norm();
  return denom == 0.0 ? 0.0 : ra.dot(rb) / denom;
}

}  // namespace biasattr::attr
