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

// Self-checks behind the `check` command: recorded gradient fixtures against
// finite differences, a randomized sweep of the bias-change bound, and the
// micro model's training gradient.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "biasattr/attribution.hpp"
#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"
#include "biasattr/micro_lm.hpp"
#include "biasattr/model.hpp"
#include "json.hpp"

namespace biasattr::diag {

inline constexpr double kGradientTolerance = 1e-5;
inline constexpr double kFiniteDifferenceStep = 1e-5;

// One functional evaluated at fixed hidden vectors, with the gradient the
// engine produced when the fixture was written.
struct GradientCase {
  math::BiasFunctional functional;
  std::vector<math::ProjectionSlice> slices;
  std::vector<Vec> hiddens;
  std::vector<Vec> grad;
};

inline nlohmann::json VecJson(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vec JsonVec(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(values.data(),
                               static_cast<Eigen::Index>(values.size()));
}

inline nlohmann::json ToJson(const GradientCase& c) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : c.slices) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index k = 0; k < s.rows.rows(); ++k) {
      rows.push_back(VecJson(s.rows.row(k).transpose()));
    }
    slices.push_back({{"rows", rows}, {"bias", VecJson(s.bias)}});
  }
  nlohmann::json hiddens = nlohmann::json::array();
  for (const auto& h : c.hiddens) hiddens.push_back(VecJson(h));
  nlohmann::json grad = nlohmann::json::array();
  for (const auto& g : c.grad) grad.push_back(VecJson(g));
  return {{"functional", math::FunctionalKindName(c.functional.kind)},
          {"epsilon", c.functional.epsilon},
          {"pair", {c.functional.first, c.functional.second}},
          {"slices", slices},
          {"hiddens", hiddens},
          {"grad", grad}};
}

inline math::FunctionalKind ParseFunctionalKind(const std::string& name) {
  for (auto kind : {math::FunctionalKind::kInverseEntropy,
                    math::FunctionalKind::kGeneralizedJsd,
                    math::FunctionalKind::kAbsGap}) {
    if (math::FunctionalKindName(kind) == name) return kind;
  }
  Fail(ErrorKind::kFormat, "unknown functional '", name, "'");
}

inline GradientCase GradientCaseFromJson(const nlohmann::json& j) {
  GradientCase c;
  try {
    c.functional.kind = ParseFunctionalKind(j.at("functional").get<std::string>());
    c.functional.epsilon = j.at("epsilon").get<double>();
    const auto pair = j.at("pair").get<std::vector<Eigen::Index>>();
    Require(pair.size() == 2, "pair must have two entries");
    c.functional.first = pair[0];
    c.functional.second = pair[1];
    for (const auto& s : j.at("slices")) {
      const auto& rows = s.at("rows");
      Require(!rows.empty(), "slice has no rows");
      math::ProjectionSlice slice{
          Mat(static_cast<Eigen::Index>(rows.size()),
              static_cast<Eigen::Index>(rows[0].size())),
          JsonVec(s.at("bias"))};
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const Vec r = JsonVec(rows[k]);
        Require(r.size() == slice.rows.cols(), "ragged slice rows");
        slice.rows.row(static_cast<Eigen::Index>(k)) = r.transpose();
      }
      slice.Validate();
      c.slices.push_back(std::move(slice));
    }
    for (const auto& h : j.at("hiddens")) c.hiddens.push_back(JsonVec(h));
    for (const auto& g : j.at("grad")) c.grad.push_back(JsonVec(g));
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kFormat, "malformed gradient case: ", e.what());
  } catch (const Error& e) {
    Fail(ErrorKind::kFormat, "malformed gradient case: ", e.what());
  }
  if (c.slices.size() != c.hiddens.size() || c.grad.size() != c.hiddens.size()) {
    Fail(ErrorKind::kFormat, "gradient case lists differ in length");
  }
  return c;
}

// Random well-conditioned cases covering all three functionals.
inline std::vector<GradientCase> MakeGradientCases(std::uint64_t seed,
                                                   std::size_t count) {
  Rng rng(seed);
  std::vector<GradientCase> out;
  for (std::size_t n = 0; n < count; ++n) {
    GradientCase c;
    const auto kind = static_cast<math::FunctionalKind>(n % 3);
    const Eigen::Index dim = 2 + static_cast<Eigen::Index>(rng.Below(7));
    const Eigen::Index cands = 2 + static_cast<Eigen::Index>(rng.Below(3));
    const std::size_t prompts =
        kind == math::FunctionalKind::kGeneralizedJsd ? 2 + rng.Below(3) : 1;
    c.functional = {kind, math::kDefaultEpsilon, 0, 1};
    if (kind == math::FunctionalKind::kAbsGap) {
      c.functional.first = static_cast<Eigen::Index>(rng.Below(cands));
      c.functional.second =
          (c.functional.first + 1 + static_cast<Eigen::Index>(
                                        rng.Below(cands - 1))) % cands;
    }
    for (std::size_t i = 0; i < prompts; ++i) {
      math::ProjectionSlice s{Mat(cands, dim), Vec(cands)};
      for (Eigen::Index r = 0; r < cands; ++r) {
        for (Eigen::Index col = 0; col < dim; ++col) {
          s.rows(r, col) = rng.Normal() * 0.7;
        }
        s.bias[r] = rng.Normal() * 0.2;
      }
      Vec h(dim);
      for (auto& x : h) x = rng.Normal();
      c.slices.push_back(std::move(s));
      c.hiddens.push_back(std::move(h));
    }
    // Distributions consumed jointly must share candidates; reuse one slice.
    if (prompts > 1) {
      for (std::size_t i = 1; i < prompts; ++i) c.slices[i] = c.slices[0];
    }
    c.grad = math::GradBiasWrtHidden(c.functional, c.slices, c.hiddens);
    out.push_back(std::move(c));
  }
  return out;
}

inline nlohmann::json GradientFixtureToJson(std::span<const GradientCase> cases) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cases) arr.push_back(ToJson(c));
  return {{"cases", arr}};
}

inline std::vector<GradientCase> GradientFixtureFromJson(const nlohmann::json& j) {
  if (!j.contains("cases") || !j["cases"].is_array()) {
    Fail(ErrorKind::kFormat, "gradient fixture lacks a 'cases' array");
  }
  std::vector<GradientCase> out;
  for (const auto& c : j["cases"]) out.push_back(GradientCaseFromJson(c));
  return out;
}

// Central differences of B at `hiddens`, evaluated in extended precision.
inline std::vector<Vec> NumericGradient(const math::BiasFunctional& functional,
                                        std::span<const math::ProjectionSlice> slices,
                                        std::span<const Vec> hiddens,
                                        double step = kFiniteDifferenceStep) {
  std::vector<Vec> probe(hiddens.begin(), hiddens.end());
  std::vector<Vec> out;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    Vec g(probe[i].size());
    for (Eigen::Index j = 0; j < probe[i].size(); ++j) {
      const double saved = probe[i][j];
      probe[i][j] = saved + step;
      const long double plus =
          math::internal::EvaluateHiddenExtended(functional, slices, probe);
      probe[i][j] = saved - step;
      const long double minus =
          math::internal::EvaluateHiddenExtended(functional, slices, probe);
      probe[i][j] = saved;
      g[j] = static_cast<double>((plus - minus) / (2 * step));
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline double MaxRelativeError(std::span<const Vec> a, std::span<const Vec> b) {
  Require(a.size() == b.size(), "gradient lists differ in length");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Require(a[i].size() == b[i].size(), "gradient vectors differ in length");
    for (Eigen::Index j = 0; j < a[i].size(); ++j) {
      const double err = std::abs(a[i][j] - b[i][j]) /
                         std::max({std::abs(a[i][j]), std::abs(b[i][j]), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

struct GradientReport {
  std::size_t cases = 0;
  double analytic_error = 0.0;  // engine now vs finite differences
  double recorded_error = 0.0;  // fixture values vs finite differences
  bool ok() const {
    return analytic_error < kGradientTolerance &&
           recorded_error < kGradientTolerance;
  }
};

inline GradientReport CheckGradientCases(std::span<const GradientCase> cases) {
  GradientReport r;
  for (const auto& c : cases) {
    const auto numeric = NumericGradient(c.functional, c.slices, c.hiddens);
    const auto analytic =
        math::GradBiasWrtHidden(c.functional, c.slices, c.hiddens);
    r.analytic_error =
        std::max(r.analytic_error, MaxRelativeError(analytic, numeric));
    r.recorded_error =
        std::max(r.recorded_error, MaxRelativeError(c.grad, numeric));
    ++r.cases;
  }
  return r;
}

// Untrained micro model over tokens "w2".."w<n-1>", for checks that only need
// a differentiable network with the real architecture.
inline micro::MicroBackend RandomMicroBackend(std::uint64_t seed,
                                              int vocab_size = 64) {
  micro::MicroConfig config;
  config.vocab_size = vocab_size;
  config.window = 3;
  config.embed_dim = 8;
  config.hidden1_dim = 32;
  config.hidden2_dim = 16;
  config.seed = seed;
  std::vector<std::string> tokens = {std::string(micro::kPadToken),
                                     std::string(micro::kUnknownToken)};
  for (int i = 2; i < vocab_size; ++i) tokens.push_back(StrCat("w", i));
  return micro::MicroBackend(micro::InitWeights(config),
                             micro::Vocabulary::FromTokens(std::move(tokens)));
}

// -- Bound sweep ---------------------------------------------------------------

struct BoundSweepReport {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;  // |dB| / (sup ||grad|| ||dy||), where defined
};

// Random prompts, masks and functionals on one backend. Prompts are random
// token sequences; candidate sets are random distinct ids.
inline BoundSweepReport BoundSweep(const ModelBackend& backend,
                                   std::size_t trials, std::uint64_t seed,
                                   int grid = 32) {
  const BackendCapabilities caps = backend.Capabilities();
  Require(caps.vocab_size >= 6, "bound sweep needs a vocabulary of >= 6");
  Rng rng(seed);
  BoundSweepReport r;
  auto random_prompt = [&] {
    TokenSeq seq;
    const std::size_t len = 1 + rng.Below(6);
    for (std::size_t t = 0; t < len; ++t) {
      seq.ids.push_back(
          static_cast<TokenId>(rng.Below(static_cast<std::uint64_t>(caps.vocab_size))));
    }
    return seq;
  };
  for (std::size_t n = 0; n < trials; ++n) {
    const auto kind = static_cast<math::FunctionalKind>(rng.Below(3));
    const std::size_t n_cands = 2 + rng.Below(4);
    std::vector<TokenId> pool(static_cast<std::size_t>(caps.vocab_size));
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < n_cands; ++i) {
      std::swap(pool[i], pool[i + rng.Below(pool.size() - i)]);
    }
    pool.resize(n_cands);
    math::BiasFunctional functional{kind, math::kDefaultEpsilon, 0, 1};
    std::vector<TokenSeq> prompts = {random_prompt()};
    if (kind == math::FunctionalKind::kGeneralizedJsd) {
      const std::size_t extra = 1 + rng.Below(3);
      for (std::size_t i = 0; i < extra; ++i) prompts.push_back(random_prompt());
    }
    if (kind == math::FunctionalKind::kAbsGap) {
      functional.first = static_cast<Eigen::Index>(rng.Below(n_cands));
      functional.second = (functional.first + 1 +
                           static_cast<Eigen::Index>(rng.Below(n_cands - 1))) %
                          static_cast<Eigen::Index>(n_cands);
    }
    const auto m = static_cast<std::size_t>(caps.hidden_dim);
    const double beta = 0.05 + 0.95 * rng.Uniform();
    const double c = rng.Uniform(-3.0, 3.0);
    const InterventionMask mask =
        attr::RandomMask(m, beta, c, rng.Below(UINT64_MAX));
    const math::ProjectionSlice slice = backend.ProjectionSlice(pool);
    const attr::BoundCheck check =
        attr::VerifyBound(backend, prompts, mask, functional, slice, grid);
    ++r.trials;
    if (!check.satisfied) ++r.violations;
    const double rhs = check.sup_grad_norm * check.delta_y_norm;
    if (rhs > 0.0) r.max_ratio = std::max(r.max_ratio, std::abs(check.delta_b) / rhs);
  }
  return r;
}

// -- Micro training gradient ---------------------------------------------------

// Max relative error of the manual training gradient on a small random model.
inline double MicroTrainGradientError(std::uint64_t seed) {
  micro::MicroConfig config;
  config.vocab_size = 12;
  config.window = 3;
  config.embed_dim = 4;
  config.hidden1_dim = 6;
  config.hidden2_dim = 5;
  config.seed = seed;
  const micro::MicroWeights w = micro::InitWeights(config);
  Rng rng(seed + 1);
  std::vector<std::vector<TokenId>> corpus(3);
  for (auto& sentence : corpus) {
    for (int t = 0; t < 5; ++t) {
      sentence.push_back(static_cast<TokenId>(2 + rng.Below(10)));
    }
  }
  const auto examples = micro::MakeExamples(corpus);
  return micro::AnalyticVsNumericTrainGrad(w, examples);
}

}  // namespace biasattr::diag
