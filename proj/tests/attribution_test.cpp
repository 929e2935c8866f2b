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

#include "biasattr/attribution.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

#include "biasattr/micro_lm.hpp"
#include "fake_backend.hpp"
#include "gtest/gtest.h"
#include "test_util.hpp"

namespace biasattr::attr {
namespace {

using math::BiasFunctional;
using math::ProjectionSlice;

// A random toy: one slice per prompt, activations of width `dim`.
struct Toy {
  BiasFunctional functional;
  std::vector<ProjectionSlice> slices;
  std::vector<Vec> hbars;
};

Toy MakeToy(Rng& rng, math::FunctionalKind kind, int dim,
            double row_scale = 1.0) {
  Toy t;
  const int candidates = 2 + static_cast<int>(rng.Below(4));
  std::size_t prompts = 1;
  switch (kind) {
    case math::FunctionalKind::kInverseEntropy:
      t.functional = BiasFunctional::InverseEntropy();
      break;
    case math::FunctionalKind::kAbsGap:
      t.functional = BiasFunctional::AbsGap(0, 1);
      break;
    case math::FunctionalKind::kGeneralizedJsd:
      t.functional = BiasFunctional::GeneralizedJsd();
      prompts = 2 + rng.Below(2);
      break;
  }
  const ProjectionSlice shared =
      test::RandomSlice(rng, candidates, dim, row_scale);
  for (std::size_t i = 0; i < prompts; ++i) {
    t.slices.push_back(shared);
    t.hbars.push_back(test::RandomVector(rng, dim));
  }
  return t;
}

double EndpointDifference(const Toy& t) {
  std::vector<Vec> zeros(t.hbars.size(), Vec::Zero(t.hbars[0].size()));
  return math::EvaluateHidden(t.functional, t.slices, t.hbars) -
         math::EvaluateHidden(t.functional, t.slices, zeros);
}

Vec Scores(const Toy& t, int n_step, PathMode mode = PathMode::kPerNeuron) {
  return PathIntegratedScores(t.functional, t.slices, t.hbars,
                              LayerMap::Identity(), n_step, mode);
}

constexpr math::FunctionalKind kAllKinds[] = {
    math::FunctionalKind::kInverseEntropy, math::FunctionalKind::kAbsGap,
    math::FunctionalKind::kGeneralizedJsd};

// Half the change of the path integrand between the endpoints. The right
// endpoint rule overshoots the integral by this over n_step, to first order.
double LeadingBias(const Toy& t, PathMode mode, Eigen::Index j) {
  std::vector<Vec> start = t.hbars;
  for (Vec& h : start) {
    if (mode == PathMode::kJoint) {
      h.setZero();
    } else {
      h[j] = 0.0;
    }
  }
  const auto g1 = math::GradBiasWrtHidden(t.functional, t.slices, t.hbars);
  const auto g0 = math::GradBiasWrtHidden(t.functional, t.slices, start);
  double delta = 0.0;
  for (std::size_t i = 0; i < t.hbars.size(); ++i) {
    delta += mode == PathMode::kJoint
                 ? t.hbars[i].dot(g1[i] - g0[i])
                 : t.hbars[i][j] * (g1[i][j] - g0[i][j]);
  }
  return 0.5 * delta;
}

// No sign change of p_first - p_second along a 1-neuron path. The logit gap
// is linear in alpha, so checking the endpoints is enough.
bool GapKeepsSign(const Toy& t) {
  const auto& s = t.slices[0];
  const double at0 = s.bias[0] - s.bias[1];
  const double at1 = at0 + (s.rows(0, 0) - s.rows(1, 0)) * t.hbars[0][0];
  return at0 * at1 > 0.0;
}

constexpr math::FunctionalKind kSmoothKinds[] = {
    math::FunctionalKind::kInverseEntropy,
    math::FunctionalKind::kGeneralizedJsd};

TEST(PathIntegratedScores, SingleNeuronTelescopes) {
  Rng rng(101);
  int checked_gap = 0;
  for (auto kind : kAllKinds) {
    for (int trial = 0; trial < 40; ++trial) {
      const Toy t = MakeToy(rng, kind, 1);
      if (kind == math::FunctionalKind::kAbsGap && !GapKeepsSign(t)) continue;
      checked_gap += kind == math::FunctionalKind::kAbsGap;
      constexpr int kSteps = 4096;
      const double corrected =
          Scores(t, kSteps)[0] -
          LeadingBias(t, PathMode::kPerNeuron, 0) / kSteps;
      EXPECT_NEAR(corrected, EndpointDifference(t), 1e-4)
          << math::FunctionalKindName(kind) << " trial " << trial;
    }
  }
  EXPECT_GE(checked_gap, 20);
}

TEST(PathIntegratedScores, JointPathIsComplete) {
  Rng rng(102);
  for (auto kind : kSmoothKinds) {
    for (int trial = 0; trial < 20; ++trial) {
      const Toy t = MakeToy(rng, kind, 8);
      constexpr int kSteps = 4096;
      const double corrected = Scores(t, kSteps, PathMode::kJoint).sum() -
                               LeadingBias(t, PathMode::kJoint, 0) / kSteps;
      EXPECT_NEAR(corrected, EndpointDifference(t), 1e-4)
          << math::FunctionalKindName(kind) << " trial " << trial;
    }
  }
}

TEST(PathIntegratedScores, RefinementShrinksError) {
  Rng rng(104);
  for (auto kind : kSmoothKinds) {
    for (int trial = 0; trial < 20; ++trial) {
      const Toy t = MakeToy(rng, kind, 1);
      double previous = std::numeric_limits<double>::infinity();
      for (int n : {5, 20, 80, 320}) {
        const double gap = std::abs(Scores(t, n)[0] - Scores(t, 4 * n)[0]);
        EXPECT_LT(gap, previous) << "n_step " << n << " trial " << trial;
        previous = gap;
      }
    }
  }
}

TEST(PathIntegratedScores, ZeroRowsGiveZeroScores) {
  Rng rng(105);
  Toy t = MakeToy(rng, math::FunctionalKind::kInverseEntropy, 6);
  t.slices[0].rows.setZero();
  EXPECT_TRUE(Scores(t, 20).isZero(0.0));
  EXPECT_TRUE(Scores(t, 20, PathMode::kJoint).isZero(0.0));
}

TEST(PathIntegratedScores, ZeroActivationGetsZeroScoreProperty) {
  Rng rng(106);
  for (auto kind : kAllKinds) {
    for (int trial = 0; trial < 30; ++trial) {
      Toy t = MakeToy(rng, kind, 10);
      const auto j = static_cast<Eigen::Index>(rng.Below(10));
      for (Vec& h : t.hbars) h[j] = 0.0;
      EXPECT_EQ(Scores(t, 20)[j], 0.0);
      EXPECT_EQ(Scores(t, 20, PathMode::kJoint)[j], 0.0);
    }
  }
}

TEST(PathIntegratedScores, InvariantToRowAndActivationRescalingProperty) {
  Rng rng(107);
  for (auto kind : kAllKinds) {
    for (int trial = 0; trial < 30; ++trial) {
      const Toy t = MakeToy(rng, kind, 6);
      Toy scaled = t;
      const auto j = static_cast<Eigen::Index>(rng.Below(6));
      const double s = rng.Uniform(0.25, 4.0);
      for (auto& slice : scaled.slices) slice.rows.col(j) *= s;
      for (Vec& h : scaled.hbars) h[j] /= s;
      const Vec a = Scores(t, 20);
      const Vec b = Scores(scaled, 20);
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-12 * (1.0 + std::abs(a[i])));
      }
    }
  }
}

TEST(PathIntegratedScores, NeuronPermutationPermutesScoresProperty) {
  Rng rng(108);
  for (auto kind : kAllKinds) {
    for (int trial = 0; trial < 30; ++trial) {
      const Toy t = MakeToy(rng, kind, 7);
      std::vector<int> perm(7);
      std::iota(perm.begin(), perm.end(), 0);
      rng.Shuffle(perm);
      Toy permuted = t;
      for (std::size_t i = 0; i < t.slices.size(); ++i) {
        for (int j = 0; j < 7; ++j) {
          permuted.slices[i].rows.col(j) = t.slices[i].rows.col(perm[j]);
          permuted.hbars[i][j] = t.hbars[i][perm[j]];
        }
      }
      const Vec a = Scores(t, 20);
      const Vec b = Scores(permuted, 20);
      for (int j = 0; j < 7; ++j) {
        EXPECT_NEAR(b[j], a[perm[j]], 1e-13 * (1.0 + std::abs(a[perm[j]])));
      }
    }
  }
}

TEST(PathIntegratedScores, MeanMultiplierMatchesWhenActivationsAgree) {
  Rng rng(109);
  Toy t = MakeToy(rng, math::FunctionalKind::kGeneralizedJsd, 5);
  t.hbars.assign(t.hbars.size(), t.hbars[0]);
  // Identical states give zero JSD everywhere, so perturb one slice instead.
  t.slices[1].bias[0] += 1.0;
  const Vec per_prompt = PathIntegratedScores(
      t.functional, t.slices, t.hbars, LayerMap::Identity(), 20,
      PathMode::kPerNeuron, false);
  const Vec literal = PathIntegratedScores(
      t.functional, t.slices, t.hbars, LayerMap::Identity(), 20,
      PathMode::kPerNeuron, true);
  for (Eigen::Index j = 0; j < per_prompt.size(); ++j) {
    EXPECT_NEAR(per_prompt[j], literal[j], 1e-14);
  }
}

TEST(PathIntegratedScores, RejectsBadInput) {
  Rng rng(110);
  Toy t = MakeToy(rng, math::FunctionalKind::kInverseEntropy, 3);
  EXPECT_THROW(Scores(t, 0), Error);
  t.hbars[0][1] = std::nan("");
  EXPECT_THROW(Scores(t, 20), Error);
}

// -- Backend-level methods ---------------------------------------------------

test::FakeBackend TwoGroupBackend() {
  // Hidden state depends on the group word only; 3 neurons.
  Mat projection = Mat::Zero(6, 3);
  projection.row(2) << 1.0, 0.5, 0.0;    // he
  projection.row(3) << -1.0, 0.25, 0.0;  // she
  projection.row(4) << 0.3, -0.7, 0.0;   // yes
  projection.row(5) << -0.2, 0.9, 0.0;   // no
  return test::FakeBackend(
      test::WordVocab({"he", "she", "yes", "no"}), projection, Vec::Zero(6),
      [](const std::vector<std::string>& words) {
        Vec h(3);
        if (words.back() == "he") {
          h << 0.8, -0.4, 0.6;
        } else if (words.back() == "she") {
          h << -0.3, 0.9, 0.6;
        } else {
          h << 0.5, 0.5, 0.0;
        }
        return h;
      });
}

TEST(ForwardIg, EqualsPathIntegralOfInverseEntropy) {
  const auto backend = TwoGroupBackend();
  const std::vector<TokenId> groups = {backend.Id("he"), backend.Id("she")};
  const TokenSeq prompt = backend.Tokenize("yes");
  AttributionConfig config;
  const Vec got = ForwardIg(backend, prompt, groups, config);
  const ProjectionSlice slice = backend.ProjectionSlice(groups);
  const Vec h = backend.Snapshot(prompt, LayerTag::kProjectionInput).h;
  const Vec expected = PathIntegratedScores(
      BiasFunctional::InverseEntropy(), std::span(&slice, 1),
      std::span(&h, 1), LayerMap::Identity(), 20, PathMode::kPerNeuron);
  EXPECT_EQ(got, expected);
  // Neuron 2 has zero activation; neuron 1 has zero projection gap.
  EXPECT_EQ(got[2], 0.0);
}

TEST(BackwardIg, IdenticalStatesGiveZeroScores) {
  const auto backend = TwoGroupBackend();
  const std::vector<TokenId> options = {backend.Id("yes"), backend.Id("no")};
  const std::vector<TokenSeq> prompts = {backend.Tokenize("yes he"),
                                         backend.Tokenize("no he")};
  const Vec scores = BackwardIg(backend, prompts, options, AttributionConfig{});
  EXPECT_TRUE(scores.isZero(1e-15));
}

TEST(BackwardIg, DifferingStatesGiveNonzeroScores) {
  const auto backend = TwoGroupBackend();
  const std::vector<TokenId> options = {backend.Id("yes"), backend.Id("no")};
  const std::vector<TokenSeq> prompts = {backend.Tokenize("he"),
                                         backend.Tokenize("she")};
  const Vec scores = BackwardIg(backend, prompts, options, AttributionConfig{});
  EXPECT_GT(scores.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(BackwardIg(backend, std::span(prompts).first(1), options,
                          AttributionConfig{}),
               Error);
}

TEST(Ig2, TelescopesOnSingleNeuronBackend) {
  Mat projection = Mat::Zero(4, 1);
  projection(2, 0) = 1.5;
  projection(3, 0) = -0.5;
  const test::FakeBackend backend(
      test::WordVocab({"x", "y"}), projection, Vec::Zero(4),
      [](const std::vector<std::string>&) { return Vec::Constant(1, 0.7); });
  const std::vector<TokenId> pair = {2, 3};
  AttributionConfig config;
  config.n_step = 4096;
  const Vec s = Ig2(backend, backend.Tokenize("x"), pair, 0, 1, config);
  const math::ProbVec p = math::Softmax(Vec{{1.05, -0.35}});
  // At h = 0 both candidates are equally likely.
  EXPECT_NEAR(s[0], std::abs(p[0] - p[1]), 1e-4);
  EXPECT_THROW(Ig2(backend, backend.Tokenize("x"), pair, 0, 0, config), Error);
}

TEST(ForwardIg, Hidden1JointPathIsComplete) {
  const auto backend =
      micro::MicroBackend::Load(test::TestDataPath("micro_golden.mlm"));
  const std::vector<TokenId> groups = {5, 6};
  const TokenSeq prompt = backend.Tokenize("a b c");
  AttributionConfig config;
  config.layer = LayerTag::kHidden1;
  config.path_mode = PathMode::kJoint;
  config.n_step = 4096;
  const Vec s = ForwardIg(backend, prompt, groups, config);
  ASSERT_EQ(s.size(), 32);
  const ProjectionSlice slice = backend.ProjectionSlice(groups);
  const Vec h1 = backend.Snapshot(prompt, LayerTag::kHidden1).h;
  const auto f = BiasFunctional::InverseEntropy();
  const Vec top = backend.LiftHidden1(h1);
  const Vec bottom = backend.LiftHidden1(Vec::Zero(32));
  const double expected =
      math::EvaluateHidden(f, std::span(&slice, 1), std::span(&top, 1)) -
      math::EvaluateHidden(f, std::span(&slice, 1), std::span(&bottom, 1));
  EXPECT_NEAR(s.sum(), expected, 1e-4);
}

TEST(LayerMap, UnsupportedLayerIsCapabilityError) {
  const auto backend = TwoGroupBackend();
  try {
    LayerMap::ForLayer(backend, LayerTag::kHidden1);
    FAIL() << "expected a capability error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapability);
  }
}

// -- Aggregation and masks ---------------------------------------------------

TEST(AverageScores, Examples) {
  const std::vector<Vec> samples = {Vec{{1.0, 2.0}}, Vec{{3.0, -2.0}}};
  EXPECT_EQ(AverageScores(samples), (Vec{{2.0, 0.0}}));
  EXPECT_EQ(AverageScores(std::span(samples).first(1)), samples[0]);
  EXPECT_THROW(AverageScores(std::vector<Vec>{}), Error);
  const std::vector<Vec> ragged = {Vec::Zero(2), Vec::Zero(3)};
  EXPECT_THROW(AverageScores(ragged), Error);
}

TEST(RankAndMask, Examples) {
  const Vec scores{{3.0, 1.0, 2.0, 0.0}};
  auto half = RankAndMask(scores, 0.5, -1.0, LayerTag::kProjectionInput);
  std::vector<int> idx = half.indices();
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<int>{0, 2}));
  EXPECT_EQ(half.clamp_value(), -1.0);
  EXPECT_EQ(RankAndMask(scores, 1.0, 0.0, LayerTag::kProjectionInput)
                .indices()
                .size(),
            4u);
  // Ties go to the lower index.
  const Vec tied{{1.0, 5.0, 5.0, 5.0}};
  idx = RankAndMask(tied, 0.5, 0.0, LayerTag::kProjectionInput).indices();
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<int>{1, 2}));
}

TEST(MaskSize, Examples) {
  EXPECT_EQ(MaskSize(10, 0.3), 3u);
  EXPECT_EQ(MaskSize(10, 0.05), 1u);
  EXPECT_EQ(MaskSize(16, 0.2), 3u);
  EXPECT_EQ(MaskSize(7, 1.0), 7u);
  EXPECT_THROW(MaskSize(10, 0.0), Error);
  EXPECT_THROW(MaskSize(10, 1.5), Error);
}

TEST(RandomMask, SizeDistinctnessAndDeterminismProperty) {
  Rng rng(111);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.Below(64);
    const double beta = rng.Uniform(0.01, 1.0);
    const std::uint64_t seed = rng.Below(1000);
    const auto mask = RandomMask(m, beta, 0.0, seed);
    ASSERT_EQ(mask.indices().size(), MaskSize(m, beta));
    const std::set<int> unique(mask.indices().begin(), mask.indices().end());
    EXPECT_EQ(unique.size(), mask.indices().size());
    EXPECT_LT(*unique.rbegin(), static_cast<int>(m));
    EXPECT_EQ(RandomMask(m, beta, 0.0, seed).indices(), mask.indices());
  }
  EXPECT_NE(RandomMask(64, 0.2, 0.0, 1).indices(),
            RandomMask(64, 0.2, 0.0, 2).indices());
}

TEST(RandomMask, CoversEveryNeuronEventually) {
  std::vector<int> hits(10, 0);
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const InterventionMask mask = RandomMask(10, 0.2, 0.0, seed);
    for (int i : mask.indices()) ++hits[i];
  }
  for (int h : hits) {
    EXPECT_GT(h, 50);
    EXPECT_LT(h, 150);
  }
}

TEST(MaskJson, RoundTripAndMalformed) {
  const InterventionMask mask({4, 1}, -0.5, LayerTag::kHidden1);
  const InterventionMask back = MaskFromJson(MaskToJson(mask));
  EXPECT_EQ(back.indices(), mask.indices());
  EXPECT_EQ(back.clamp_value(), mask.clamp_value());
  EXPECT_EQ(back.layer(), mask.layer());
  try {
    MaskFromJson(nlohmann::json{{"idx", "nope"}});
    FAIL() << "expected a format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
  }
}

TEST(ReportJson, RoundTrip) {
  AttributionConfig config;
  config.beta = 0.3;
  const AttributionReport r = RandomReport(8, 5, config, "abc");
  const AttributionReport back = ReportFromJson(ReportToJson(r));
  EXPECT_EQ(back.scores, r.scores);
  EXPECT_EQ(back.method, Method::kRandom);
  EXPECT_EQ(back.backend_fingerprint, "abc");
  EXPECT_EQ(ReportToJson(back).dump(), ReportToJson(r).dump());
}

// -- Bound -------------------------------------------------------------------

TEST(VerifyBound, EmptyMaskChangesNothing) {
  const auto backend = TwoGroupBackend();
  const std::vector<TokenId> groups = {backend.Id("he"), backend.Id("she")};
  const std::vector<TokenSeq> prompts = {backend.Tokenize("yes")};
  const BoundCheck check =
      VerifyBound(backend, prompts, InterventionMask(),
                  BiasFunctional::InverseEntropy(),
                  backend.ProjectionSlice(groups), 32);
  EXPECT_EQ(check.delta_b, 0.0);
  EXPECT_EQ(check.delta_y_norm, 0.0);
  EXPECT_TRUE(check.satisfied);
}

TEST(VerifyBound, NeuronOrthogonalToSliceChangesNothing) {
  // Neuron 2 has a zero column in the projection, so clamping it cannot move
  // the restricted logits.
  const auto backend = TwoGroupBackend();
  const std::vector<TokenId> groups = {backend.Id("he"), backend.Id("she")};
  const std::vector<TokenSeq> prompts = {backend.Tokenize("he")};
  const InterventionMask mask({2}, 5.0, LayerTag::kProjectionInput);
  const BoundCheck check = VerifyBound(backend, prompts, mask,
                                       BiasFunctional::InverseEntropy(),
                                       backend.ProjectionSlice(groups), 32);
  EXPECT_EQ(check.delta_y_norm, 0.0);
  EXPECT_EQ(check.delta_b, 0.0);
}

TEST(VerifyBoundLogits, HoldsForRandomPairsProperty) {
  Rng rng(112);
  for (auto kind : kAllKinds) {
    for (int trial = 0; trial < 100; ++trial) {
      const Toy t = MakeToy(rng, kind, 1);
      std::vector<Vec> y0, y1;
      for (const auto& s : t.slices) {
        y0.push_back(test::RandomVector(rng, s.bias.size(), 2.0));
        y1.push_back(test::RandomVector(rng, s.bias.size(), 2.0));
      }
      const BoundCheck check = VerifyBoundLogits(t.functional, y0, y1, 32);
      EXPECT_TRUE(check.satisfied)
          << math::FunctionalKindName(kind) << " |dB| " << check.delta_b
          << " bound " << check.sup_grad_norm * check.delta_y_norm;
    }
  }
  const std::vector<Vec> a = {Vec::Zero(2)};
  EXPECT_THROW(
      VerifyBoundLogits(BiasFunctional::InverseEntropy(), a, a, 8), Error);
}

// -- Layer comparison --------------------------------------------------------

TEST(LayerMagnitudeRatio, Examples) {
  EXPECT_DOUBLE_EQ(LayerMagnitudeRatio(Vec{{1.0, -3.0}}, Vec{{2.0, 2.0}}), 1.0);
  EXPECT_DOUBLE_EQ(
      LayerMagnitudeRatio(Vec{{0.5, 0.5, 0.5, 0.5}}, Vec{{-2.0, 2.0}}), 0.25);
  EXPECT_THROW(LayerMagnitudeRatio(Vec{{1.0}}, Vec{{0.0, 0.0}}), Error);
}

TEST(SpearmanCorrelation, Examples) {
  EXPECT_DOUBLE_EQ(
      SpearmanCorrelation(Vec{{1.0, 2.0, 3.0}}, Vec{{10.0, 20.0, 30.0}}), 1.0);
  EXPECT_DOUBLE_EQ(
      SpearmanCorrelation(Vec{{1.0, 2.0, 3.0}}, Vec{{3.0, 2.0, 1.0}}), -1.0);
  // Ties take the average rank: ranks (0.5, 0.5, 2) against (0, 1, 2).
  EXPECT_NEAR(SpearmanCorrelation(Vec{{1.0, 1.0, 2.0}}, Vec{{1.0, 2.0, 3.0}}),
              std::sqrt(3.0) / 2.0, 1e-15);
}

}  // namespace
}  // namespace biasattr::attr
