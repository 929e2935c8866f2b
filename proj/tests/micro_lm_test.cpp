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

#include "biasattr/micro_lm.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace biasattr::micro {
namespace {

// Small grammar with a learnable dependency: the verb predicts the object.
std::vector<std::string> GrammarCorpus(int n, std::uint64_t seed) {
  const std::vector<std::string> subjects = {"the cat", "a dog", "the bird",
                                             "my friend", "the child"};
  const std::vector<std::pair<std::string, std::string>> verb_objects = {
      {"eats", "food"}, {"reads", "books"}, {"drinks", "water"},
      {"plays", "games"}, {"writes", "letters"}};
  Rng rng(seed);
  std::vector<std::string> lines;
  for (int i = 0; i < n; ++i) {
    const auto& s = subjects[rng.Below(subjects.size())];
    const auto& [verb, object] = verb_objects[rng.Below(verb_objects.size())];
    lines.push_back(s + " " + verb + " " + object + " .");
  }
  return lines;
}

struct Encoded {
  Vocabulary vocab;
  std::vector<std::vector<TokenId>> corpus;
};

Encoded Encode(const std::vector<std::string>& lines) {
  Encoded e{Vocabulary::FromCorpus(lines), {}};
  e.corpus = EncodeCorpus(e.vocab, lines);
  return e;
}

MicroConfig SmallConfig(int vocab) {
  MicroConfig c;
  c.vocab_size = vocab;
  c.window = 3;
  c.embed_dim = 6;
  c.hidden1_dim = 12;
  c.hidden2_dim = 8;
  c.seed = 7;
  return c;
}

double UnigramLoss(const std::vector<std::vector<TokenId>>& corpus) {
  std::map<TokenId, double> counts;
  double total = 0.0;
  for (const auto& s : corpus) {
    for (TokenId id : s) {
      counts[id] += 1.0;
      total += 1.0;
    }
  }
  double loss = 0.0;
  for (const auto& [id, n] : counts) loss -= n / total * std::log(n / total);
  return loss;
}

TEST(Forward, ZeroWeightsGiveUniformDistribution) {
  const MicroWeights w = MicroWeights::Zeros(MicroConfig{});
  const std::vector<TokenId> ctx = {2, 3};
  const Activations a = Forward(w, ctx);
  const double expected = -std::log(64.0);
  for (Eigen::Index i = 0; i < a.logits.size(); ++i) {
    EXPECT_NEAR(LogSoftmaxAt(a.logits, i), expected, 1e-12);
  }
}

TEST(Forward, GoldenLogits) {
  const MicroBackend backend =
      MicroBackend::Load(test::TestDataPath("micro_golden.mlm"));
  const auto golden =
      test::LoadJsonFile(test::TestDataPath("micro_golden.json"));
  const Vec expected = test::JsonToVec(golden["logits"]);
  const std::vector<TokenId> ctx = {2, 3, 4};
  const Vec logits = Forward(backend.weights(), ctx).logits;
  ASSERT_EQ(logits.size(), expected.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    EXPECT_NEAR(logits[i], expected[i], 1e-12);
  }
}

TEST(Forward, ShortContextsAreLeftPadded) {
  const MicroWeights w = InitWeights(MicroConfig{});
  const std::vector<TokenId> short_ctx = {9};
  const std::vector<TokenId> padded = {kPadId, kPadId, 9};
  EXPECT_EQ(Forward(w, short_ctx).logits, Forward(w, padded).logits);
  const std::vector<TokenId> long_ctx = {5, 6, 7, 8};
  const std::vector<TokenId> tail = {6, 7, 8};
  EXPECT_EQ(Forward(w, long_ctx).logits, Forward(w, tail).logits);
  EXPECT_EQ(WindowContext(std::vector<TokenId>{}, 2),
            (std::vector<TokenId>{kPadId, kPadId}));
}

TEST(Forward, LogitsFiniteForLargeWeightsProperty) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    MicroWeights w = InitWeights(SmallConfig(12));
    for (auto t : w.Tensors()) {
      for (double& v : t) v *= rng.Uniform(0.0, 1e3);
    }
    std::vector<TokenId> ctx;
    for (std::size_t i = 0; i < rng.Below(5); ++i) {
      ctx.push_back(static_cast<TokenId>(rng.Below(12)));
    }
    EXPECT_TRUE(Forward(w, ctx).logits.allFinite());
  }
}

TEST(Train, DeterministicForFixedSeed) {
  const Encoded e = Encode(GrammarCorpus(40, 3));
  TrainSpec spec;
  spec.epochs = 3;
  spec.batch_size = 8;
  const auto a = Train(SmallConfig(e.vocab.size()), spec, e.corpus);
  const auto b = Train(SmallConfig(e.vocab.size()), spec, e.corpus);
  EXPECT_TRUE(a.weights.BitwiseEqual(b.weights));
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(SerializeWeights(a.weights), SerializeWeights(b.weights));
}

TEST(Train, ZeroLearningRateLeavesInitialWeights) {
  const Encoded e = Encode(GrammarCorpus(20, 4));
  TrainSpec spec;
  spec.epochs = 2;
  spec.learning_rate = 0.0;
  const MicroConfig config = SmallConfig(e.vocab.size());
  const auto result = Train(config, spec, e.corpus);
  EXPECT_TRUE(result.weights.BitwiseEqual(InitWeights(config)));
}

TEST(Train, BeatsUnigramBaseline) {
  const Encoded e = Encode(GrammarCorpus(200, 5));
  TrainSpec spec;
  spec.epochs = 30;
  spec.batch_size = 16;
  spec.learning_rate = 0.01;
  const auto result = Train(SmallConfig(e.vocab.size()), spec, e.corpus);
  const double unigram = UnigramLoss(e.corpus);
  EXPECT_LT(result.epoch_losses.back(), unigram);
  // The object is fully determined by the verb, so the gap is large.
  EXPECT_LT(result.epoch_losses.back(), 0.75 * unigram);
}

TEST(Train, SgdLossDecreasesMonotonically) {
  const Encoded e = Encode(GrammarCorpus(50, 6));
  TrainSpec spec;
  spec.epochs = 10;
  spec.batch_size = 1000;  // full batch
  spec.learning_rate = 1e-3;
  spec.optimizer = Optimizer::kSgd;
  const auto result = Train(SmallConfig(e.vocab.size()), spec, e.corpus);
  for (std::size_t i = 1; i < result.epoch_losses.size(); ++i) {
    EXPECT_LT(result.epoch_losses[i], result.epoch_losses[i - 1]);
  }
}

TEST(Train, RejectsBadSpecs) {
  const std::vector<std::vector<TokenId>> corpus = {{2, 3}};
  TrainSpec spec;
  spec.epochs = 0;
  EXPECT_THROW(Train(SmallConfig(8), spec, corpus), Error);
  spec.epochs = 1;
  spec.learning_rate = -1.0;
  EXPECT_THROW(Train(SmallConfig(8), spec, corpus), Error);
  EXPECT_THROW(Train(SmallConfig(8), TrainSpec{}, {}), Error);
}

TEST(TrainGradient, MatchesFiniteDifferences) {
  const Encoded e = Encode(GrammarCorpus(3, 8));
  const MicroWeights w = InitWeights(SmallConfig(e.vocab.size()));
  const auto examples = MakeExamples(e.corpus);
  EXPECT_LT(AnalyticVsNumericTrainGrad(w, examples), 1e-5);
}

TEST(TrainGradient, StationaryFixtureHasZeroGradient) {
  // Zero weights predict uniformly; one example per target token makes the
  // mean target distribution uniform too, so every gradient vanishes.
  const MicroConfig config = SmallConfig(8);
  const MicroWeights w = MicroWeights::Zeros(config);
  std::vector<std::vector<TokenId>> corpus;
  for (TokenId t = 0; t < 8; ++t) corpus.push_back({2, t});
  std::vector<Example> batch;
  for (const auto& s : corpus) batch.push_back({&s, 1});
  MicroWeights g = MicroWeights::Zeros(config);
  EXPECT_NEAR(BatchLossAndGradient(w, batch, &g), std::log(8.0), 1e-15);
  for (auto t : g.Tensors()) {
    for (double v : t) EXPECT_NEAR(v, 0.0, 1e-16);
  }
  constexpr double kStep = 1e-5;
  MicroWeights probe = w;
  probe.projection_bias[3] = kStep;
  const long double plus = internal::LossExtended(probe, batch);
  probe.projection_bias[3] = -kStep;
  const long double minus = internal::LossExtended(probe, batch);
  EXPECT_NEAR(static_cast<double>((plus - minus) / (2 * kStep)), 0.0, 1e-10);
}

TEST(TrainGradient, SingleExampleEqualsDuplicatedBatch) {
  const std::vector<std::vector<TokenId>> corpus = {{2, 5, 3, 4}};
  const MicroWeights w = InitWeights(SmallConfig(8));
  const Example one = {&corpus[0], 2};
  const std::vector<Example> single = {one};
  const std::vector<Example> twice = {one, one};
  MicroWeights g1 = MicroWeights::Zeros(w.config);
  MicroWeights g2 = MicroWeights::Zeros(w.config);
  const double l1 = BatchLossAndGradient(w, single, &g1);
  const double l2 = BatchLossAndGradient(w, twice, &g2);
  EXPECT_NEAR(l1, l2, 1e-14);
  const auto a = g1.Tensors();
  const auto b = g2.Tensors();
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      EXPECT_NEAR(a[t][i], b[t][i], 1e-14);
    }
  }
}

TEST(Serialization, RoundTripIsBitExact) {
  const MicroWeights w = InitWeights(SmallConfig(10));
  const std::string bytes = SerializeWeights(w);
  const MicroWeights back = DeserializeWeights(bytes);
  EXPECT_TRUE(back.BitwiseEqual(w));
  EXPECT_EQ(SerializeWeights(back), bytes);
}

TEST(Serialization, RejectsCorruptInput) {
  const std::string bytes = SerializeWeights(InitWeights(SmallConfig(10)));
  auto expect_format_error = [](const std::string& b, const std::string& what) {
    try {
      DeserializeWeights(b, "probe");
      FAIL() << "expected a format error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kFormat);
      EXPECT_NE(std::string(e.what()).find(what), std::string::npos)
          << e.what();
    }
  };
  expect_format_error(bytes.substr(0, bytes.size() - 3), "offset");
  expect_format_error(bytes + "x", "offset");
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  expect_format_error(bad_magic, "magic");
  std::string bad_version = bytes;
  bad_version[4] = 2;
  expect_format_error(bad_version, "version 2");
  std::string nan = bytes;
  const double q = std::nan("");
  std::memcpy(nan.data() + nan.size() - sizeof(double), &q, sizeof(double));
  expect_format_error(nan, "non-finite");
}

TEST(Vocabulary, ReservedTokensAndLookup) {
  const std::vector<std::string> lines = {"b a", "a c"};
  const Vocabulary v = Vocabulary::FromCorpus(lines);
  EXPECT_EQ(v.Token(kPadId), kPadToken);
  EXPECT_EQ(v.Token(kUnknownId), kUnknownToken);
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.Lookup("zzz"), kUnknownId);
  EXPECT_FALSE(v.Contains("zzz"));
  EXPECT_EQ(Vocabulary::FromTokens(v.tokens()).tokens(), v.tokens());
  EXPECT_THROW(Vocabulary::FromTokens({"a", "b"}), Error);
}

TEST(ChainGradToHidden1, LinearRegimeIsTranspose) {
  // Zero hidden weights keep hidden2 at zero, where tanh has unit slope.
  MicroConfig c = SmallConfig(8);
  MicroWeights w = MicroWeights::Zeros(c);
  w.layer2 = Mat::Zero(c.hidden2_dim, c.hidden1_dim);
  w.layer2(0, 0) = 2.0;
  w.layer2(1, 3) = -1.0;
  const Vec h1 = Vec::Zero(c.hidden1_dim);
  Vec g = Vec::Zero(c.hidden2_dim);
  g[0] = 1.0;
  g[1] = 0.5;
  const Vec got = ChainGradToHidden1(w, h1, g);
  EXPECT_DOUBLE_EQ(got[0], 2.0);
  EXPECT_DOUBLE_EQ(got[3], -0.5);
  EXPECT_EQ(got.cwiseAbs().sum(), 2.5);
}

TEST(ChainGradToHidden1, IdentityLayerInLinearRegime) {
  MicroConfig c = SmallConfig(8);
  c.hidden1_dim = c.hidden2_dim;
  MicroWeights w = MicroWeights::Zeros(c);
  w.layer2 = Mat::Identity(c.hidden2_dim, c.hidden1_dim);
  const Vec h1 = Vec::Constant(c.hidden1_dim, 1e-4);
  Rng rng(3);
  const Vec g = test::RandomVector(rng, c.hidden2_dim);
  const Vec got = ChainGradToHidden1(w, h1, g);
  for (Eigen::Index i = 0; i < g.size(); ++i) EXPECT_NEAR(got[i], g[i], 1e-6);
}

TEST(ChainGradToHidden1, SaturatedUnitsPassNothing) {
  MicroConfig c = SmallConfig(8);
  MicroWeights w = MicroWeights::Zeros(c);
  w.bias2 = Vec::Constant(c.hidden2_dim, 40.0);
  w.layer2 = Mat::Ones(c.hidden2_dim, c.hidden1_dim);
  const Vec got = ChainGradToHidden1(w, Vec::Zero(c.hidden1_dim),
                                     Vec::Ones(c.hidden2_dim));
  EXPECT_TRUE(got.isZero(1e-30));
}

TEST(ChainGradToHidden1, MatchesFiniteDifferencesProperty) {
  Rng rng(21);
  const MicroWeights w = InitWeights(SmallConfig(8));
  for (int trial = 0; trial < 50; ++trial) {
    const Vec h1 = test::RandomVector(rng, w.config.hidden1_dim);
    const Vec g = test::RandomVector(rng, w.config.hidden2_dim);
    const Vec analytic = ChainGradToHidden1(w, h1, g);
    constexpr double kStep = 1e-6;
    for (int i = 0; i < w.config.hidden1_dim; ++i) {
      Vec plus = h1, minus = h1;
      plus[i] += kStep;
      minus[i] -= kStep;
      const double numeric =
          (g.dot(LiftHidden1(w, plus)) - g.dot(LiftHidden1(w, minus))) /
          (2 * kStep);
      EXPECT_NEAR(analytic[i], numeric, 1e-7 * (1.0 + std::abs(numeric)));
    }
  }
}

TEST(MicroBackend, SaveLoadPreservesFingerprint) {
  const Encoded e = Encode(GrammarCorpus(10, 9));
  const MicroWeights w = InitWeights(SmallConfig(e.vocab.size()));
  const std::string path = ::testing::TempDir() + "micro_roundtrip.mlm";
  SaveModel(w, e.vocab, path);
  const MicroBackend loaded = MicroBackend::Load(path);
  const MicroBackend direct(w, e.vocab);
  EXPECT_EQ(loaded.Fingerprint(),
            direct.Fingerprint());
  EXPECT_TRUE(loaded.weights().BitwiseEqual(w));
}

TEST(MicroBackend, LiftOfHidden1SnapshotIsProjectionInput) {
  const MicroBackend backend =
      MicroBackend::Load(test::TestDataPath("micro_golden.mlm"));
  const TokenSeq prompt = backend.Tokenize("c a");
  const Vec h1 = backend.Snapshot(prompt, LayerTag::kHidden1).h;
  const Vec h2 = backend.Snapshot(prompt, LayerTag::kProjectionInput).h;
  EXPECT_EQ(LiftHidden1(backend.weights(), h1), h2);
}

}  // namespace
}  // namespace biasattr::micro
