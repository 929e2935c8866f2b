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

// Scriptable in-process backend: a word vocabulary, a fixed projection, and a
// caller-supplied map from prompt to hidden vector.

#pragma once

#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "biasattr/bias_math.hpp"
#include "biasattr/model.hpp"

namespace biasattr::test {

class FakeBackend : public ModelBackend {
 public:
  using HiddenFn = std::function<Vec(const std::vector<std::string>& words)>;

  FakeBackend(std::vector<std::string> vocab, Mat projection, Vec bias,
              HiddenFn hidden)
      : vocab_(std::move(vocab)),
        projection_(std::move(projection)),
        bias_(std::move(bias)),
        hidden_(std::move(hidden)) {
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      index_[vocab_[i]] = static_cast<TokenId>(i);
    }
  }

  TokenId Id(const std::string& word) const { return index_.at(word); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  BackendCapabilities Capabilities() const override {
    BackendCapabilities c;
    c.vocab_size = static_cast<std::int64_t>(vocab_.size());
    c.hidden_dim = projection_.cols();
    c.tokenizer_id = "fake-words";
    return c;
  }

  TokenSeq Tokenize(std::string_view text) const override {
    TokenSeq seq;
    seq.text = std::string(text);
    std::istringstream in{std::string(text)};
    for (std::string w; in >> w;) {
      auto it = index_.find(w);
      seq.ids.push_back(it == index_.end() ? TokenId{1} : it->second);
    }
    return seq;
  }

  HiddenSnapshot Snapshot(const TokenSeq& prompt,
                          LayerTag layer) const override {
    Require(layer == LayerTag::kProjectionInput, "fake backend: one layer");
    std::vector<std::string> words;
    for (TokenId id : prompt.ids) words.push_back(vocab_.at(id));
    ++snapshot_calls_;
    return {hidden_(words), layer};
  }

  math::ProjectionSlice ProjectionSlice(
      std::span<const TokenId> ids) const override {
    math::ProjectionSlice s{Mat(static_cast<Eigen::Index>(ids.size()),
                                projection_.cols()),
                            Vec(static_cast<Eigen::Index>(ids.size()))};
    for (std::size_t k = 0; k < ids.size(); ++k) {
      s.rows.row(static_cast<Eigen::Index>(k)) = projection_.row(ids[k]);
      s.bias[static_cast<Eigen::Index>(k)] = bias_[ids[k]];
    }
    return s;
  }

  std::vector<double> SpanLogprobs(const TokenSeq& tokens, TokenSpan span,
                                   const InterventionMask* mask,
                                   MaskScope scope) const override {
    std::vector<double> out;
    for (std::size_t t = span.begin; t < span.end; ++t) {
      TokenSeq prefix{{tokens.ids.begin(), tokens.ids.begin() +
                                               static_cast<std::ptrdiff_t>(t)},
                      {}};
      const bool masked =
          scope == MaskScope::kAllPositions || t + 1 == span.end;
      const Vec z = NextTokenLogits(prefix, masked ? mask : nullptr);
      const double top = z.maxCoeff();
      out.push_back(z[tokens.ids[t]] - top -
                    std::log((z.array() - top).exp().sum()));
    }
    return out;
  }

  Vec NextTokenLogits(const TokenSeq& prompt,
                      const InterventionMask* mask) const override {
    return projection_ * ProjectionInput(*this, prompt, mask) + bias_;
  }

  Vec TokenEmbedding(TokenId id) const override {
    Require(!embeddings_.empty(), "no embeddings configured");
    return embeddings_.at(static_cast<std::size_t>(id));
  }

  void SetEmbeddings(std::vector<Vec> e) { embeddings_ = std::move(e); }

  std::string Fingerprint() const override { return "fake"; }

  int snapshot_calls() const { return snapshot_calls_; }

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, TokenId> index_;
  Mat projection_;
  Vec bias_;
  HiddenFn hidden_;
  std::vector<Vec> embeddings_;
  mutable int snapshot_calls_ = 0;
};

// Vocabulary whose ids 0 and 1 are reserved like the micro model's.
inline std::vector<std::string> WordVocab(std::vector<std::string> words) {
  std::vector<std::string> v = {"<pad>", "<unk>"};
  v.insert(v.end(), words.begin(), words.end());
  return v;
}

}  // namespace biasattr::test
