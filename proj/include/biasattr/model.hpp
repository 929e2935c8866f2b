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

// The model-backend abstraction. A backend exposes the input of its
// projection layer (the vector that the final linear map turns into
// vocabulary logits), rows of that projection, and teacher-forced token
// log-probabilities with optional neuron clamping.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"

namespace biasattr {

using TokenId = std::int32_t;

struct TokenSeq {
  std::vector<TokenId> ids;
  std::string text;

  std::size_t size() const { return ids.size(); }
};

enum class LayerTag { kProjectionInput, kHidden1 };

inline std::string_view LayerTagName(LayerTag layer) {
  return layer == LayerTag::kProjectionInput ? "proj_input" : "hidden1";
}

inline LayerTag ParseLayerTag(std::string_view name) {
  if (name == "proj_input") return LayerTag::kProjectionInput;
  if (name == "hidden1") return LayerTag::kHidden1;
  Fail(ErrorKind::kConfig, "unknown layer '", name,
       "' (expected proj_input or hidden1)");
}

struct HiddenSnapshot {
  Vec h;
  LayerTag layer = LayerTag::kProjectionInput;
};

// Neurons clamped to a constant at one layer.
class InterventionMask {
 public:
  InterventionMask() = default;

  // Sorts the indices; rejects duplicates and negatives.
  InterventionMask(std::vector<int> indices, double clamp_value,
                   LayerTag layer)
      : indices_(std::move(indices)), clamp_value_(clamp_value), layer_(layer) {
    std::sort(indices_.begin(), indices_.end());
    Require(std::adjacent_find(indices_.begin(), indices_.end()) ==
                indices_.end(),
            "InterventionMask indices must be distinct");
    Require(indices_.empty() || indices_.front() >= 0,
            "InterventionMask indices must be non-negative");
    Require(std::isfinite(clamp_value_), "clamp value must be finite");
  }

  const std::vector<int>& indices() const { return indices_; }
  double clamp_value() const { return clamp_value_; }
  LayerTag layer() const { return layer_; }
  bool empty() const { return indices_.empty(); }

  void CheckFits(Eigen::Index hidden_dim) const {
    Require(indices_.empty() || indices_.back() < hidden_dim,
            "mask index ", indices_.empty() ? 0 : indices_.back(),
            " out of range for hidden_dim ", hidden_dim);
  }

  friend bool operator==(const InterventionMask&,
                         const InterventionMask&) = default;

 private:
  std::vector<int> indices_;
  double clamp_value_ = 0.0;
  LayerTag layer_ = LayerTag::kProjectionInput;
};

// In-place clamp of a raw activation vector.
inline void ClampInPlace(Vec& h, const InterventionMask& mask) {
  mask.CheckFits(h.size());
  for (int i : mask.indices()) h[i] = mask.clamp_value();
}

inline HiddenSnapshot ApplyMask(const HiddenSnapshot& snapshot,
                                const InterventionMask& mask) {
  Require(snapshot.layer == mask.layer(), "mask targets layer ",
          LayerTagName(mask.layer()), " but the snapshot is at ",
          LayerTagName(snapshot.layer));
  HiddenSnapshot out = snapshot;
  ClampInPlace(out.h, mask);
  return out;
}

struct BackendCapabilities {
  std::int64_t vocab_size = 0;
  std::int64_t hidden_dim = 0;
  std::int64_t hidden1_dim = 0;
  bool supports_hidden1 = false;
  bool supports_embeddings = false;
  std::string tokenizer_id;

  std::int64_t DimAt(LayerTag layer) const {
    if (layer == LayerTag::kProjectionInput) return hidden_dim;
    if (!supports_hidden1) {
      Fail(ErrorKind::kCapability, "backend does not expose layer hidden1");
    }
    return hidden1_dim;
  }
};

// Where a mask acts while scoring a multi-token span.
enum class MaskScope { kAllPositions, kFinalPositionOnly };

inline std::string_view MaskScopeName(MaskScope scope) {
  return scope == MaskScope::kAllPositions ? "all_positions" : "final_position";
}

// Half-open range [begin, end) of token positions.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual BackendCapabilities Capabilities() const = 0;
  virtual TokenSeq Tokenize(std::string_view text) const = 0;

  // Activation at `layer` for predicting the token after the full prompt.
  virtual HiddenSnapshot Snapshot(const TokenSeq& prompt,
                                  LayerTag layer) const = 0;

  // Projection rows and biases for `token_ids`, in request order.
  virtual math::ProjectionSlice ProjectionSlice(
      std::span<const TokenId> token_ids) const = 0;

  // Per-position log p(tokens[t] | tokens[<t]) for t in span.
  virtual std::vector<double> SpanLogprobs(const TokenSeq& tokens,
                                           TokenSpan span,
                                           const InterventionMask* mask,
                                           MaskScope scope) const = 0;

  // Full-vocabulary next-token logits after the prompt.
  virtual Vec NextTokenLogits(const TokenSeq& prompt,
                              const InterventionMask* mask) const = 0;

  // Maps a hidden1 activation to the projection input it produces.
  virtual Vec LiftHidden1(const Vec& /*hidden1*/) const {
    Fail(ErrorKind::kCapability, "backend cannot lift hidden1 activations");
  }

  // Vector-Jacobian product of LiftHidden1 at `hidden1`.
  virtual Vec PullBackToHidden1(const Vec& /*hidden1*/,
                                const Vec& /*grad_projection_input*/) const {
    Fail(ErrorKind::kCapability, "backend cannot chain gradients to hidden1");
  }

  // Id the tokenizer emits for out-of-vocabulary text, if it has one.
  virtual std::optional<TokenId> UnknownTokenId() const { return std::nullopt; }

  virtual Vec TokenEmbedding(TokenId /*id*/) const {
    Fail(ErrorKind::kCapability, "backend does not expose token embeddings");
  }

  // Stable identifier of the weights behind this backend.
  virtual std::string Fingerprint() const = 0;
};

// Projection input for `prompt`, with the mask applied at its layer.
inline Vec ProjectionInput(const ModelBackend& backend, const TokenSeq& prompt,
                           const InterventionMask* mask) {
  if (mask == nullptr || mask->layer() == LayerTag::kProjectionInput) {
    HiddenSnapshot snap = backend.Snapshot(prompt, LayerTag::kProjectionInput);
    if (mask != nullptr) ClampInPlace(snap.h, *mask);
    return snap.h;
  }
  HiddenSnapshot first = backend.Snapshot(prompt, LayerTag::kHidden1);
  ClampInPlace(first.h, *mask);
  return backend.LiftHidden1(first.h);
}

inline math::ProbVec NextTokenDist(const ModelBackend& backend,
                                   const TokenSeq& prompt,
                                   std::span<const TokenId> candidates,
                                   const InterventionMask* mask = nullptr) {
  const math::ProjectionSlice slice = backend.ProjectionSlice(candidates);
  return math::RestrictedSoftmax(slice, ProjectionInput(backend, prompt, mask));
}

// Candidate probabilities taken from the full-vocabulary softmax, without
// renormalizing over the candidates.
inline Vec FullVocabularyCandidateProbs(const ModelBackend& backend,
                                        const TokenSeq& prompt,
                                        std::span<const TokenId> candidates,
                                        const InterventionMask* mask = nullptr) {
  const math::ProbVec full =
      math::Softmax(backend.NextTokenLogits(prompt, mask));
  Vec out(static_cast<Eigen::Index>(candidates.size()));
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    Require(candidates[i] >= 0 && candidates[i] < full.size(),
            "candidate id out of range: ", candidates[i]);
    out[static_cast<Eigen::Index>(i)] = full[candidates[i]];
  }
  return out;
}

struct ScoringOptions {
  bool length_normalized = true;
  MaskScope scope = MaskScope::kAllPositions;
};

// Mean (or summed) token log-probability over `span` under teacher forcing.
inline double SequenceLogprob(const ModelBackend& backend,
                              const TokenSeq& tokens, TokenSpan span,
                              const InterventionMask* mask = nullptr,
                              ScoringOptions options = {}) {
  Require(span.begin < span.end, "scored span is empty");
  Require(span.end <= tokens.size(), "scored span [", span.begin, ", ",
          span.end, ") exceeds sequence length ", tokens.size());
  const std::vector<double> logprobs =
      backend.SpanLogprobs(tokens, span, mask, options.scope);
  double total = 0.0;
  for (double lp : logprobs) total += lp;
  return options.length_normalized
             ? total / static_cast<double>(logprobs.size())
             : total;
}

}  // namespace biasattr
