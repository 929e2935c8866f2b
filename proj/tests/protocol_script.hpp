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

// The client session recorded into tests/data/protocol_session.txt. The
// recorder and the replay test both run it, so the request stream matches.

#pragma once

#include <vector>

#include "biasattr/model.hpp"

namespace biasattr::test {

inline constexpr char kGoldenPrompt[] = "a b c";
inline constexpr char kGoldenSentence[] = "a b c male";

struct SessionResults {
  TokenSeq prompt;
  HiddenSnapshot snapshot;
  math::ProjectionSlice slice;
  std::vector<double> logprobs;
  std::vector<double> masked_logprobs;
  Vec masked_logits;
};

inline SessionResults RunScriptedSession(const ModelBackend& backend) {
  SessionResults r;
  r.prompt = backend.Tokenize(kGoldenPrompt);
  r.snapshot = backend.Snapshot(r.prompt, LayerTag::kProjectionInput);
  const TokenSeq sentence = backend.Tokenize(kGoldenSentence);
  const std::vector<TokenId> groups = {sentence.ids.back(),
                                       sentence.ids.back() + 1};
  r.slice = backend.ProjectionSlice(groups);
  r.logprobs = backend.SpanLogprobs(sentence, {1, sentence.size()}, nullptr,
                                    MaskScope::kAllPositions);
  const InterventionMask mask({0, 3, 5}, -1.0, LayerTag::kProjectionInput);
  r.masked_logprobs = backend.SpanLogprobs(sentence, {1, sentence.size()},
                                           &mask, MaskScope::kAllPositions);
  r.masked_logits = backend.NextTokenLogits(r.prompt, &mask);
  return r;
}

}  // namespace biasattr::test
