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

// Stereotype cue detection: render templates, average the group distribution
// over templates, rank candidate words by the entropy of that average, and
// build the prompt sets used for attribution.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"
#include "biasattr/model.hpp"
#include "json.hpp"

namespace biasattr::cues {

inline constexpr std::string_view kAttributeSlot = "[Demographic_Attribute]";
inline constexpr std::string_view kAdjectiveSlot = "[Stereotype_Adjective]";
inline constexpr std::string_view kNounSlot = "[Stereotype_Noun]";
inline constexpr std::string_view kGroupSlot = "[Demographic_Group]";

enum class CueKind { kAdjective, kNoun };

inline std::string_view CueKindName(CueKind kind) {
  return kind == CueKind::kAdjective ? "adjective" : "noun";
}

inline std::string_view CueSlot(CueKind kind) {
  return kind == CueKind::kAdjective ? kAdjectiveSlot : kNounSlot;
}

inline std::size_t CountOccurrences(std::string_view text,
                                    std::string_view needle) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos;
       pos = text.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

inline std::string ReplaceAll(std::string text, std::string_view from,
                              std::string_view to) {
  for (std::size_t pos = text.find(from); pos != std::string::npos;
       pos = text.find(from, pos + to.size())) {
    text.replace(pos, from.size(), to);
  }
  return text;
}

inline std::string Trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

struct Template {
  std::string text;
  CueKind kind = CueKind::kAdjective;

  // Infers the kind from the cue placeholder.
  static Template Parse(std::string_view raw) {
    std::string text = Trim(raw);
    const std::size_t adjectives = CountOccurrences(text, kAdjectiveSlot);
    const std::size_t nouns = CountOccurrences(text, kNounSlot);
    Require(adjectives + nouns == 1, "template must contain exactly one of ",
            kAdjectiveSlot, " or ", kNounSlot, ": \"", text, "\"");
    Require(CountOccurrences(text, kGroupSlot) == 1,
            "template must contain ", kGroupSlot, " exactly once: \"", text,
            "\"");
    return {std::move(text),
            adjectives == 1 ? CueKind::kAdjective : CueKind::kNoun};
  }
};

inline std::vector<std::string> ReadNonEmptyLines(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot open ", path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    std::string t = Trim(line);
    if (!t.empty() && t[0] != '#') out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<Template> LoadTemplates(const std::string& path) {
  std::vector<Template> out;
  for (const auto& line : ReadNonEmptyLines(path)) {
    try {
      out.push_back(Template::Parse(line));
    } catch (const Error& e) {
      Fail(ErrorKind::kConfig, path, ": ", e.what());
    }
  }
  Require(!out.empty(), "no templates in ", path);
  return out;
}

inline std::vector<std::string> LoadWordList(const std::string& path) {
  return ReadNonEmptyLines(path);
}

struct DemographicSchema {
  std::string attribute;
  std::vector<std::string> groups;
  // Optional per-group word lists for the embedding similarity check.
  std::map<std::string, std::vector<std::string>> reference_vocab;

  void Validate() const {
    Require(!attribute.empty(), "schema attribute name is empty");
    Require(groups.size() >= 2, "schema '", attribute, "' has ", groups.size(),
            " group(s); fewer than 2 groups");
    std::set<std::string> seen;
    for (const auto& g : groups) {
      Require(!Trim(g).empty(), "schema has an empty group label");
      Require(seen.insert(g).second, "duplicate group label '", g, "'");
    }
  }

  std::optional<std::size_t> GroupIndex(std::string_view label) const {
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (groups[i] == label) return i;
    }
    return std::nullopt;
  }

  static DemographicSchema FromJson(const nlohmann::json& j) {
    DemographicSchema s;
    try {
      s.attribute = j.at("attribute").get<std::string>();
      s.groups = j.at("groups").get<std::vector<std::string>>();
      if (j.contains("reference_vocab")) {
        s.reference_vocab = j.at("reference_vocab")
                                .get<std::map<std::string,
                                              std::vector<std::string>>>();
      }
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kConfig, "malformed schema: ", e.what());
    }
    s.Validate();
    return s;
  }

  static DemographicSchema Load(const std::string& path) {
    std::ifstream in(path);
    if (!in) Fail(ErrorKind::kConfig, "cannot open schema ", path);
    try {
      return FromJson(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kConfig, path, ": ", e.what());
    } catch (const Error& e) {
      Fail(ErrorKind::kConfig, path, ": ", e.what());
    }
  }

  nlohmann::json ToJson() const {
    nlohmann::json j = {{"attribute", attribute}, {"groups", groups}};
    if (!reference_vocab.empty()) j["reference_vocab"] = reference_vocab;
    return j;
  }
};

// First token of " " + word, the form a word takes mid-sentence.
inline TokenId FirstToken(const ModelBackend& backend, std::string_view word) {
  const TokenSeq seq = backend.Tokenize(StrCat(" ", word));
  Require(!seq.ids.empty(), "'", word, "' tokenizes to nothing");
  const std::optional<TokenId> unknown = backend.UnknownTokenId();
  Require(!unknown || seq.ids[0] != *unknown, "'", word,
          "' is not in the backend vocabulary");
  return seq.ids[0];
}

// First tokens of `words`; two words sharing a first token is an error, since
// their probabilities could not be told apart.
inline std::vector<TokenId> DistinctFirstTokens(
    const ModelBackend& backend, std::span<const std::string> words,
    std::string_view what) {
  std::vector<TokenId> ids;
  std::map<TokenId, std::string> owner;
  for (const auto& w : words) {
    const TokenId id = FirstToken(backend, w);
    auto [it, inserted] = owner.emplace(id, w);
    Require(inserted, what, " '", it->second, "' and '", w,
            "' share first token ", id);
    ids.push_back(id);
  }
  return ids;
}

inline std::vector<TokenId> GroupTokenIds(const DemographicSchema& schema,
                                          const ModelBackend& backend) {
  schema.Validate();
  return DistinctFirstTokens(backend, schema.groups, "group labels");
}

// -- Prompt shells -------------------------------------------------------------

inline constexpr std::string_view kForwardInstruction =
    "Based on the context, fill in the blank using the candidate options. "
    "Only answer with ONE word from the options without any other words.\n"
    "Context: {question}\n"
    "Options: {options}\n";

inline constexpr std::string_view kBackwardInstruction =
    "According to the {attribute} of the person, fill in the blank in the "
    "sentence using the following options.\n"
    "Sentence: {question}\n"
    "Options: {options}\n"
    "Only provide a single word from the options, nothing else.\n";

// How an open slot becomes a next-token prompt. Prefix style suits models
// without instruction following: the forward prompt stops right before the
// group slot, and the backward prompt blanks the cue and appends a marker.
struct PromptShell {
  enum class Style { kPrefix, kInstruction };
  Style style = Style::kPrefix;
  std::string blank = "_";
  std::string backward_marker = "answer";
  std::string forward_text = std::string(kForwardInstruction);
  std::string backward_text = std::string(kBackwardInstruction);

  static PromptShell Prefix() { return {}; }
  static PromptShell Instruction() {
    PromptShell s;
    s.style = Style::kInstruction;
    return s;
  }

  static PromptShell FromJson(const nlohmann::json& j) {
    PromptShell s;
    const std::string style = j.value("style", std::string("prefix"));
    if (style == "prefix") {
      s.style = Style::kPrefix;
    } else if (style == "instruction") {
      s.style = Style::kInstruction;
    } else {
      Fail(ErrorKind::kConfig, "unknown prompt style '", style,
           "' (expected prefix or instruction)");
    }
    s.blank = j.value("blank", s.blank);
    s.backward_marker = j.value("backward_marker", s.backward_marker);
    s.forward_text = j.value("forward_text", s.forward_text);
    s.backward_text = j.value("backward_text", s.backward_text);
    return s;
  }

  nlohmann::json ToJson() const {
    return {{"style", style == Style::kPrefix ? "prefix" : "instruction"},
            {"blank", blank},
            {"backward_marker", backward_marker},
            {"forward_text", forward_text},
            {"backward_text", backward_text}};
  }
};

inline std::string JoinWords(std::span<const std::string> words,
                             std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) out += sep;
    out += words[i];
  }
  return out;
}

inline void CheckNoPlaceholders(const std::string& text) {
  for (std::string_view slot :
       {kAttributeSlot, kAdjectiveSlot, kNounSlot, kGroupSlot}) {
    Require(text.find(slot) == std::string::npos, "unfilled placeholder ",
            slot, " in \"", text, "\"");
  }
}

// Fills attribute and cue. With a group the result is the full sentence;
// without one it is the forward prompt whose next token is the group.
inline std::string Render(const Template& t, std::string_view cue,
                          CueKind cue_kind, const DemographicSchema& schema,
                          const std::optional<std::string>& group = std::nullopt,
                          const PromptShell& shell = {}) {
  Require(cue_kind == t.kind, "cue kind ", CueKindName(cue_kind),
          " does not match template kind ", CueKindName(t.kind));
  Require(!Trim(cue).empty(), "cue is empty");
  std::string text = ReplaceAll(t.text, kAttributeSlot, schema.attribute);
  text = ReplaceAll(text, CueSlot(t.kind), cue);
  if (group) {
    Require(schema.GroupIndex(*group).has_value(), "group '", *group,
            "' is not in schema '", schema.attribute, "'");
    text = ReplaceAll(text, kGroupSlot, *group);
    CheckNoPlaceholders(text);
    return text;
  }
  if (shell.style == PromptShell::Style::kPrefix) {
    text = Trim(text.substr(0, text.find(kGroupSlot)));
    CheckNoPlaceholders(text);
    return text;
  }
  text = ReplaceAll(text, kGroupSlot, shell.blank);
  CheckNoPlaceholders(text);
  std::string prompt = ReplaceAll(shell.forward_text, "{question}", text);
  return ReplaceAll(prompt, "{options}", JoinWords(schema.groups, ", "));
}

// The group-filled prompt whose next token is a cue.
inline std::string RenderBackward(const Template& t,
                                  const DemographicSchema& schema,
                                  const std::string& group,
                                  std::span<const std::string> options,
                                  const PromptShell& shell = {}) {
  Require(schema.GroupIndex(group).has_value(), "group '", group,
          "' is not in schema '", schema.attribute, "'");
  std::string text = ReplaceAll(t.text, kAttributeSlot, schema.attribute);
  text = ReplaceAll(text, CueSlot(t.kind), shell.blank);
  text = ReplaceAll(text, kGroupSlot, group);
  CheckNoPlaceholders(text);
  if (shell.style == PromptShell::Style::kPrefix) {
    return StrCat(text, " ", shell.backward_marker);
  }
  std::string prompt = ReplaceAll(shell.backward_text, "{question}", text);
  prompt = ReplaceAll(prompt, "{attribute}", schema.attribute);
  return ReplaceAll(prompt, "{options}", JoinWords(options, ", "));
}

// -- Entropy ranking -----------------------------------------------------------

struct CueScore {
  std::string word;
  CueKind kind = CueKind::kAdjective;
  math::ProbVec aggregate;
  double entropy = 0.0;
  std::size_t templates_used = 0;
};

struct EntropyOptions {
  std::size_t workers = 1;
  // Average over the templates that succeeded instead of failing the cue.
  bool skip_failed = false;
};

inline std::vector<CueScore> ComputeEntropies(
    std::span<const std::string> candidates, std::span<const Template> templates,
    const DemographicSchema& schema, const ModelBackend& backend,
    const PromptShell& shell = {}, const EntropyOptions& options = {}) {
  Require(!candidates.empty(), "candidate list is empty");
  Require(!templates.empty(), "template list is empty");
  const CueKind kind = templates[0].kind;
  for (const auto& t : templates) {
    Require(t.kind == kind, "templates mix adjective and noun kinds");
  }
  const std::vector<TokenId> group_ids = GroupTokenIds(schema, backend);
  const std::size_t n_templates = templates.size();

  struct Cell {
    std::optional<Vec> dist;
    std::string error;
  };
  std::vector<Cell> cells(candidates.size() * n_templates);
  ParallelFor(cells.size(), options.workers, [&](std::size_t i) {
    const std::string& word = candidates[i / n_templates];
    const Template& t = templates[i % n_templates];
    try {
      const TokenSeq prompt =
          backend.Tokenize(Render(t, word, kind, schema, std::nullopt, shell));
      cells[i].dist = NextTokenDist(backend, prompt, group_ids).values();
    } catch (const std::exception& e) {
      cells[i].error = e.what();
    }
  });

  std::vector<CueScore> out;
  out.reserve(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    Vec total = Vec::Zero(static_cast<Eigen::Index>(group_ids.size()));
    std::size_t used = 0;
    for (std::size_t t = 0; t < n_templates; ++t) {
      const Cell& cell = cells[c * n_templates + t];
      if (!cell.dist) {
        if (!options.skip_failed) {
          Fail(ErrorKind::kBackend, "cue '", candidates[c], "', template ", t,
               " (\"", templates[t].text, "\"): ", cell.error);
        }
        continue;
      }
      total += *cell.dist;
      ++used;
    }
    if (used == 0) {
      Fail(ErrorKind::kBackend, "cue '", candidates[c],
           "': every template query failed");
    }
    Vec mean = total / static_cast<double>(used);
    mean /= mean.sum();  // absorb rounding drift of the average
    auto aggregate = math::ProbVec::FromValues(mean);
    const double entropy = math::Entropy(aggregate);
    out.push_back({candidates[c], kind, std::move(aggregate), entropy, used});
  }
  return out;
}

enum class SelectionMode { kEntropyRank, kFirstOfGroup };

inline SelectionMode ParseSelectionMode(std::string_view name) {
  if (name == "entropy") return SelectionMode::kEntropyRank;
  if (name == "first_of_group") return SelectionMode::kFirstOfGroup;
  Fail(ErrorKind::kConfig, "unknown selection mode '", name,
       "' (expected entropy or first_of_group)");
}

// Scores sorted by ascending entropy, ties broken lexicographically.
inline std::vector<CueScore> SortByEntropy(std::vector<CueScore> scores) {
  std::stable_sort(scores.begin(), scores.end(),
                   [](const CueScore& a, const CueScore& b) {
                     if (a.entropy != b.entropy) return a.entropy < b.entropy;
                     return a.word < b.word;
                   });
  return scores;
}

inline std::vector<std::string> SelectCues(std::span<const CueScore> scores,
                                           std::size_t k, SelectionMode mode) {
  Require(k >= 1, "k must be >= 1");
  Require(k <= scores.size(), "k = ", k, " exceeds the ", scores.size(),
          " scored candidates");
  std::vector<std::string> out;
  if (mode == SelectionMode::kEntropyRank) {
    const auto sorted =
        SortByEntropy(std::vector<CueScore>(scores.begin(), scores.end()));
    for (std::size_t i = 0; i < k; ++i) out.push_back(sorted[i].word);
    return out;
  }
  // k contiguous groups in input order; the first n % k groups are one longer.
  const std::size_t n = scores.size();
  std::size_t start = 0;
  for (std::size_t g = 0; g < k; ++g) {
    out.push_back(scores[start].word);
    start += n / k + (g < n % k ? 1 : 0);
  }
  return out;
}

// -- Attribution datasets ------------------------------------------------------

struct ForwardSample {
  std::string cue;
  std::size_t template_index = 0;
  std::string prompt;
};

struct BackwardSubset {
  std::size_t template_index = 0;
  std::vector<std::string> prompts;  // one per group, in schema order
  std::vector<std::string> options;  // candidate cues
};

inline void CheckDatasetInputs(std::span<const std::string> cues,
                               std::span<const Template> templates) {
  Require(!cues.empty(), "cue list is empty");
  Require(!templates.empty(), "template list is empty");
}

inline std::vector<ForwardSample> BuildForwardSamples(
    std::span<const std::string> cues, std::span<const Template> templates,
    const DemographicSchema& schema, const PromptShell& shell = {}) {
  CheckDatasetInputs(cues, templates);
  std::vector<ForwardSample> out;
  out.reserve(cues.size() * templates.size());
  for (const auto& cue : cues) {
    for (std::size_t t = 0; t < templates.size(); ++t) {
      out.push_back({cue, t,
                     Render(templates[t], cue, templates[t].kind, schema,
                            std::nullopt, shell)});
    }
  }
  return out;
}

inline std::vector<BackwardSubset> BuildBackwardSubsets(
    std::span<const std::string> cues, std::span<const Template> templates,
    const DemographicSchema& schema, const PromptShell& shell = {}) {
  CheckDatasetInputs(cues, templates);
  schema.Validate();
  std::vector<BackwardSubset> out;
  out.reserve(templates.size());
  for (std::size_t t = 0; t < templates.size(); ++t) {
    BackwardSubset subset;
    subset.template_index = t;
    subset.options.assign(cues.begin(), cues.end());
    for (const auto& g : schema.groups) {
      subset.prompts.push_back(
          RenderBackward(templates[t], schema, g, subset.options, shell));
    }
    out.push_back(std::move(subset));
  }
  return out;
}

inline nlohmann::json ForwardSamplesToJson(std::span<const ForwardSample> s) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& x : s) {
    out.push_back(
        {{"cue", x.cue}, {"template", x.template_index}, {"prompt", x.prompt}});
  }
  return out;
}

inline nlohmann::json BackwardSubsetsToJson(std::span<const BackwardSubset> s) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& x : s) {
    out.push_back({{"template", x.template_index},
                   {"prompts", x.prompts},
                   {"options", x.options}});
  }
  return out;
}

// -- Embedding similarity ------------------------------------------------------

struct SimilarityResult {
  std::vector<double> sim_per_group;  // schema order
  double diff = 0.0;
};

inline double Cosine(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  Require(na > 0.0 && nb > 0.0, "zero-norm embedding");
  return a.dot(b) / (na * nb);
}

// Sim_g: mean cosine between each cue embedding and the mean embedding of
// group g's reference words. Diff: mean |cos_g1 - cos_g2| over cues, averaged
// over all group pairs.
inline SimilarityResult CueSimilarityDiff(
    std::span<const Vec> cue_embeddings,
    std::span<const Vec> group_vocab_embeddings) {
  Require(!cue_embeddings.empty(), "no cue embeddings");
  Require(group_vocab_embeddings.size() >= 2,
          "need vocabulary embeddings for at least 2 groups");
  const std::size_t n_groups = group_vocab_embeddings.size();
  std::vector<std::vector<double>> cos(cue_embeddings.size(),
                                       std::vector<double>(n_groups));
  SimilarityResult r;
  r.sim_per_group.assign(n_groups, 0.0);
  for (std::size_t i = 0; i < cue_embeddings.size(); ++i) {
    for (std::size_t g = 0; g < n_groups; ++g) {
      cos[i][g] = Cosine(cue_embeddings[i], group_vocab_embeddings[g]);
      r.sim_per_group[g] += cos[i][g];
    }
  }
  for (double& s : r.sim_per_group) s /= static_cast<double>(cos.size());
  double pairs_total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < n_groups; ++a) {
    for (std::size_t b = a + 1; b < n_groups; ++b) {
      double total = 0.0;
      for (const auto& row : cos) total += std::abs(row[a] - row[b]);
      pairs_total += total / static_cast<double>(cos.size());
      ++pairs;
    }
  }
  r.diff = pairs_total / static_cast<double>(pairs);
  return r;
}

inline SimilarityResult CueSimilarityDiff(std::span<const std::string> cues,
                                          const DemographicSchema& schema,
                                          const ModelBackend& backend) {
  auto embed = [&backend](const std::string& w) {
    return backend.TokenEmbedding(FirstToken(backend, w));
  };
  std::vector<Vec> cue_vecs;
  for (const auto& c : cues) cue_vecs.push_back(embed(c));
  std::vector<Vec> group_vecs;
  for (const auto& g : schema.groups) {
    auto it = schema.reference_vocab.find(g);
    Require(it != schema.reference_vocab.end() && !it->second.empty(),
            "schema has no reference vocabulary for group '", g, "'");
    Vec mean = Vec::Zero(cue_vecs.at(0).size());
    for (const auto& w : it->second) mean += embed(w);
    group_vecs.push_back(mean / static_cast<double>(it->second.size()));
  }
  return CueSimilarityDiff(cue_vecs, group_vecs);
}

}  // namespace biasattr::cues
