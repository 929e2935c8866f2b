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

// Run configuration, artifact manifest, and the pipeline stages behind each
// CLI subcommand. Every stage writes under the output directory with stable
// file names and records the artifact hashes in manifest.json.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "biasattr/attribution.hpp"
#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"
#include "biasattr/cue_selection.hpp"
#include "biasattr/eval.hpp"
#include "biasattr/hashing.hpp"
#include "biasattr/micro_lm.hpp"
#include "biasattr/model.hpp"
#include "biasattr/protocol.hpp"
#include "json.hpp"

namespace biasattr::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolVersion = "biasattr 0.3.0";
inline constexpr std::string_view kManifestName = "manifest.json";
inline constexpr std::string_view kOutputDirVar = "{output_dir}";

// -- Configuration -------------------------------------------------------------

struct RemoteSpec {
  std::string transport;  // "pipe" or "tcp"
  std::vector<std::string> command;
  std::string host = "127.0.0.1";
  int port = 0;
  int retries = protocol::kDefaultRetries;
};

struct RunConfig {
  fs::path base_dir;  // relative paths resolve against this
  std::string output_dir = "out";
  std::optional<std::string> micro_path;
  std::optional<RemoteSpec> remote;
  std::string schema_path;
  std::map<std::string, std::string> template_paths;   // by cue kind
  std::map<std::string, std::string> candidate_paths;  // by cue kind
  cues::PromptShell shell;
  std::size_t k = 5;
  cues::SelectionMode selection = cues::SelectionMode::kEntropyRank;
  bool skip_failed = false;
  attr::AttributionConfig attribution;
  std::pair<std::string, std::string> ig2_pair;  // empty: first two groups
  std::vector<double> betas = eval::DefaultBetas();
  std::vector<double> clamp_values = eval::DefaultClampValues();
  std::size_t random_masks = 50;
  std::map<std::string, std::string> datasets;  // by benchmark name
  ScoringOptions scoring;
  std::uint64_t seed = 42;
  std::size_t workers = 1;
  bool synthesize = false;  // `run` generates the suite and trains first
  eval::SyntheticConfig synthetic;
  micro::MicroConfig model;
  micro::TrainSpec train;
  std::string corpus_path = "{output_dir}/synth/corpus.txt";

  // Resolves a configured path: {output_dir} expands, relative paths anchor
  // at the config file's directory.
  std::string Resolve(const std::string& path) const {
    std::string p = path;
    const auto pos = p.find(kOutputDirVar);
    if (pos != std::string::npos) {
      p.replace(pos, kOutputDirVar.size(), output_dir);
    }
    fs::path fp(p);
    if (fp.is_relative()) fp = base_dir / fp;
    return fp.lexically_normal().string();
  }

  fs::path OutputDir() const { return fs::path(Resolve(output_dir)); }

  // Form used for hashing: paths inside the output directory keep their
  // placeholder so that runs differing only in location hash alike.
  std::string Canonical(const std::string& path) const {
    return path.find(kOutputDirVar) != std::string::npos ? path
                                                         : Resolve(path);
  }

  std::string Out(const std::string& relative) const {
    return (OutputDir() / relative).string();
  }
};

namespace internal {

template <typename T>
void Read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

}  // namespace internal

// Canonical JSON of the settings that determine artifact content. Worker
// count and output location are excluded: they never change results.
inline json CanonicalConfig(const RunConfig& c) {
  json backend;
  if (c.micro_path) backend["micro"] = c.Canonical(*c.micro_path);
  if (c.remote) {
    backend["remote"] = {{"transport", c.remote->transport},
                         {"command", c.remote->command},
                         {"host", c.remote->host},
                         {"port", c.remote->port},
                         {"retries", c.remote->retries}};
  }
  json templates;
  for (const auto& [kind, p] : c.template_paths) templates[kind] = c.Canonical(p);
  json candidates;
  for (const auto& [kind, p] : c.candidate_paths) {
    candidates[kind] = c.Canonical(p);
  }
  json datasets;
  for (const auto& [name, p] : c.datasets) datasets[name] = c.Canonical(p);
  const auto& s = c.synthetic;
  return {
      {"backend", backend},
      {"schema", c.schema_path.empty() ? "" : c.Canonical(c.schema_path)},
      {"templates", templates},
      {"candidates", candidates},
      {"prompt_shell", c.shell.ToJson()},
      {"k", c.k},
      {"selection_mode",
       c.selection == cues::SelectionMode::kEntropyRank ? "entropy"
                                                        : "first_of_group"},
      {"skip_failed", c.skip_failed},
      {"attribution", attr::ConfigToJson(c.attribution)},
      {"ig2_pair", {c.ig2_pair.first, c.ig2_pair.second}},
      {"grid", {{"betas", c.betas}, {"cs", c.clamp_values}}},
      {"random_masks", c.random_masks},
      {"datasets", datasets},
      {"scoring", eval::ScoringToJson(c.scoring)},
      {"seed", c.seed},
      {"synthesize", c.synthesize},
      {"synthetic",
       {{"skew", s.skew},
        {"seed", s.seed},
        {"stereo", s.sizes.stereo},
        {"cloze", s.sizes.cloze},
        {"bbq", s.sizes.bbq},
        {"planted", s.sizes.planted},
        {"template_repeats", s.sizes.template_repeats},
        {"backward_repeats", s.sizes.backward_repeats},
        {"stereo_repeats", s.sizes.stereo_repeats},
        {"cloze_repeats", s.sizes.cloze_repeats},
        {"bbq_repeats", s.sizes.bbq_repeats},
        {"filler", s.sizes.filler},
        {"unrelated_option", s.unrelated_option},
        {"unknown_option", s.unknown_option}}},
      {"model",
       {{"window", c.model.window},
        {"embed_dim", c.model.embed_dim},
        {"hidden1_dim", c.model.hidden1_dim},
        {"hidden2_dim", c.model.hidden2_dim},
        {"seed", c.model.seed}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed},
        {"optimizer",
         c.train.optimizer == micro::Optimizer::kAdam ? "adam" : "sgd"},
        {"linear_decay", c.train.linear_decay},
        {"corpus", c.Canonical(c.corpus_path)}}}};
}

inline std::string ConfigHash(const RunConfig& c) {
  return Sha256Hex(CanonicalConfig(c).dump());
}

inline RunConfig ConfigFromJson(const json& j, const fs::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  try {
    internal::Read(j, "output_dir", c.output_dir);
    if (j.contains("backend")) {
      const json& b = j["backend"];
      if (b.contains("micro")) c.micro_path = b["micro"].get<std::string>();
      if (b.contains("remote")) {
        const json& r = b["remote"];
        RemoteSpec spec;
        spec.transport = r.at("transport").get<std::string>();
        internal::Read(r, "command", spec.command);
        internal::Read(r, "host", spec.host);
        internal::Read(r, "port", spec.port);
        internal::Read(r, "retries", spec.retries);
        if (spec.transport != "pipe" && spec.transport != "tcp") {
          Fail(ErrorKind::kConfig, "remote transport must be pipe or tcp");
        }
        c.remote = spec;
      }
      if (c.micro_path.has_value() == c.remote.has_value()) {
        Fail(ErrorKind::kConfig,
             "backend must name exactly one of 'micro' or 'remote'");
      }
    }
    internal::Read(j, "schema", c.schema_path);
    internal::Read(j, "templates", c.template_paths);
    internal::Read(j, "candidates", c.candidate_paths);
    for (const auto* paths : {&c.template_paths, &c.candidate_paths}) {
      for (const auto& [kind, p] : *paths) {
        if (kind != "adjective" && kind != "noun") {
          Fail(ErrorKind::kConfig, "unknown cue kind '", kind,
               "' (expected adjective or noun)");
        }
      }
    }
    if (j.contains("prompt_shell")) {
      c.shell = cues::PromptShell::FromJson(j["prompt_shell"]);
    }
    internal::Read(j, "k", c.k);
    if (j.contains("selection_mode")) {
      c.selection =
          cues::ParseSelectionMode(j["selection_mode"].get<std::string>());
    }
    internal::Read(j, "skip_failed", c.skip_failed);
    if (j.contains("attribution")) {
      c.attribution = attr::ConfigFromJson(j["attribution"]);
    }
    if (j.contains("ig2_pair")) {
      const auto pair = j["ig2_pair"].get<std::vector<std::string>>();
      if (pair.size() != 2) {
        Fail(ErrorKind::kConfig, "ig2_pair must name two groups");
      }
      c.ig2_pair = {pair[0], pair[1]};
    }
    if (j.contains("grid")) {
      internal::Read(j["grid"], "betas", c.betas);
      internal::Read(j["grid"], "cs", c.clamp_values);
    }
    internal::Read(j, "random_masks", c.random_masks);
    internal::Read(j, "datasets", c.datasets);
    for (const auto& [name, p] : c.datasets) eval::ParseBenchmark(name);
    if (j.contains("scoring")) {
      const json& s = j["scoring"];
      internal::Read(s, "length_normalized", c.scoring.length_normalized);
      if (s.contains("mask_scope")) {
        const auto scope = s["mask_scope"].get<std::string>();
        if (scope == "all_positions") {
          c.scoring.scope = MaskScope::kAllPositions;
        } else if (scope == "final_position") {
          c.scoring.scope = MaskScope::kFinalPositionOnly;
        } else {
          Fail(ErrorKind::kConfig, "unknown mask_scope '", scope, "'");
        }
      }
    }
    internal::Read(j, "seed", c.seed);
    internal::Read(j, "workers", c.workers);
    if (j.contains("synthetic")) {
      c.synthesize = true;
      const json& s = j["synthetic"];
      auto& sz = c.synthetic.sizes;
      internal::Read(s, "skew", c.synthetic.skew);
      internal::Read(s, "seed", c.synthetic.seed);
      internal::Read(s, "stereo", sz.stereo);
      internal::Read(s, "cloze", sz.cloze);
      internal::Read(s, "bbq", sz.bbq);
      internal::Read(s, "planted", sz.planted);
      internal::Read(s, "template_repeats", sz.template_repeats);
      internal::Read(s, "backward_repeats", sz.backward_repeats);
      internal::Read(s, "stereo_repeats", sz.stereo_repeats);
      internal::Read(s, "cloze_repeats", sz.cloze_repeats);
      internal::Read(s, "bbq_repeats", sz.bbq_repeats);
      internal::Read(s, "filler", sz.filler);
      internal::Read(s, "unrelated_option", c.synthetic.unrelated_option);
      internal::Read(s, "unknown_option", c.synthetic.unknown_option);
    }
    if (j.contains("model")) {
      const json& m = j["model"];
      internal::Read(m, "window", c.model.window);
      internal::Read(m, "embed_dim", c.model.embed_dim);
      internal::Read(m, "hidden1_dim", c.model.hidden1_dim);
      internal::Read(m, "hidden2_dim", c.model.hidden2_dim);
      internal::Read(m, "seed", c.model.seed);
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      internal::Read(t, "learning_rate", c.train.learning_rate);
      internal::Read(t, "epochs", c.train.epochs);
      internal::Read(t, "batch_size", c.train.batch_size);
      internal::Read(t, "seed", c.train.seed);
      internal::Read(t, "linear_decay", c.train.linear_decay);
      internal::Read(t, "corpus", c.corpus_path);
      if (t.contains("optimizer")) {
        const auto name = t["optimizer"].get<std::string>();
        if (name == "adam") {
          c.train.optimizer = micro::Optimizer::kAdam;
        } else if (name == "sgd") {
          c.train.optimizer = micro::Optimizer::kSgd;
        } else {
          Fail(ErrorKind::kConfig, "unknown optimizer '", name, "'");
        }
      }
    }
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, "malformed run config: ", e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw;
    Fail(ErrorKind::kConfig, "invalid run config: ", e.what());
  }
  return c;
}

inline RunConfig LoadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot open config ", path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, path, ": ", e.what());
  }
  return ConfigFromJson(j, fs::absolute(path).parent_path());
}

// -- Manifest ------------------------------------------------------------------

inline std::string UtcTimestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// manifest.json: {config_hash, tool_version, backend_fingerprint,
// artifacts: {relative path: sha256}, timestamps: {stage: time}}. Timestamps
// are the only field that differs between identical runs.
class Manifest {
 public:
  explicit Manifest(const RunConfig& config)
      : path_(config.Out(std::string(kManifestName))),
        config_hash_(ConfigHash(config)) {
    if (fs::exists(path_)) {
      try {
        data_ = json::parse(ReadFileBytes(path_));
      } catch (const json::exception& e) {
        Fail(ErrorKind::kFormat, path_, ": ", e.what());
      }
      // A different configuration starts a fresh provenance record.
      if (data_.value("config_hash", std::string()) != config_hash_) {
        data_ = json::object();
      }
    }
    data_["config_hash"] = config_hash_;
    data_["tool_version"] = kToolVersion;
    if (!data_.contains("artifacts")) data_["artifacts"] = json::object();
    if (!data_.contains("timestamps")) data_["timestamps"] = json::object();
  }

  const json& data() const { return data_; }

  void SetBackend(const std::string& fingerprint) {
    data_["backend_fingerprint"] = fingerprint;
  }

  void Record(const fs::path& output_dir, const std::string& absolute_path) {
    const std::string rel =
        fs::relative(absolute_path, output_dir).generic_string();
    data_["artifacts"][rel] = Sha256File(absolute_path);
  }

  // Refuses inputs that were produced by this run but changed afterwards.
  void CheckInput(const fs::path& output_dir,
                  const std::string& absolute_path) const {
    const std::string rel =
        fs::relative(absolute_path, output_dir).generic_string();
    if (!data_["artifacts"].contains(rel)) return;
    if (Sha256File(absolute_path) != data_["artifacts"][rel].get<std::string>()) {
      Fail(ErrorKind::kConfig, "artifact ", rel,
           " does not match the hash recorded in the manifest; it was "
           "modified after it was produced");
    }
  }

  void Save(const std::string& stage) {
    data_["timestamps"][stage] = UtcTimestamp();
    WriteFileBytes(path_, data_.dump(2) + "\n");
  }

 private:
  std::string path_;
  std::string config_hash_;
  json data_ = json::object();
};

struct VerifyResult {
  std::size_t checked = 0;
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

inline VerifyResult VerifyManifest(const fs::path& output_dir) {
  const fs::path path = output_dir / kManifestName;
  if (!fs::exists(path)) {
    Fail(ErrorKind::kConfig, "no manifest at ", path.string());
  }
  json data;
  try {
    data = json::parse(ReadFileBytes(path.string()));
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, path.string(), ": ", e.what());
  }
  VerifyResult r;
  const json artifacts = data.value("artifacts", json::object());
  for (const auto& [rel, hash] : artifacts.items()) {
    ++r.checked;
    const fs::path p = output_dir / rel;
    if (!fs::exists(p)) {
      r.problems.push_back(StrCat(rel, ": missing"));
    } else if (Sha256File(p.string()) != hash.get<std::string>()) {
      r.problems.push_back(StrCat(rel, ": hash mismatch"));
    }
  }
  return r;
}

// -- Stage context -------------------------------------------------------------

inline void WriteText(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  WriteFileBytes(path, text);
}

inline void WriteJson(const std::string& path, const json& j) {
  WriteText(path, j.dump(2) + "\n");
}

inline json ReadJson(const std::string& path) {
  try {
    return json::parse(ReadFileBytes(path));
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, path, ": ", e.what());
  }
}

inline std::string JoinLines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

inline std::unique_ptr<ModelBackend> OpenBackend(const RunConfig& c) {
  if (c.micro_path) {
    const std::string path = c.Resolve(*c.micro_path);
    if (!fs::exists(path)) {
      Fail(ErrorKind::kConfig, "micro weights ", path,
           " not found; run train-micro first");
    }
    return std::make_unique<micro::MicroBackend>(micro::MicroBackend::Load(path));
  }
  if (c.remote) {
    std::unique_ptr<protocol::Transport> t;
    if (c.remote->transport == "pipe") {
      t = std::make_unique<protocol::PipeTransport>(c.remote->command);
    } else {
      t = std::make_unique<protocol::TcpTransport>(c.remote->host,
                                                   c.remote->port);
    }
    return std::make_unique<protocol::RemoteBackend>(std::move(t),
                                                     c.remote->retries);
  }
  Fail(ErrorKind::kConfig, "config names no backend");
}

// Shared state of one CLI invocation: config, manifest and a lazily opened
// backend.
class Stage {
 public:
  explicit Stage(RunConfig config)
      : config_(std::move(config)), manifest_(config_) {
    fs::create_directories(config_.OutputDir());
  }

  const RunConfig& config() const { return config_; }
  Manifest& manifest() { return manifest_; }

  const ModelBackend& backend() {
    if (!backend_) {
      if (config_.micro_path) {
        const std::string weights = config_.Resolve(*config_.micro_path);
        if (fs::exists(weights)) {
          manifest_.CheckInput(config_.OutputDir(), weights);
          manifest_.CheckInput(config_.OutputDir(),
                               micro::VocabularyPathFor(weights));
        }
      }
      backend_ = OpenBackend(config_);
      manifest_.SetBackend(backend_->Fingerprint());
    }
    return *backend_;
  }

  // Borrows an existing backend instead of opening the configured one.
  void UseBackend(std::shared_ptr<const ModelBackend> backend) {
    borrowed_ = std::move(backend);
    backend_.reset();
    manifest_.SetBackend(borrowed_->Fingerprint());
  }

  const ModelBackend& Backend() {
    if (borrowed_) return *borrowed_;
    return backend();
  }

  std::string Out(const std::string& rel) const { return config_.Out(rel); }

  void Write(const std::string& rel, const std::string& text) {
    const std::string p = Out(rel);
    WriteText(p, text);
    manifest_.Record(config_.OutputDir(), p);
  }

  void Write(const std::string& rel, const json& j) {
    Write(rel, j.dump(2) + "\n");
  }

  // Reads a file, verifying it against the manifest if this run produced it.
  std::string ReadInput(const std::string& path,
                        std::string_view missing_hint = {}) const {
    if (!fs::exists(path)) {
      Fail(ErrorKind::kConfig, path, " not found",
           missing_hint.empty() ? "" : "; ", missing_hint);
    }
    manifest_.CheckInput(config_.OutputDir(), path);
    return ReadFileBytes(path);
  }

  void Finish(const std::string& stage) { manifest_.Save(stage); }

  cues::DemographicSchema Schema() const {
    Require(!config_.schema_path.empty(), "config has no schema");
    return cues::DemographicSchema::Load(config_.Resolve(config_.schema_path));
  }

  std::vector<cues::Template> Templates(const std::string& kind) const {
    auto it = config_.template_paths.find(kind);
    if (it == config_.template_paths.end()) return {};
    auto t = cues::LoadTemplates(config_.Resolve(it->second));
    const auto expected =
        kind == "adjective" ? cues::CueKind::kAdjective : cues::CueKind::kNoun;
    for (const auto& x : t) {
      if (x.kind != expected) {
        Fail(ErrorKind::kConfig, "template file for ", kind,
             " cues contains a template of the other kind: \"", x.text, "\"");
      }
    }
    return t;
  }

  std::vector<std::string> Candidates(const std::string& kind) const {
    auto it = config_.candidate_paths.find(kind);
    if (it == config_.candidate_paths.end()) return {};
    return cues::LoadWordList(config_.Resolve(it->second));
  }

  // Kinds that have both templates and candidates configured.
  std::vector<std::string> CueKinds() const {
    std::vector<std::string> out;
    for (const char* kind : {"adjective", "noun"}) {
      if (config_.template_paths.count(kind) &&
          config_.candidate_paths.count(kind)) {
        out.push_back(kind);
      }
    }
    Require(!out.empty(),
            "config must give templates and candidates for at least one cue "
            "kind");
    return out;
  }

  std::vector<std::string> SelectedCues(const std::string& kind) const {
    const std::string path = Out(StrCat("cues/", kind, ".txt"));
    const std::string text =
        ReadInput(path, "run select-cues first to produce the cue files");
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) out.push_back(line);
    }
    Require(!out.empty(), path, " is empty");
    return out;
  }

  std::string DatasetPath(eval::Benchmark b) const {
    const std::string name(eval::BenchmarkName(b));
    auto it = config_.datasets.find(name);
    if (it == config_.datasets.end()) {
      Fail(ErrorKind::kConfig, "config has no dataset for benchmark ", name);
    }
    return config_.Resolve(it->second);
  }

  eval::EvalOptions EvalOptions() const {
    return {config_.scoring, config_.workers};
  }

 private:
  RunConfig config_;
  Manifest manifest_;
  std::unique_ptr<ModelBackend> backend_;
  std::shared_ptr<const ModelBackend> borrowed_;
};

// -- Stages --------------------------------------------------------------------

inline eval::SyntheticSuite GenSynth(Stage& st) {
  const auto schema = st.Schema();
  const auto templates = st.Templates("adjective");
  const auto candidates = st.Candidates("adjective");
  Require(!templates.empty() && !candidates.empty(),
          "gen-synth needs adjective templates and candidates");
  const auto& cfg = st.config();
  eval::SyntheticSuite suite = eval::GenerateSyntheticSuite(
      schema, templates, candidates, cfg.synthetic, cfg.shell);
  st.Write("synth/corpus.txt", JoinLines(suite.corpus));
  st.Write("synth/stereoset.json",
           eval::ItemsToJson<eval::StereoTuple>(suite.stereo));
  st.Write("synth/winobias.json",
           eval::ItemsToJson<eval::ClozeTuple>(suite.cloze));
  st.Write("synth/bbq.json", eval::ItemsToJson<eval::BbqItem>(suite.bbq));
  st.Write("synth/planted.json", eval::PlantedToJson(suite, schema));
  st.Finish("gen-synth");
  return suite;
}

struct TrainOutcome {
  micro::TrainResult result;
  micro::Vocabulary vocab;
};

inline TrainOutcome TrainMicro(Stage& st) {
  const auto& cfg = st.config();
  const std::string corpus_path = cfg.Resolve(cfg.corpus_path);
  const std::string text =
      st.ReadInput(corpus_path, "run gen-synth first or set train.corpus");
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  Require(!lines.empty(), "corpus ", corpus_path, " is empty");
  micro::Vocabulary vocab = micro::Vocabulary::FromCorpus(lines);
  micro::MicroConfig model = cfg.model;
  model.vocab_size = vocab.size();
  micro::TrainSpec spec = cfg.train;
  spec.corpus_path = corpus_path;
  micro::TrainResult result =
      micro::Train(model, spec, micro::EncodeCorpus(vocab, lines));
  const std::string weights = st.Out("model/micro.mlm");
  fs::create_directories(fs::path(weights).parent_path());
  micro::SaveModel(result.weights, vocab, weights);
  st.manifest().Record(cfg.OutputDir(), weights);
  st.manifest().Record(cfg.OutputDir(), micro::VocabularyPathFor(weights));
  json log = {{"epoch_losses", result.epoch_losses},
              {"vocab_size", vocab.size()},
              {"parameters", result.weights.ParameterCount()},
              {"sentences", lines.size()}};
  st.Write("model/train_log.json", log);
  st.Finish("train-micro");
  return {std::move(result), std::move(vocab)};
}

inline std::string CueScoreTable(std::span<const cues::CueScore> sorted,
                                 const cues::DemographicSchema& schema) {
  std::vector<std::string> header = {"rank", "cue", "entropy"};
  for (const auto& g : schema.groups) header.push_back(StrCat("p(", g, ")"));
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    char ent[32];
    std::snprintf(ent, sizeof(ent), "%.6f", sorted[i].entropy);
    std::vector<std::string> row = {std::to_string(i + 1), sorted[i].word, ent};
    for (Eigen::Index g = 0; g < sorted[i].aggregate.size(); ++g) {
      char p[32];
      std::snprintf(p, sizeof(p), "%.6f", sorted[i].aggregate[g]);
      row.push_back(p);
    }
    rows.push_back(std::move(row));
  }
  return eval::FormatTable(header, rows);
}

struct SelectOutcome {
  std::map<std::string, std::vector<cues::CueScore>> scores;  // input order
  std::map<std::string, std::vector<std::string>> selected;
};

inline SelectOutcome SelectCues(Stage& st, std::optional<std::size_t> k = {}) {
  const auto& cfg = st.config();
  const auto schema = st.Schema();
  const ModelBackend& backend = st.Backend();
  SelectOutcome out;
  json scores_json = json::object();
  for (const auto& kind : st.CueKinds()) {
    const auto templates = st.Templates(kind);
    const auto candidates = st.Candidates(kind);
    auto scores = cues::ComputeEntropies(candidates, templates, schema, backend,
                                         cfg.shell,
                                         {cfg.workers, cfg.skip_failed});
    const std::size_t kk = k.value_or(cfg.k);
    if (kk > scores.size()) {
      Fail(ErrorKind::kConfig, "k = ", kk, " exceeds the ", scores.size(), " ",
           kind, " candidates");
    }
    auto selected = cues::SelectCues(scores, kk, cfg.selection);
    const auto sorted = cues::SortByEntropy(scores);
    json arr = json::array();
    for (const auto& s : sorted) {
      arr.push_back({{"cue", s.word},
                     {"entropy", s.entropy},
                     {"aggregate", std::vector<double>(
                                       s.aggregate.values().data(),
                                       s.aggregate.values().data() +
                                           s.aggregate.size())},
                     {"templates_used", s.templates_used}});
    }
    scores_json[kind] = arr;
    st.Write(StrCat("cues/", kind, ".txt"), JoinLines(selected));
    st.Write(StrCat("cues/", kind, "_scores.txt"),
             CueScoreTable(sorted, schema));
    out.scores[kind] = std::move(scores);
    out.selected[kind] = std::move(selected);
  }
  st.Write("cues/scores.json", scores_json);
  st.Finish("select-cues");
  return out;
}

struct Datasets {
  std::vector<cues::ForwardSample> forward;
  std::vector<cues::BackwardSubset> backward;
};

inline Datasets LoadDatasets(const Stage& st) {
  const auto schema = st.Schema();
  Datasets ds;
  for (const auto& kind : st.CueKinds()) {
    const auto cue_list = st.SelectedCues(kind);
    const auto templates = st.Templates(kind);
    auto f = cues::BuildForwardSamples(cue_list, templates, schema,
                                       st.config().shell);
    auto b = cues::BuildBackwardSubsets(cue_list, templates, schema,
                                        st.config().shell);
    ds.forward.insert(ds.forward.end(), f.begin(), f.end());
    ds.backward.insert(ds.backward.end(), b.begin(), b.end());
  }
  return ds;
}

inline Datasets BuildDs(Stage& st) {
  Datasets ds = LoadDatasets(st);
  st.Write("ds/forward.json", cues::ForwardSamplesToJson(ds.forward));
  st.Write("ds/backward.json", cues::BackwardSubsetsToJson(ds.backward));
  st.Finish("build-ds");
  return ds;
}

inline std::string MethodTag(attr::Method m) {
  switch (m) {
    case attr::Method::kForwardIg:
      return "fba";
    case attr::Method::kBackwardIg:
      return "bba";
    case attr::Method::kIg2:
      return "ig2";
    case attr::Method::kRandom:
      return "random";
  }
  return "?";
}

inline attr::Method ParseMethodTag(std::string_view tag) {
  if (tag == "fba") return attr::Method::kForwardIg;
  if (tag == "bba") return attr::Method::kBackwardIg;
  if (tag == "ig2") return attr::Method::kIg2;
  if (tag == "random") return attr::Method::kRandom;
  Fail(ErrorKind::kConfig, "unknown method '", tag,
       "' (valid: fba, bba, ig2, random)");
}

// File stem for a report: the method tag, suffixed by the layer when it is
// not the projection input.
inline std::string ReportStem(attr::Method m, LayerTag layer) {
  return layer == LayerTag::kProjectionInput
             ? MethodTag(m)
             : StrCat(MethodTag(m), "_", LayerTagName(layer));
}

inline attr::AttributionReport Attribute(Stage& st, attr::Method method,
                                         std::optional<LayerTag> layer = {}) {
  attr::AttributionConfig config = st.config().attribution;
  if (layer) config.layer = *layer;
  const auto schema = st.Schema();
  const ModelBackend& backend = st.Backend();
  const std::size_t workers = st.config().workers;
  attr::AttributionReport report;
  report.method = method;
  report.config = config;
  report.backend_fingerprint = backend.Fingerprint();

  if (method == attr::Method::kRandom) {
    const auto m = static_cast<std::size_t>(
        backend.Capabilities().DimAt(config.layer));
    report = attr::RandomReport(m, st.config().seed, config,
                                backend.Fingerprint());
  } else if (method == attr::Method::kBackwardIg) {
    Require(schema.groups.size() >= 2, "fewer than 2 groups");
    const Datasets ds = LoadDatasets(st);
    std::vector<Vec> per(ds.backward.size());
    ParallelFor(per.size(), workers, [&](std::size_t i) {
      const auto& subset = ds.backward[i];
      std::vector<TokenSeq> prompts;
      for (const auto& p : subset.prompts) prompts.push_back(backend.Tokenize(p));
      const auto options =
          cues::DistinctFirstTokens(backend, subset.options, "cue options");
      per[i] = attr::BackwardIg(backend, prompts, options, config);
    });
    report.scores = attr::AverageScores(per);
    report.sample_count = per.size();
  } else {
    const Datasets ds = LoadDatasets(st);
    const auto group_ids = cues::GroupTokenIds(schema, backend);
    std::size_t first = 0;
    std::size_t second = 1;
    if (method == attr::Method::kIg2 && !st.config().ig2_pair.first.empty()) {
      const auto a = schema.GroupIndex(st.config().ig2_pair.first);
      const auto b = schema.GroupIndex(st.config().ig2_pair.second);
      if (!a || !b) {
        Fail(ErrorKind::kConfig, "ig2 pair (", st.config().ig2_pair.first, ", ",
             st.config().ig2_pair.second, ") is not in schema '",
             schema.attribute, "'");
      }
      first = *a;
      second = *b;
    }
    std::vector<Vec> per(ds.forward.size());
    ParallelFor(per.size(), workers, [&](std::size_t i) {
      const TokenSeq prompt = backend.Tokenize(ds.forward[i].prompt);
      per[i] = method == attr::Method::kForwardIg
                   ? attr::ForwardIg(backend, prompt, group_ids, config)
                   : attr::Ig2(backend, prompt, group_ids, first, second,
                               config);
    });
    report.scores = attr::AverageScores(per);
    report.sample_count = per.size();
  }
  st.Write(StrCat("attribution/", ReportStem(method, config.layer), ".json"),
           attr::ReportToJson(report));
  st.Finish("attribute");
  return report;
}

inline attr::AttributionReport LoadReport(const Stage& st, attr::Method method,
                                          LayerTag layer) {
  const std::string path =
      st.Out(StrCat("attribution/", ReportStem(method, layer), ".json"));
  const std::string text = st.ReadInput(
      path, StrCat("run attribute --method ", MethodTag(method), " first"));
  try {
    return attr::ReportFromJson(json::parse(text));
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, path, ": ", e.what());
  }
}

inline InterventionMask MakeMask(Stage& st, attr::Method method, double beta,
                                 double clamp_value) {
  const LayerTag layer = st.config().attribution.layer;
  const auto report = LoadReport(st, method, layer);
  const InterventionMask mask =
      attr::RankAndMask(report.scores, beta, clamp_value, layer);
  st.Write(StrCat("masks/", ReportStem(method, layer), ".json"),
           attr::MaskToJson(mask));
  st.Finish("mask");
  return mask;
}

inline InterventionMask LoadMask(const Stage& st, const std::string& path) {
  const std::string text = st.ReadInput(path);
  try {
    return attr::MaskFromJson(json::parse(text));
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, path, ": ", e.what());
  }
}

// The benchmark a method's grid is judged on: forward-style attributions
// target stereotype preference, backward attribution the cloze gap.
inline eval::Benchmark GridBenchmark(attr::Method m) {
  return m == attr::Method::kBackwardIg ? eval::Benchmark::kWinoBias
                                        : eval::Benchmark::kStereoSet;
}

struct GridOutcome {
  eval::GridResult grid;
  InterventionMask mask;  // selected cell
};

inline GridOutcome Grid(Stage& st, attr::Method method,
                        eval::Split split = eval::Split::kValidation) {
  const LayerTag layer = st.config().attribution.layer;
  const auto report = LoadReport(st, method, layer);
  const ModelBackend& backend = st.Backend();
  const eval::Benchmark bench = GridBenchmark(method);
  const std::string path = st.DatasetPath(bench);
  st.ReadInput(path);
  // Cells run in parallel; scoring inside each cell stays serial.
  eval::EvalOptions options = st.EvalOptions();
  options.workers = 1;
  eval::GridResult grid;
  if (bench == eval::Benchmark::kStereoSet) {
    const auto all = eval::LoadStereoSet(path);
    const auto items = eval::SelectSplit<eval::StereoTuple>(all, split);
    grid = eval::GridSearch(report.scores, layer, st.config().betas,
                            st.config().clamp_values,
                            eval::StereoObjective(items, backend, options),
                            st.config().workers);
  } else {
    const auto all = eval::LoadWinoBias(path);
    const auto items = eval::SelectSplit<eval::ClozeTuple>(all, split);
    grid = eval::GridSearch(report.scores, layer, st.config().betas,
                            st.config().clamp_values,
                            eval::ClozeObjective(items, backend, options),
                            st.config().workers);
  }
  const InterventionMask mask = attr::RankAndMask(
      report.scores, grid.best().beta, grid.best().clamp_value, layer);
  const std::string stem = ReportStem(method, layer);
  json j = eval::GridToJson(grid);
  j["benchmark"] = eval::BenchmarkName(bench);
  j["split"] = eval::SplitName(split);
  j["method"] = MethodTag(method);
  st.Write(StrCat("grid/", stem, ".json"), j);
  st.Write(StrCat("grid/", stem, ".txt"), eval::FormatGrid(grid));
  st.Write(StrCat("masks/", stem, ".json"), attr::MaskToJson(mask));
  st.Finish("grid");
  return {std::move(grid), mask};
}

struct EvalOutcome {
  json report;
  std::string table;
};

inline EvalOutcome Evaluate(Stage& st, eval::Benchmark bench, eval::Split split,
                            const InterventionMask* mask,
                            const std::string& tag) {
  const ModelBackend& backend = st.Backend();
  const std::string path = st.DatasetPath(bench);
  st.ReadInput(path);
  const auto options = st.EvalOptions();
  json metrics;
  std::string table;
  switch (bench) {
    case eval::Benchmark::kStereoSet: {
      const auto all = eval::LoadStereoSet(path);
      const auto m = eval::ScoreStereoSet(
          eval::SelectSplit<eval::StereoTuple>(all, split), backend, mask,
          options);
      metrics = eval::ToJson(m);
      table = eval::FormatMetrics(m);
      break;
    }
    case eval::Benchmark::kWinoBias: {
      const auto all = eval::LoadWinoBias(path);
      const auto m = eval::ScoreWinoBias(
          eval::SelectSplit<eval::ClozeTuple>(all, split), backend, mask,
          options);
      metrics = eval::ToJson(m);
      table = eval::FormatMetrics(m);
      break;
    }
    case eval::Benchmark::kBbq: {
      const auto all = eval::LoadBbq(path);
      const auto m = eval::ScoreBbq(eval::SelectSplit<eval::BbqItem>(all, split),
                                    backend, mask, options);
      metrics = eval::ToJson(m);
      table = eval::FormatMetrics(m);
      break;
    }
  }
  json report = {{"benchmark", eval::BenchmarkName(bench)},
                 {"split", eval::SplitName(split)},
                 {"dataset_sha256", Sha256File(path)},
                 {"metrics", metrics},
                 {"scoring", eval::ScoringToJson(options.scoring)},
                 {"mask", mask ? attr::MaskToJson(*mask) : json(nullptr)},
                 {"mask_fingerprint", eval::MaskFingerprint(mask)},
                 {"backend_fingerprint", backend.Fingerprint()},
                 {"config_hash", ConfigHash(st.config())}};
  const std::string stem =
      StrCat("metrics/", eval::BenchmarkName(bench), "_", eval::SplitName(split),
             "_", tag);
  st.Write(stem + ".json", report);
  st.Write(stem + ".txt", table);
  st.Finish("evaluate");
  return {std::move(report), std::move(table)};
}


// |SS - 50| reduction of `masked` relative to `base`.
inline double SsImprovement(double base_ss, double masked_ss) {
  return std::abs(base_ss - 50.0) - std::abs(masked_ss - 50.0);
}

inline double Median(std::vector<double> v) {
  Require(!v.empty(), "median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct RandomBaselineOutcome {
  std::vector<double> ss;
  double median_improvement = 0.0;
};

// StereoSet SS under `count` seeded random masks with a fixed (beta, C).
inline RandomBaselineOutcome RandomBaseline(Stage& st, double beta,
                                            double clamp_value,
                                            eval::Split split, double base_ss) {
  const ModelBackend& backend = st.Backend();
  const LayerTag layer = st.config().attribution.layer;
  const auto m =
      static_cast<std::size_t>(backend.Capabilities().DimAt(layer));
  const std::string path = st.DatasetPath(eval::Benchmark::kStereoSet);
  st.ReadInput(path);
  const auto all = eval::LoadStereoSet(path);
  const auto items = eval::SelectSplit<eval::StereoTuple>(all, split);
  eval::EvalOptions options = st.EvalOptions();
  options.workers = 1;
  const std::size_t count = st.config().random_masks;
  Require(count >= 1, "random_masks must be >= 1");
  RandomBaselineOutcome out;
  out.ss.resize(count);
  ParallelFor(count, st.config().workers, [&](std::size_t i) {
    const InterventionMask mask =
        attr::RandomMask(m, beta, clamp_value, st.config().seed + i, layer);
    out.ss[i] = eval::ScoreStereoSet(items, backend, &mask, options).overall.ss;
  });
  std::vector<double> gains;
  for (double ss : out.ss) gains.push_back(SsImprovement(base_ss, ss));
  out.median_improvement = Median(gains);
  st.Write(StrCat("metrics/random_baseline_", eval::SplitName(split), ".json"),
           json{{"beta", beta},
                {"c", clamp_value},
                {"base_ss", eval::Round6(base_ss)},
                {"ss", out.ss},
                {"median_improvement", eval::Round6(out.median_improvement)}});
  st.Finish("random-baseline");
  return out;
}

// Mean |Forward-IG| at Hidden1 over mean |Forward-IG| at the projection
// input, from the two stored reports.
inline double LayerRatio(const Stage& st) {
  const auto hidden1 =
      LoadReport(st, attr::Method::kForwardIg, LayerTag::kHidden1);
  const auto proj =
      LoadReport(st, attr::Method::kForwardIg, LayerTag::kProjectionInput);
  return attr::LayerMagnitudeRatio(hidden1.scores, proj.scores);
}

// Every stage in order: optional synthesis and training, cue selection,
// attribution, grid search on validation and evaluation on test.
inline json RunAll(Stage& st, std::ostream* log = nullptr) {
  auto note = [log](const std::string& msg) {
    if (log != nullptr) *log << msg << "\n" << std::flush;
  };
  const RunConfig& cfg = st.config();
  if (cfg.synthesize) {
    note("gen-synth");
    GenSynth(st);
    if (cfg.micro_path) {
      note("train-micro");
      TrainMicro(st);
    }
  }
  note("select-cues");
  SelectCues(st);
  note("build-ds");
  BuildDs(st);
  const ModelBackend& backend = st.Backend();
  const bool hidden1 = backend.Capabilities().supports_hidden1;
  for (auto method : {attr::Method::kForwardIg, attr::Method::kBackwardIg,
                      attr::Method::kRandom}) {
    note(StrCat("attribute ", MethodTag(method)));
    Attribute(st, method);
  }
  if (hidden1) {
    note("attribute fba hidden1");
    Attribute(st, attr::Method::kForwardIg, LayerTag::kHidden1);
  }

  json summary = {{"config_hash", ConfigHash(cfg)},
                  {"backend_fingerprint", backend.Fingerprint()}};
  const auto split = eval::Split::kTest;
  std::map<std::string, GridOutcome> grids;
  for (auto method : {attr::Method::kForwardIg, attr::Method::kBackwardIg}) {
    note(StrCat("grid ", MethodTag(method)));
    grids.emplace(MethodTag(method), Grid(st, method));
  }
  const InterventionMask& fba = grids.at("fba").mask;
  const InterventionMask& bba = grids.at("bba").mask;

  auto metrics = [](const EvalOutcome& e) { return e.report.at("metrics"); };
  note("evaluate");
  const auto ss_base = Evaluate(st, eval::Benchmark::kStereoSet, split, nullptr,
                                "base");
  const auto ss_fba =
      Evaluate(st, eval::Benchmark::kStereoSet, split, &fba, "fba");
  const auto wb_base =
      Evaluate(st, eval::Benchmark::kWinoBias, split, nullptr, "base");
  const auto wb_bba =
      Evaluate(st, eval::Benchmark::kWinoBias, split, &bba, "bba");
  summary["stereoset"] = {{"base", metrics(ss_base)},
                          {"fba", metrics(ss_fba)},
                          {"fba_cell",
                           {{"beta", grids.at("fba").grid.best().beta},
                            {"c", grids.at("fba").grid.best().clamp_value}}}};
  summary["winobias"] = {{"base", metrics(wb_base)},
                         {"bba", metrics(wb_bba)},
                         {"bba_cell",
                          {{"beta", grids.at("bba").grid.best().beta},
                           {"c", grids.at("bba").grid.best().clamp_value}}}};
  if (cfg.datasets.count("bbq")) {
    const auto bbq_base =
        Evaluate(st, eval::Benchmark::kBbq, split, nullptr, "base");
    const auto bbq_fba = Evaluate(st, eval::Benchmark::kBbq, split, &fba, "fba");
    summary["bbq"] = {{"base", metrics(bbq_base)}, {"fba", metrics(bbq_fba)}};
  }

  note("random-baseline");
  const double base_ss = metrics(ss_base).at("overall").at("SS").get<double>();
  const double fba_ss = metrics(ss_fba).at("overall").at("SS").get<double>();
  const auto random = RandomBaseline(st, grids.at("fba").grid.best().beta,
                                     grids.at("fba").grid.best().clamp_value,
                                     split, base_ss);
  summary["ablation"] = {
      {"fba_improvement", eval::Round6(SsImprovement(base_ss, fba_ss))},
      {"random_median_improvement", eval::Round6(random.median_improvement)},
      {"random_masks", random.ss.size()}};
  if (hidden1) {
    summary["layer_ratio"] = eval::Round6(LayerRatio(st));
  }
  st.Write("summary.json", summary);
  st.Finish("run");
  return summary;
}

}  // namespace biasattr::pipeline
