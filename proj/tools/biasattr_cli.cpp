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

// Command-line driver for the attribution pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "biasattr/common.hpp"
#include "biasattr/diagnostics.hpp"
#include "biasattr/micro_lm.hpp"
#include "biasattr/pipeline.hpp"
#include "biasattr/protocol.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
namespace pl = biasattr::pipeline;
using biasattr::ErrorKind;
using biasattr::Fail;
using biasattr::StrCat;

constexpr int kExitUsage = 2;
constexpr int kExitBackend = 3;
constexpr int kExitDiagnostic = 4;

int ExitCodeFor(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kConfig:
    case ErrorKind::kFormat:
      return kExitUsage;
    case ErrorKind::kBackend:
    case ErrorKind::kCapability:
      return kExitBackend;
    case ErrorKind::kDiagnostic:
      return kExitDiagnostic;
  }
  return 1;
}

struct GlobalFlags {
  std::string config;
  std::optional<std::size_t> workers;
  std::string out;
};

pl::RunConfig LoadRunConfig(const GlobalFlags& g) {
  if (g.config.empty()) Fail(ErrorKind::kConfig, "--config is required");
  pl::RunConfig c = pl::LoadConfig(g.config);
  if (g.workers) c.workers = *g.workers;
  if (!g.out.empty()) c.output_dir = fs::absolute(g.out).string();
  biasattr::Require(c.workers >= 1, "--workers must be >= 1");
  return c;
}

std::optional<biasattr::LayerTag> OptionalLayer(const std::string& name) {
  if (name.empty()) return std::nullopt;
  return biasattr::ParseLayerTag(name);
}

// Gradient fixture, training gradient, bound sweep and the optional layer
// ratio. Any failed diagnostic makes the command exit with kDiagnostic.
struct CheckFlags {
  std::string fixture;
  std::string emit_fixture;
  std::size_t cases = 30;
  std::size_t trials = 1000;
  std::uint64_t seed = 42;
  std::string weights;
  bool layers = false;
};

int RunCheck(const CheckFlags& f, const GlobalFlags& g) {
  namespace diag = biasattr::diag;
  if (!f.emit_fixture.empty()) {
    const auto cases = diag::MakeGradientCases(f.seed, f.cases);
    pl::WriteJson(f.emit_fixture, diag::GradientFixtureToJson(cases));
    std::cout << "wrote " << cases.size() << " gradient cases to "
              << f.emit_fixture << "\n";
    return 0;
  }
  bool ok = true;
  auto verdict = [&ok](bool pass) {
    ok = ok && pass;
    return pass ? "ok" : "FAILED";
  };

  const auto cases =
      f.fixture.empty()
          ? diag::MakeGradientCases(f.seed, f.cases)
          : diag::GradientFixtureFromJson(pl::ReadJson(f.fixture));
  const diag::GradientReport grad = diag::CheckGradientCases(cases);
  std::printf("gradient: %zu cases, analytic err %.3g, recorded err %.3g: %s\n",
              grad.cases, grad.analytic_error, grad.recorded_error,
              verdict(grad.ok()));

  const double train_err = diag::MicroTrainGradientError(f.seed);
  std::printf("micro training gradient: err %.3g: %s\n", train_err,
              verdict(train_err < diag::kGradientTolerance));

  std::unique_ptr<biasattr::ModelBackend> backend;
  if (!f.weights.empty()) {
    backend = std::make_unique<biasattr::micro::MicroBackend>(
        biasattr::micro::MicroBackend::Load(f.weights));
  } else {
    backend = std::make_unique<biasattr::micro::MicroBackend>(
        diag::RandomMicroBackend(f.seed));
  }
  const diag::BoundSweepReport bound =
      diag::BoundSweep(*backend, f.trials, f.seed);
  std::printf("bound sweep: %zu trials, %zu violations, max ratio %.6f: %s\n",
              bound.trials, bound.violations, bound.max_ratio,
              verdict(bound.violations == 0));

  if (f.layers) {
    pl::Stage st(LoadRunConfig(g));
    const double ratio = pl::LayerRatio(st);
    std::printf("layer ratio hidden1/proj_input: %.6f: %s\n", ratio,
                verdict(ratio < 1.0));
  }
  if (!ok) Fail(ErrorKind::kDiagnostic, "one or more checks failed");
  return 0;
}

struct ServeFlags {
  std::string weights;
  int port = -1;
  std::string record;
  int max_connections = 0;
};

int RunServe(const ServeFlags& f) {
  const auto backend = biasattr::micro::MicroBackend::Load(f.weights);
  biasattr::protocol::ProtocolServer server(backend);
  std::ofstream record;
  if (!f.record.empty()) {
    record.open(f.record);
    if (!record) Fail(ErrorKind::kConfig, "cannot write ", f.record);
  }
  std::ostream* rec = f.record.empty() ? nullptr : &record;
  if (f.port < 0) {
    server.Serve(std::cin, std::cout, rec);
  } else {
    server.ServeTcp(f.port, rec, f.max_connections, [](int port) {
      std::cerr << "listening on 127.0.0.1:" << port << std::endl;
    });
  }
  return 0;
}

void PrintJson(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron attribution and masking for social-bias mitigation"};
  app.set_version_flag("--version", std::string(pl::kToolVersion));
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--workers", g.workers, "Worker threads")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Override the output directory");

  auto* gen = app.add_subcommand("gen-synth", "Write the synthetic suite");
  std::optional<double> skew;
  std::optional<std::uint64_t> synth_seed;
  gen->add_option("--skew", skew, "Planted association strength in [0.5, 1]");
  gen->add_option("--seed", synth_seed, "Synthetic suite seed");

  auto* train = app.add_subcommand("train-micro", "Train the micro model");
  std::optional<int> epochs;
  std::optional<double> lr;
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr);

  auto* select = app.add_subcommand("select-cues", "Rank and select cues");
  std::optional<std::size_t> k;
  select->add_option("--k", k, "Cues to keep per kind");

  auto* build = app.add_subcommand("build-ds", "Build attribution datasets");

  auto* attribute = app.add_subcommand("attribute", "Score neurons");
  std::string method = "fba";
  std::string layer;
  attribute->add_option("--method", method, "fba, bba, ig2 or random");
  attribute->add_option("--layer", layer, "proj_input or hidden1");

  auto* mask = app.add_subcommand("mask", "Build a mask from stored scores");
  double beta = 0.2;
  double clamp = 0.0;
  mask->add_option("--method", method);
  mask->add_option("--beta", beta)->check(CLI::Range(0.0, 1.0));
  mask->add_option("--c", clamp, "Clamp value");

  auto* grid = app.add_subcommand("grid", "Grid-search (beta, C)");
  std::string split_name = "validation";
  grid->add_option("--method", method);
  grid->add_option("--split", split_name, "all, validation or test");

  auto* evaluate = app.add_subcommand("evaluate", "Score a benchmark");
  std::string bench_name = "stereoset";
  std::string mask_path;
  std::string mask_method;
  std::string tag;
  std::string eval_split = "test";
  evaluate->add_option("--benchmark", bench_name)->required();
  evaluate->add_option("--split", eval_split);
  auto* mask_opt = evaluate->add_option("--mask", mask_path, "Mask JSON");
  evaluate->add_option("--mask-method", mask_method,
                       "Use masks/<method>.json from the output directory")
      ->excludes(mask_opt);
  evaluate->add_option("--tag", tag, "Report name suffix");

  auto* check = app.add_subcommand("check", "Run numerical self-checks");
  CheckFlags cf;
  check->add_option("--fixture", cf.fixture, "Recorded gradient cases");
  check->add_option("--emit-fixture", cf.emit_fixture,
                    "Write fresh gradient cases and exit");
  check->add_option("--cases", cf.cases);
  check->add_option("--trials", cf.trials, "Bound sweep trials");
  check->add_option("--seed", cf.seed);
  check->add_option("--weights", cf.weights, "Micro model for the sweep");
  check->add_flag("--layers", cf.layers,
                  "Also compare stored Hidden1 and projection-input scores");

  auto* serve = app.add_subcommand("serve-micro",
                                   "Serve a micro model over the wire protocol");
  ServeFlags sf;
  serve->add_option("--weights", sf.weights)->required();
  serve->add_option("--port", sf.port, "TCP port (0 picks one); stdio if unset");
  serve->add_option("--record", sf.record, "Write a transcript here");
  serve->add_option("--max-connections", sf.max_connections);

  auto* verify = app.add_subcommand("verify-manifest",
                                    "Check artifacts against the manifest");
  auto* run = app.add_subcommand("run", "Run every stage");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (check->parsed()) return RunCheck(cf, g);
    if (serve->parsed()) return RunServe(sf);

    pl::RunConfig config = LoadRunConfig(g);
    if (verify->parsed()) {
      const auto r = pl::VerifyManifest(config.OutputDir());
      for (const auto& p : r.problems) std::cout << p << "\n";
      std::cout << r.checked << " artifacts checked, " << r.problems.size()
                << " problems\n";
      if (!r.problems.empty()) {
        Fail(ErrorKind::kDiagnostic, "manifest verification failed");
      }
      return 0;
    }
    if (gen->parsed()) {
      if (skew) config.synthetic.skew = *skew;
      if (synth_seed) config.synthetic.seed = *synth_seed;
    }
    if (train->parsed()) {
      if (epochs) config.train.epochs = *epochs;
      if (lr) config.train.learning_rate = *lr;
    }
    pl::Stage st(std::move(config));

    if (gen->parsed()) {
      const auto suite = pl::GenSynth(st);
      std::cout << suite.corpus.size() << " corpus lines, "
                << suite.stereo.size() << " stereo, " << suite.cloze.size()
                << " cloze, " << suite.bbq.size() << " bbq items\n";
    } else if (train->parsed()) {
      const auto out = pl::TrainMicro(st);
      std::printf("final loss %.6f over %zu epochs\n",
                  out.result.epoch_losses.back(),
                  out.result.epoch_losses.size());
    } else if (select->parsed()) {
      const auto out = pl::SelectCues(st, k);
      for (const auto& [kind, words] : out.selected) {
        std::cout << kind << ":";
        for (const auto& w : words) std::cout << " " << w;
        std::cout << "\n";
      }
    } else if (build->parsed()) {
      const auto ds = pl::BuildDs(st);
      std::cout << ds.forward.size() << " forward samples, "
                << ds.backward.size() << " backward subsets\n";
    } else if (attribute->parsed()) {
      const auto report =
          pl::Attribute(st, pl::ParseMethodTag(method), OptionalLayer(layer));
      std::cout << "scored " << report.scores.size() << " neurons over "
                << report.sample_count << " samples\n";
    } else if (mask->parsed()) {
      const auto m = pl::MakeMask(st, pl::ParseMethodTag(method), beta, clamp);
      PrintJson(biasattr::attr::MaskToJson(m));
    } else if (grid->parsed()) {
      const auto out = pl::Grid(st, pl::ParseMethodTag(method),
                                biasattr::eval::ParseSplit(split_name));
      std::cout << biasattr::eval::FormatGrid(out.grid);
    } else if (evaluate->parsed()) {
      std::optional<biasattr::InterventionMask> m;
      if (!mask_path.empty()) m = pl::LoadMask(st, mask_path);
      if (!mask_method.empty()) {
        const auto stem = pl::ReportStem(pl::ParseMethodTag(mask_method),
                                         st.config().attribution.layer);
        m = pl::LoadMask(st, st.Out(StrCat("masks/", stem, ".json")));
      }
      if (tag.empty()) tag = m ? (mask_method.empty() ? "mask" : mask_method)
                               : "base";
      const auto out = pl::Evaluate(st, biasattr::eval::ParseBenchmark(bench_name),
                                    biasattr::eval::ParseSplit(eval_split),
                                    m ? &*m : nullptr, tag);
      std::cout << out.table;
    } else if (run->parsed()) {
      PrintJson(pl::RunAll(st, &std::cerr));
    }
    return 0;
  } catch (const biasattr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ExitCodeFor(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
