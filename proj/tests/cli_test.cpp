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

// Drives the biasattr binary as a subprocess and checks exit codes and
// artifacts.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace biasattr {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr
};

Result RunCli(const std::string& args, const std::string& stdin_text = "") {
  std::string cmd;
  if (!stdin_text.empty()) cmd = "printf '%s\\n' '" + stdin_text + "' | ";
  cmd += std::string(BIASATTR_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
    r.output.append(buf.data(), n);
  }
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string Quote(const fs::path& p) { return "'" + p.string() + "'"; }

// The demo configuration, shrunk for speed, writing into a fresh directory.
fs::path WriteSmallConfig(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / ("cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  nlohmann::json c = test::LoadJsonFile(test::SharePath("demo/config.json"));
  c["output_dir"] = (dir / "out").string();
  c["schema"] = test::SharePath("synthetic/schema.json");
  c["templates"]["adjective"] = test::SharePath("templates/adjective.txt");
  c["candidates"]["adjective"] =
      test::SharePath("synthetic/candidates_adjective.txt");
  c["k"] = 2;
  c["train"]["epochs"] = 1;
  c["model"]["hidden1_dim"] = 16;
  c["model"]["hidden2_dim"] = 8;
  const fs::path path = dir / "config.json";
  std::ofstream(path) << c.dump(2);
  return path;
}

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(RunCli("").code, 2);
  EXPECT_EQ(RunCli("frobnicate").code, 2);
  EXPECT_EQ(RunCli("mask --beta 1.5").code, 2);
  const Result no_config = RunCli("gen-synth");
  EXPECT_EQ(no_config.code, 2);
  EXPECT_NE(no_config.output.find("--config"), std::string::npos);
  EXPECT_EQ(RunCli("--config /nonexistent/config.json gen-synth").code, 2);
}

TEST(Cli, VersionAndHelpSucceed) {
  EXPECT_EQ(RunCli("--version").code, 0);
  const Result help = RunCli("--help");
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.output.find("select-cues"), std::string::npos);
}

TEST(Cli, CheckPassesOnRecordedFixture) {
  const Result r = RunCli("check --trials 50 --fixture " +
                          Quote(test::SharePath("check/gradient_cases.json")));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("0 violations"), std::string::npos) << r.output;
}

TEST(Cli, CheckFailsOnCorruptFixture) {
  const Result r =
      RunCli("check --trials 50 --fixture " +
             Quote(test::TestDataPath("gradient_cases_corrupt.json")));
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("FAILED"), std::string::npos) << r.output;
}

TEST(Cli, ServeAnswersOverStdio) {
  const Result r =
      RunCli("serve-micro --weights " +
                 Quote(test::TestDataPath("micro_golden.mlm")),
             R"({"v":1,"op":"caps"})");
  EXPECT_EQ(r.code, 0) << r.output;
  const auto reply = nlohmann::json::parse(r.output);
  EXPECT_TRUE(reply["ok"].get<bool>());
  EXPECT_EQ(reply["data"]["hidden_dim"], 16);
}

TEST(Cli, ServeReportsMissingWeights) {
  EXPECT_EQ(RunCli("serve-micro --weights /nonexistent.mlm").code, 2);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    config_ = new fs::path(WriteSmallConfig("pipeline"));
    const std::string base = "--config " + Quote(*config_) + " ";
    for (const std::string stage : {"gen-synth", "train-micro",
                                    "select-cues"}) {
      const Result r = RunCli(base + stage);
      ASSERT_EQ(r.code, 0) << stage << ": " << r.output;
    }
  }
  static void TearDownTestSuite() {
    delete config_;
    config_ = nullptr;
  }
  static std::string Base() { return "--config " + Quote(*config_) + " "; }
  static fs::path Out() { return config_->parent_path() / "out"; }

  static fs::path* config_;
};

fs::path* CliPipeline::config_ = nullptr;

TEST_F(CliPipeline, StagesRecordVerifiableArtifacts) {
  EXPECT_TRUE(fs::exists(Out() / "manifest.json"));
  const Result r = RunCli(Base() + "verify-manifest");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find(" 0 problems"), std::string::npos) << r.output;
}

TEST_F(CliPipeline, UnknownBenchmarkListsValidNames) {
  const Result r = RunCli(Base() + "evaluate --benchmark glue");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("stereoset"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("bbq"), std::string::npos) << r.output;
}

TEST_F(CliPipeline, OversizedKIsAConfigError) {
  const Result r = RunCli(Base() + "select-cues --k 1000");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("exceeds"), std::string::npos) << r.output;
}

TEST_F(CliPipeline, UnsupportedLayerIsABackendError) {
  const Result r = RunCli(Base() + "attribute --method fba --layer W9");
  EXPECT_EQ(r.code, 2) << r.output;
}

// Runs last in this suite: it corrupts an artifact.
TEST_F(CliPipeline, ZTamperedArtifactFailsVerification) {
  const fs::path weights = Out() / "model" / "micro.mlm";
  ASSERT_TRUE(fs::exists(weights));
  {
    std::fstream f(weights, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    f.put('\x7f');
  }
  const Result r = RunCli(Base() + "verify-manifest");
  EXPECT_EQ(r.code, 4) << r.output;
  EXPECT_NE(r.output.find("micro.mlm"), std::string::npos) << r.output;
  // Downstream stages refuse the modified input.
  EXPECT_NE(RunCli(Base() + "select-cues").code, 0);
}

}  // namespace
}  // namespace biasattr
