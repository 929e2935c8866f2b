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

// Regenerates the frozen test fixtures: the seed-42 golden micro model and a
// protocol transcript recorded against it. Values derived from the model come
// from tools/oracles/micro_golden.py, not from this program.
//
//   make_fixtures <tests/data>

#include <fstream>
#include <iostream>
#include <string>

#include "biasattr/micro_lm.hpp"
#include "biasattr/protocol.hpp"
#include "protocol_script.hpp"

namespace biasattr::test {

micro::MicroBackend GoldenModel() {
  micro::MicroConfig config;  // 64 / window 3 / 8 / 32 / 16, seed 42
  std::vector<std::string> tokens = {"<pad>", "<unk>", "a",  "b",
                                     "c",     "male",  "female"};
  while (tokens.size() < 64) tokens.push_back(StrCat("t", tokens.size()));
  return micro::MicroBackend(micro::InitWeights(config),
                             micro::Vocabulary::FromTokens(tokens));
}

}  // namespace biasattr::test

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <output dir>\n";
    return 2;
  }
  namespace bt = biasattr::test;
  const std::string dir = argv[1];
  const auto model = bt::GoldenModel();
  biasattr::micro::SaveModel(model.weights(), model.vocabulary(),
                             dir + "/micro_golden.mlm");

  std::ofstream record(dir + "/protocol_session.txt");
  biasattr::protocol::ProtocolServer server(model);
  biasattr::protocol::RemoteBackend remote(
      std::make_unique<biasattr::protocol::LoopbackTransport>(server, &record));
  bt::RunScriptedSession(remote);
  std::cout << "wrote fixtures to " << dir << "\n";
  return 0;
}
