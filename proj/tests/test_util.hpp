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

// Random generators shared by the property tests.

#pragma once

#include <fstream>
#include <string>

#include "biasattr/bias_math.hpp"
#include "json.hpp"

namespace biasattr::test {

inline Vec RandomVector(Rng& rng, int n, double scale = 1.0) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.Normal();
  return v;
}

inline math::ProjectionSlice RandomSlice(Rng& rng, int candidates, int dim,
                                         double scale = 1.0) {
  math::ProjectionSlice slice{Mat(candidates, dim), Vec(candidates)};
  for (int k = 0; k < candidates; ++k) {
    for (int j = 0; j < dim; ++j) slice.rows(k, j) = scale * rng.Normal();
    slice.bias[k] = 0.5 * rng.Normal();
  }
  return slice;
}

inline math::ProbVec RandomDistribution(Rng& rng, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.Uniform());
  v /= v.sum();
  return math::ProbVec::FromValues(v);
}

inline std::string TestDataPath(const std::string& name) {
  return std::string(BIASATTR_TEST_DATA_DIR) + "/" + name;
}

inline std::string SharePath(const std::string& name) {
  return std::string(BIASATTR_SHARE_DIR) + "/" + name;
}

inline nlohmann::json LoadJsonFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot open ", path);
  return nlohmann::json::parse(in);
}

inline Vec JsonToVec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace biasattr::test
