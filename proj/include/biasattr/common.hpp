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

// Shared plumbing: error types, string building, deterministic random
// numbers and an order-preserving parallel loop.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace biasattr {

// Failure classes. The CLI maps them onto exit codes.
enum class ErrorKind {
  kInvalidArgument,  // Violated precondition of an in-process call.
  kConfig,           // Bad configuration or input file.
  kBackend,          // Model backend or transport failure.
  kCapability,       // Backend does not support the request.
  kFormat,           // Corrupt or mismatched file.
  kDiagnostic,       // A self-check failed.
};

inline std::string_view ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument:
      return "invalid argument";
    case ErrorKind::kConfig:
      return "config error";
    case ErrorKind::kBackend:
      return "backend error";
    case ErrorKind::kCapability:
      return "capability error";
    case ErrorKind::kFormat:
      return "format error";
    case ErrorKind::kDiagnostic:
      return "diagnostic failure";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

template <typename... Args>
std::string StrCat(const Args&... args) {
  std::ostringstream out;
  out.precision(17);
  (out << ... << args);
  return out.str();
}

template <typename... Args>
[[noreturn]] void Fail(ErrorKind kind, const Args&... args) {
  throw Error(kind, StrCat(args...));
}

template <typename... Args>
void Require(bool condition, const Args&... args) {
  if (!condition) Fail(ErrorKind::kInvalidArgument, args...);
}

// Random numbers whose streams are identical on every platform. The standard
// engines are fully specified; the standard distributions are not, so the
// few we need are derived here from raw engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double Uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, bound).
  std::uint64_t Below(std::uint64_t bound) {
    Require(bound > 0, "Rng::Below: bound must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return draw % bound;
  }

  double Normal() {
    // Box-Muller; 1 - Uniform() lies in (0, 1].
    const double u1 = 1.0 - Uniform();
    const double u2 = Uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void Shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[Below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

inline std::size_t DefaultWorkers() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Callers write results
// into slot i, so output never depends on completion order. The first
// exception (lowest index) is rethrown after all workers stop.
inline void ParallelFor(std::size_t n, std::size_t workers,
                        const std::function<void(std::size_t)>& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::size_t error_index = n;
  std::exception_ptr error;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(body);
  body();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace biasattr
