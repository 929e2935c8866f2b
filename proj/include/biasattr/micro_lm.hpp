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

// A fixed-window neural probabilistic language model:
//
//   x  = concat(embedding[c_1], ..., embedding[c_window])
//   h1 = tanh(layer1 * x + bias1)
//   h2 = tanh(layer2 * h1 + bias2)          <- projection input
//   z  = projection * h2 + projection_bias  <- vocabulary logits
//
// Trained by hand-written backpropagation in double precision. Token 0 is the
// padding token; contexts shorter than the window are left-padded with it.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "biasattr/bias_math.hpp"
#include "biasattr/common.hpp"
#include "biasattr/hashing.hpp"
#include "biasattr/model.hpp"

namespace biasattr::micro {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnknownId = 1;
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnknownToken = "<unk>";

// Lower-cases ASCII and splits on whitespace. Sentence punctuation becomes its
// own token and a trailing possessive "'s" is split off.
inline std::vector<std::string> SplitWords(std::string_view text) {
  std::string normalized;
  normalized.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    // U+2019 (right single quotation mark) -> ASCII apostrophe.
    if (i + 2 < text.size() && static_cast<unsigned char>(text[i]) == 0xE2 &&
        static_cast<unsigned char>(text[i + 1]) == 0x80 &&
        static_cast<unsigned char>(text[i + 2]) == 0x99) {
      normalized.push_back('\'');
      i += 2;
      continue;
    }
    normalized.push_back(static_cast<char>(
        std::tolower(static_cast<unsigned char>(text[i]))));
  }
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (current.empty()) return;
    if (current.size() > 2 && current.ends_with("'s")) {
      words.push_back(current.substr(0, current.size() - 2));
      words.emplace_back("'s");
    } else {
      words.push_back(current);
    }
    current.clear();
  };
  for (char c : normalized) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (std::strchr(".,!?;:", c) != nullptr) {
      flush();
      words.emplace_back(1, c);
    } else {
      current.push_back(c);
    }
  }
  flush();
  return words;
}

// Whitespace word-level vocabulary with reserved <pad> and <unk>.
class Vocabulary {
 public:
  Vocabulary() : tokens_{std::string(kPadToken), std::string(kUnknownToken)} {
    Reindex();
  }

  // Every distinct word of `corpus`, sorted, after the reserved tokens.
  static Vocabulary FromCorpus(std::span<const std::string> lines) {
    std::map<std::string, int> seen;
    for (const auto& line : lines) {
      for (auto& w : SplitWords(line)) seen.emplace(std::move(w), 0);
    }
    Vocabulary vocab;
    for (const auto& [word, unused] : seen) {
      if (word != kPadToken && word != kUnknownToken) {
        vocab.tokens_.push_back(word);
      }
    }
    vocab.Reindex();
    return vocab;
  }

  static Vocabulary FromTokens(std::vector<std::string> tokens) {
    Require(tokens.size() >= 2 && tokens[0] == kPadToken &&
                tokens[1] == kUnknownToken,
            "vocabulary must start with ", kPadToken, " and ", kUnknownToken);
    Vocabulary vocab;
    vocab.tokens_ = std::move(tokens);
    vocab.Reindex();
    Require(vocab.index_.size() == vocab.tokens_.size(),
            "vocabulary has duplicate tokens");
    return vocab;
  }

  static Vocabulary Load(const std::string& path) {
    std::ifstream in(path);
    if (!in) Fail(ErrorKind::kConfig, "cannot open vocabulary ", path);
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    try {
      return FromTokens(std::move(tokens));
    } catch (const Error& e) {
      Fail(ErrorKind::kFormat, path, ": ", e.what());
    }
  }

  std::string Serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  TokenSeq Encode(std::string_view text) const {
    TokenSeq seq;
    seq.text = std::string(text);
    for (const auto& w : SplitWords(text)) seq.ids.push_back(Lookup(w));
    return seq;
  }

  TokenId Lookup(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnknownId : it->second;
  }

  bool Contains(std::string_view word) const {
    return index_.count(std::string(word)) > 0;
  }

  const std::string& Token(TokenId id) const {
    Require(id >= 0 && id < size(), "token id out of range: ", id);
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenId size() const { return static_cast<TokenId>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void Reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      index_.emplace(tokens_[i], static_cast<TokenId>(i));
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct MicroConfig {
  int vocab_size = 64;
  int window = 3;
  int embed_dim = 8;
  int hidden1_dim = 32;
  int hidden2_dim = 16;
  std::uint64_t seed = 42;

  void Validate() const {
    Require(vocab_size >= 2 && embed_dim >= 2 && hidden1_dim >= 2 &&
                hidden2_dim >= 2,
            "MicroConfig dimensions must all be >= 2");
    Require(window >= 1, "MicroConfig window must be >= 1");
  }

  int input_dim() const { return window * embed_dim; }

  friend bool operator==(const MicroConfig&, const MicroConfig&) = default;
};

struct MicroWeights {
  MicroConfig config;
  Mat embeddings;       // vocab x embed
  Mat layer1;           // hidden1 x (window * embed)
  Vec bias1;            // hidden1
  Mat layer2;           // hidden2 x hidden1
  Vec bias2;            // hidden2
  Mat projection;       // vocab x hidden2
  Vec projection_bias;  // vocab

  static MicroWeights Zeros(const MicroConfig& config) {
    config.Validate();
    MicroWeights w;
    w.config = config;
    w.embeddings = Mat::Zero(config.vocab_size, config.embed_dim);
    w.layer1 = Mat::Zero(config.hidden1_dim, config.input_dim());
    w.bias1 = Vec::Zero(config.hidden1_dim);
    w.layer2 = Mat::Zero(config.hidden2_dim, config.hidden1_dim);
    w.bias2 = Vec::Zero(config.hidden2_dim);
    w.projection = Mat::Zero(config.vocab_size, config.hidden2_dim);
    w.projection_bias = Vec::Zero(config.vocab_size);
    return w;
  }

  // Flat views of every parameter tensor in serialization order.
  std::array<std::span<double>, 7> Tensors() {
    return {Flat(embeddings), Flat(layer1), Flat(bias1),          Flat(layer2),
            Flat(bias2),      Flat(projection), Flat(projection_bias)};
  }
  std::array<std::span<const double>, 7> Tensors() const {
    auto& self = const_cast<MicroWeights&>(*this);
    auto views = self.Tensors();
    std::array<std::span<const double>, 7> out;
    for (std::size_t i = 0; i < views.size(); ++i) out[i] = views[i];
    return out;
  }

  std::size_t ParameterCount() const {
    std::size_t n = 0;
    for (auto t : Tensors()) n += t.size();
    return n;
  }

  bool AllFinite() const {
    for (auto t : Tensors()) {
      for (double v : t) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  bool BitwiseEqual(const MicroWeights& other) const {
    if (!(config == other.config)) return false;
    auto a = Tensors();
    auto b = other.Tensors();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].size() != b[i].size() ||
          std::memcmp(a[i].data(), b[i].data(), a[i].size_bytes()) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  template <typename M>
  static std::span<double> Flat(M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
  }
};

// Deterministic initialization: uniform embeddings in [-0.5, 0.5], Xavier
// uniform layers, zero biases.
inline MicroWeights InitWeights(const MicroConfig& config) {
  MicroWeights w = MicroWeights::Zeros(config);
  Rng rng(config.seed);
  auto fill = [&rng](Mat& m, double limit) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = rng.Uniform(-limit, limit);
    }
  };
  auto xavier = [](const Mat& m) {
    return std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  };
  fill(w.embeddings, 0.5);
  fill(w.layer1, xavier(w.layer1));
  fill(w.layer2, xavier(w.layer2));
  fill(w.projection, xavier(w.projection));
  return w;
}

struct Activations {
  Vec input;
  Vec hidden1;
  Vec hidden2;
  Vec logits;
};

// Left-pads (or truncates from the left) to exactly `window` tokens.
inline std::vector<TokenId> WindowContext(std::span<const TokenId> context,
                                          int window) {
  std::vector<TokenId> out(static_cast<std::size_t>(window), kPadId);
  const std::size_t take =
      std::min(context.size(), static_cast<std::size_t>(window));
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
            out.end() - static_cast<std::ptrdiff_t>(take));
  return out;
}

inline Vec Tanh(const Vec& v) {
  return v.unaryExpr([](double x) { return std::tanh(x); });
}

inline Activations Forward(const MicroWeights& w,
                           std::span<const TokenId> context,
                           const InterventionMask* mask = nullptr) {
  const MicroConfig& c = w.config;
  const std::vector<TokenId> ctx = WindowContext(context, c.window);
  Activations a;
  a.input.resize(c.input_dim());
  for (int p = 0; p < c.window; ++p) {
    const TokenId id = ctx[static_cast<std::size_t>(p)];
    Require(id >= 0 && id < c.vocab_size, "token id ", id,
            " out of range for vocab size ", c.vocab_size);
    a.input.segment(p * c.embed_dim, c.embed_dim) =
        w.embeddings.row(id).transpose();
  }
  a.hidden1 = Tanh(w.layer1 * a.input + w.bias1);
  if (mask != nullptr && mask->layer() == LayerTag::kHidden1) {
    ClampInPlace(a.hidden1, *mask);
  }
  a.hidden2 = Tanh(w.layer2 * a.hidden1 + w.bias2);
  if (mask != nullptr && mask->layer() == LayerTag::kProjectionInput) {
    ClampInPlace(a.hidden2, *mask);
  }
  a.logits = w.projection * a.hidden2 + w.projection_bias;
  return a;
}

inline double LogSoftmaxAt(const Vec& logits, Eigen::Index target) {
  const double top = logits.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    sum += std::exp(logits[i] - top);
  }
  return logits[target] - top - std::log(sum);
}

// -- Training ----------------------------------------------------------------

enum class Optimizer { kSgd, kAdam };

struct TrainSpec {
  double learning_rate = 0.01;
  int epochs = 30;
  int batch_size = 32;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::kAdam;
  // Decays the step size linearly to zero over the run.
  bool linear_decay = false;
  std::string corpus_path;

  void Validate() const {
    Require(learning_rate >= 0.0 && std::isfinite(learning_rate),
            "learning_rate must be non-negative");
    Require(epochs >= 1, "epochs must be >= 1");
    Require(batch_size >= 1, "batch_size must be >= 1");
  }
};

// One next-token prediction: tokens[position] given the tokens before it.
struct Example {
  const std::vector<TokenId>* sentence;
  std::size_t position;

  std::span<const TokenId> Context() const {
    return {sentence->data(), position};
  }
  TokenId Target() const { return (*sentence)[position]; }
};

inline std::vector<Example> MakeExamples(
    const std::vector<std::vector<TokenId>>& corpus) {
  std::vector<Example> out;
  for (const auto& sentence : corpus) {
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      out.push_back({&sentence, i});
    }
  }
  return out;
}

// Mean cross-entropy over `batch`; if `grads` is non-null it receives the
// gradient of that mean (it must be zero-initialized with matching shapes).
inline double BatchLossAndGradient(const MicroWeights& w,
                                   std::span<const Example> batch,
                                   MicroWeights* grads) {
  Require(!batch.empty(), "batch is empty");
  const MicroConfig& c = w.config;
  const auto n = static_cast<Eigen::Index>(batch.size());
  const double scale = 1.0 / static_cast<double>(n);

  // One row per example; the whole batch goes through each layer at once.
  std::vector<std::vector<TokenId>> contexts(batch.size());
  Mat input(n, c.input_dim());
  for (Eigen::Index b = 0; b < n; ++b) {
    contexts[b] = WindowContext(batch[b].Context(), c.window);
    for (int p = 0; p < c.window; ++p) {
      const TokenId id = contexts[b][static_cast<std::size_t>(p)];
      Require(id >= 0 && id < c.vocab_size, "token id ", id, " out of range");
      input.block(b, p * c.embed_dim, 1, c.embed_dim) = w.embeddings.row(id);
    }
  }
  auto tanh = [](double x) { return std::tanh(x); };
  const Mat hidden1 = ((input * w.layer1.transpose()).rowwise() +
                       w.bias1.transpose())
                          .unaryExpr(tanh);
  const Mat hidden2 = ((hidden1 * w.layer2.transpose()).rowwise() +
                       w.bias2.transpose())
                          .unaryExpr(tanh);
  Mat logits =
      (hidden2 * w.projection.transpose()).rowwise() + w.projection_bias.transpose();

  double loss = 0.0;
  for (Eigen::Index b = 0; b < n; ++b) {
    const TokenId target = batch[b].Target();
    Require(target >= 0 && target < c.vocab_size, "target id ", target,
            " out of range");
    auto row = logits.row(b);
    const double top = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) {
      row[v] = std::exp(row[v] - top);
      sum += row[v];
    }
    loss -= std::log(row[target] / sum);
    // Row b now holds d(mean loss)/d(logits) for example b.
    row *= scale / sum;
    row[target] -= scale;
  }
  if (grads == nullptr) return loss * scale;

  const Mat& d_logits = logits;
  grads->projection.noalias() += d_logits.transpose() * hidden2;
  grads->projection_bias += d_logits.colwise().sum().transpose();
  const Mat d_pre2 = ((d_logits * w.projection).array() *
                      (1.0 - hidden2.array().square()))
                         .matrix();
  grads->layer2.noalias() += d_pre2.transpose() * hidden1;
  grads->bias2 += d_pre2.colwise().sum().transpose();
  const Mat d_pre1 = ((d_pre2 * w.layer2).array() *
                      (1.0 - hidden1.array().square()))
                         .matrix();
  grads->layer1.noalias() += d_pre1.transpose() * input;
  grads->bias1 += d_pre1.colwise().sum().transpose();
  const Mat d_input = d_pre1 * w.layer1;
  for (Eigen::Index b = 0; b < n; ++b) {
    for (int p = 0; p < c.window; ++p) {
      grads->embeddings.row(contexts[b][static_cast<std::size_t>(p)]) +=
          d_input.block(b, p * c.embed_dim, 1, c.embed_dim);
    }
  }
  return loss * scale;
}

// Mean loss over `examples`, evaluated in fixed-size chunks.
inline double CorpusLoss(const MicroWeights& w,
                         std::span<const Example> examples) {
  Require(!examples.empty(), "no examples");
  constexpr std::size_t kChunk = 512;
  double total = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, examples.size() - start);
    total += BatchLossAndGradient(w, examples.subspan(start, len), nullptr) *
             static_cast<double>(len);
  }
  return total / static_cast<double>(examples.size());
}

struct TrainResult {
  MicroWeights weights;
  std::vector<double> epoch_losses;  // full-corpus loss after each epoch
};

// Single-threaded, deterministic for a fixed seed.
inline TrainResult Train(const MicroConfig& config, const TrainSpec& spec,
                         const std::vector<std::vector<TokenId>>& corpus) {
  spec.Validate();
  Require(!corpus.empty(), "training corpus is empty");
  std::vector<Example> examples = MakeExamples(corpus);
  Require(!examples.empty(), "training corpus has no tokens");

  TrainResult result{InitWeights(config), {}};
  MicroWeights& w = result.weights;
  MicroWeights grads = MicroWeights::Zeros(config);
  MicroWeights first_moment = MicroWeights::Zeros(config);
  MicroWeights second_moment = MicroWeights::Zeros(config);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;
  std::int64_t step = 0;

  const std::size_t batch = static_cast<std::size_t>(spec.batch_size);
  const double total_steps = static_cast<double>(
      spec.epochs * ((examples.size() + batch - 1) / batch));
  Rng rng(spec.seed);
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.Shuffle(examples);
    for (std::size_t start = 0; start < examples.size();
         start += static_cast<std::size_t>(spec.batch_size)) {
      const std::size_t end = std::min(
          examples.size(), start + static_cast<std::size_t>(spec.batch_size));
      for (auto t : grads.Tensors()) std::fill(t.begin(), t.end(), 0.0);
      const double loss = BatchLossAndGradient(
          w, std::span(examples).subspan(start, end - start), &grads);
      if (!std::isfinite(loss)) {
        Fail(ErrorKind::kDiagnostic, "non-finite training loss at epoch ",
             epoch, ", example offset ", start);
      }
      if (spec.learning_rate == 0.0) continue;
      const double lr =
          spec.linear_decay
              ? spec.learning_rate * (1.0 - static_cast<double>(step) / total_steps)
              : spec.learning_rate;
      ++step;
      auto params = w.Tensors();
      auto g = grads.Tensors();
      auto m = first_moment.Tensors();
      auto v = second_moment.Tensors();
      const double correction1 = 1.0 - std::pow(kBeta1, step);
      const double correction2 = 1.0 - std::pow(kBeta2, step);
      for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t i = 0; i < params[t].size(); ++i) {
          if (spec.optimizer == Optimizer::kSgd) {
            params[t][i] -= lr * g[t][i];
            continue;
          }
          m[t][i] = kBeta1 * m[t][i] + (1 - kBeta1) * g[t][i];
          v[t][i] = kBeta2 * v[t][i] + (1 - kBeta2) * g[t][i] * g[t][i];
          params[t][i] -= lr * (m[t][i] / correction1) /
                          (std::sqrt(v[t][i] / correction2) + kAdamEps);
        }
      }
    }
    result.epoch_losses.push_back(CorpusLoss(w, examples));
  }
  return result;
}

namespace internal {

// Extended-precision loss for the finite-difference oracle; independent of
// the backpropagation code above.
inline long double LossExtended(const MicroWeights& w,
                                std::span<const Example> batch) {
  using Real = long double;
  using RVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  using RMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
  const MicroConfig& c = w.config;
  const RMat layer1 = w.layer1.cast<Real>();
  const RMat layer2 = w.layer2.cast<Real>();
  const RMat projection = w.projection.cast<Real>();
  Real total = 0;
  for (const Example& ex : batch) {
    const std::vector<TokenId> ctx = WindowContext(ex.Context(), c.window);
    RVec x(c.input_dim());
    for (int p = 0; p < c.window; ++p) {
      for (int e = 0; e < c.embed_dim; ++e) {
        x[p * c.embed_dim + e] =
            w.embeddings(ctx[static_cast<std::size_t>(p)], e);
      }
    }
    RVec h1 = layer1 * x + w.bias1.cast<Real>();
    for (auto& v : h1) v = std::tanh(v);
    RVec h2 = layer2 * h1 + w.bias2.cast<Real>();
    for (auto& v : h2) v = std::tanh(v);
    const RVec z = projection * h2 + w.projection_bias.cast<Real>();
    const Real top = z.maxCoeff();
    Real sum = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) sum += std::exp(z[i] - top);
    total -= z[ex.Target()] - top - std::log(sum);
  }
  return total / static_cast<Real>(batch.size());
}

}  // namespace internal

// Max relative error between backpropagated and central-difference gradients
// over every parameter: |a - n| / max(|a|, |n|, 1e-8).
inline double AnalyticVsNumericTrainGrad(const MicroWeights& weights,
                                         std::span<const Example> batch,
                                         double step = 1e-5) {
  Require(!batch.empty(), "batch is empty");
  MicroWeights grads = MicroWeights::Zeros(weights.config);
  BatchLossAndGradient(weights, batch, &grads);
  MicroWeights probe = weights;
  auto params = probe.Tensors();
  auto analytic = grads.Tensors();
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double saved = params[t][i];
      params[t][i] = saved + step;
      const long double plus = internal::LossExtended(probe, batch);
      params[t][i] = saved - step;
      const long double minus = internal::LossExtended(probe, batch);
      params[t][i] = saved;
      const double numeric = static_cast<double>((plus - minus) / (2 * step));
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// -- Hidden1 <-> projection input ----------------------------------------------

inline Vec LiftHidden1(const MicroWeights& w, const Vec& hidden1) {
  Require(hidden1.size() == w.config.hidden1_dim, "hidden1 has length ",
          hidden1.size(), ", expected ", w.config.hidden1_dim);
  return Tanh(w.layer2 * hidden1 + w.bias2);
}

// grad_hidden1 = layer2^T ((1 - h2^2) * grad_hidden2), h2 = LiftHidden1(h1).
inline Vec ChainGradToHidden1(const MicroWeights& w, const Vec& hidden1,
                              const Vec& grad_hidden2) {
  Require(grad_hidden2.size() == w.config.hidden2_dim,
          "gradient at hidden2 has length ", grad_hidden2.size(),
          ", expected ", w.config.hidden2_dim);
  const Vec h2 = LiftHidden1(w, hidden1);
  return w.layer2.transpose() *
         (grad_hidden2.array() * (1.0 - h2.array().square())).matrix();
}

inline Vec ChainGradToHidden1(const MicroWeights& w,
                              std::span<const TokenId> context,
                              const Vec& grad_hidden2) {
  return ChainGradToHidden1(w, Forward(w, context).hidden1, grad_hidden2);
}

// -- Serialization -------------------------------------------------------------

inline constexpr char kMagic[4] = {'M', 'L', 'M', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

namespace internal {

template <typename T>
void PutLittleEndian(std::string& out, T value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T Get(std::string_view what) {
    if (bytes_.size() - offset_ < sizeof(T)) {
      Fail(ErrorKind::kFormat, source_, ": truncated at offset ", offset_,
           " while reading ", what);
    }
    std::array<unsigned char, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + offset_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw.begin(), raw.end());
    }
    offset_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }
  const std::string& source() const { return source_; }

 private:
  std::string_view bytes_;
  std::string source_;
  std::size_t offset_ = 0;
};

}  // namespace internal

inline std::string SerializeWeights(const MicroWeights& w) {
  std::string out(kMagic, sizeof(kMagic));
  internal::PutLittleEndian<std::uint32_t>(out, kFormatVersion);
  const MicroConfig& c = w.config;
  for (int v : {c.vocab_size, c.window, c.embed_dim, c.hidden1_dim,
                c.hidden2_dim}) {
    internal::PutLittleEndian<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  internal::PutLittleEndian<std::uint64_t>(out, c.seed);
  for (auto t : w.Tensors()) {
    for (double v : t) internal::PutLittleEndian<double>(out, v);
  }
  return out;
}

inline MicroWeights DeserializeWeights(std::string_view bytes,
                                       const std::string& source = "weights") {
  internal::Reader in(bytes, source);
  if (bytes.size() < sizeof(kMagic) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    Fail(ErrorKind::kFormat, source, ": bad magic at offset 0 (expected MLM1)");
  }
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) in.Get<char>("magic");
  const auto version = in.Get<std::uint32_t>("version");
  if (version != kFormatVersion) {
    Fail(ErrorKind::kFormat, source, ": unsupported format version ", version,
         " (this build reads version ", kFormatVersion, ")");
  }
  MicroConfig c;
  c.vocab_size = static_cast<int>(in.Get<std::uint32_t>("vocab_size"));
  c.window = static_cast<int>(in.Get<std::uint32_t>("window"));
  c.embed_dim = static_cast<int>(in.Get<std::uint32_t>("embed_dim"));
  c.hidden1_dim = static_cast<int>(in.Get<std::uint32_t>("hidden1_dim"));
  c.hidden2_dim = static_cast<int>(in.Get<std::uint32_t>("hidden2_dim"));
  c.seed = in.Get<std::uint64_t>("seed");
  try {
    c.Validate();
  } catch (const Error& e) {
    Fail(ErrorKind::kFormat, source, ": invalid header: ", e.what());
  }
  // Size check before allocating, so a corrupt header cannot trigger a huge
  // allocation and no partially filled weights ever escape.
  const std::size_t expected =
      static_cast<std::size_t>(c.vocab_size) * c.embed_dim +
      static_cast<std::size_t>(c.hidden1_dim) * (c.input_dim() + 1) +
      static_cast<std::size_t>(c.hidden2_dim) * (c.hidden1_dim + 1) +
      static_cast<std::size_t>(c.vocab_size) * (c.hidden2_dim + 1);
  if (in.remaining() != expected * sizeof(double)) {
    Fail(ErrorKind::kFormat, source, ": payload at offset ", in.offset(),
         " has ", in.remaining(), " bytes, expected ",
         expected * sizeof(double));
  }
  MicroWeights w = MicroWeights::Zeros(c);
  for (auto t : w.Tensors()) {
    for (double& v : t) v = in.Get<double>("weights");
  }
  if (!w.AllFinite()) {
    Fail(ErrorKind::kFormat, source, ": weights contain non-finite values");
  }
  return w;
}

inline std::string VocabularyPathFor(const std::string& weights_path) {
  return weights_path + ".vocab";
}

inline void SaveModel(const MicroWeights& w, const Vocabulary& vocab,
                      const std::string& path) {
  Require(vocab.size() == w.config.vocab_size, "vocabulary has ", vocab.size(),
          " tokens but the weights expect ", w.config.vocab_size);
  WriteFileBytes(path, SerializeWeights(w));
  WriteFileBytes(VocabularyPathFor(path), vocab.Serialize());
}

inline MicroWeights LoadWeights(const std::string& path) {
  return DeserializeWeights(ReadFileBytes(path), path);
}

// -- Backend -------------------------------------------------------------------

class MicroBackend : public ModelBackend {
 public:
  MicroBackend(MicroWeights weights, Vocabulary vocab)
      : weights_(std::make_shared<const MicroWeights>(std::move(weights))),
        vocab_(std::make_shared<const Vocabulary>(std::move(vocab))) {
    Require(vocab_->size() == weights_->config.vocab_size, "vocabulary has ",
            vocab_->size(), " tokens but the weights expect ",
            weights_->config.vocab_size);
    fingerprint_ =
        Sha256Hex(SerializeWeights(*weights_) + vocab_->Serialize());
  }

  static MicroBackend Load(const std::string& path) {
    MicroWeights w = LoadWeights(path);
    Vocabulary v = Vocabulary::Load(VocabularyPathFor(path));
    if (v.size() != w.config.vocab_size) {
      Fail(ErrorKind::kFormat, path, ": vocabulary size ", v.size(),
           " does not match weights vocab_size ", w.config.vocab_size);
    }
    return MicroBackend(std::move(w), std::move(v));
  }

  const MicroWeights& weights() const { return *weights_; }
  const Vocabulary& vocabulary() const { return *vocab_; }

  BackendCapabilities Capabilities() const override {
    const MicroConfig& c = weights_->config;
    return {c.vocab_size, c.hidden2_dim, c.hidden1_dim, true, true,
            "micro-word-v1"};
  }

  TokenSeq Tokenize(std::string_view text) const override {
    return vocab_->Encode(text);
  }

  HiddenSnapshot Snapshot(const TokenSeq& prompt,
                          LayerTag layer) const override {
    Require(!prompt.ids.empty(), "prompt is empty");
    const Activations a = Forward(*weights_, prompt.ids);
    return {layer == LayerTag::kHidden1 ? a.hidden1 : a.hidden2, layer};
  }

  math::ProjectionSlice ProjectionSlice(
      std::span<const TokenId> token_ids) const override {
    CheckDistinctIds(token_ids);
    const Eigen::Index n = static_cast<Eigen::Index>(token_ids.size());
    math::ProjectionSlice slice{Mat(n, weights_->config.hidden2_dim), Vec(n)};
    for (Eigen::Index k = 0; k < n; ++k) {
      slice.rows.row(k) = weights_->projection.row(token_ids[k]);
      slice.bias[k] = weights_->projection_bias[token_ids[k]];
    }
    return slice;
  }

  std::vector<double> SpanLogprobs(const TokenSeq& tokens, TokenSpan span,
                                   const InterventionMask* mask,
                                   MaskScope scope) const override {
    Require(span.begin < span.end && span.end <= tokens.size(),
            "invalid scored span");
    std::vector<double> out;
    out.reserve(span.size());
    for (std::size_t t = span.begin; t < span.end; ++t) {
      const bool masked = mask != nullptr &&
                          (scope == MaskScope::kAllPositions || t + 1 == span.end);
      const Activations a = Forward(*weights_, std::span(tokens.ids).first(t),
                                    masked ? mask : nullptr);
      out.push_back(LogSoftmaxAt(a.logits, tokens.ids[t]));
    }
    return out;
  }

  Vec NextTokenLogits(const TokenSeq& prompt,
                      const InterventionMask* mask) const override {
    Require(!prompt.ids.empty(), "prompt is empty");
    return Forward(*weights_, prompt.ids, mask).logits;
  }

  Vec LiftHidden1(const Vec& hidden1) const override {
    return micro::LiftHidden1(*weights_, hidden1);
  }

  Vec PullBackToHidden1(const Vec& hidden1,
                        const Vec& grad_projection_input) const override {
    return ChainGradToHidden1(*weights_, hidden1, grad_projection_input);
  }

  std::optional<TokenId> UnknownTokenId() const override { return kUnknownId; }

  Vec TokenEmbedding(TokenId id) const override {
    Require(id >= 0 && id < weights_->config.vocab_size,
            "token id out of range: ", id);
    return weights_->embeddings.row(id).transpose();
  }

  std::string Fingerprint() const override { return fingerprint_; }

 private:
  void CheckDistinctIds(std::span<const TokenId> ids) const {
    std::vector<TokenId> sorted(ids.begin(), ids.end());
    std::sort(sorted.begin(), sorted.end());
    Require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
            "projection slice request has duplicate token ids");
    for (TokenId id : ids) {
      Require(id >= 0 && id < weights_->config.vocab_size,
              "token id out of range: ", id);
    }
  }

  std::shared_ptr<const MicroWeights> weights_;
  std::shared_ptr<const Vocabulary> vocab_;
  std::string fingerprint_;
};

// Reads a corpus file (one sentence per line) into token ids.
inline std::vector<std::string> ReadLines(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot open ", path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::vector<TokenId>> EncodeCorpus(
    const Vocabulary& vocab, std::span<const std::string> lines) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    TokenSeq seq = vocab.Encode(line);
    if (!seq.ids.empty()) out.push_back(std::move(seq.ids));
  }
  return out;
}

}  // namespace biasattr::micro
