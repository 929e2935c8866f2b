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

// Probability functionals over a candidate-restricted next-token distribution
// and their closed-form gradients with respect to the projection-layer input.
//
// Everything is in nats. A functional B maps one or more distributions to a
// scalar; the gradient is obtained by chaining
//
//   dB/dh = rows^T * J_softmax(z)^T * dB/dp,    z = rows * h + bias.
//
// All functions are pure.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasattr/common.hpp"

namespace biasattr {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace math {

inline constexpr double kProbFloor = 1e-300;
inline constexpr double kDefaultEpsilon = 1e-9;
inline constexpr double kProbSumTolerance = 1e-9;

// A validated probability vector: non-negative entries summing to one.
class ProbVec {
 public:
  static ProbVec FromValues(Vec values) {
    Require(values.size() >= 2, "ProbVec needs at least 2 entries, got ",
            values.size());
    double sum = 0.0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      const double v = values[i];
      Require(std::isfinite(v) && v >= 0.0, "ProbVec entry ", i,
              " is not a non-negative finite number: ", v);
      sum += v;
    }
    Require(std::abs(sum - 1.0) <= kProbSumTolerance,
            "ProbVec entries sum to ", sum, ", expected 1");
    return ProbVec(std::move(values));
  }

  static ProbVec FromValues(std::initializer_list<double> values) {
    Vec v(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (double x : values) v[i++] = x;
    return FromValues(std::move(v));
  }

  const Vec& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_[i]; }

 private:
  explicit ProbVec(Vec values) : values_(std::move(values)) {}
  Vec values_;
};

// Projection rows and biases for a set of candidate tokens, in request order.
struct ProjectionSlice {
  Mat rows;  // candidates x hidden_dim
  Vec bias;  // candidates

  Eigen::Index hidden_dim() const { return rows.cols(); }
  Eigen::Index candidates() const { return rows.rows(); }

  void Validate() const {
    Require(rows.rows() == bias.size(), "ProjectionSlice has ", rows.rows(),
            " rows but ", bias.size(), " bias entries");
    Require(rows.allFinite() && bias.allFinite(),
            "ProjectionSlice has non-finite entries");
  }
};

enum class FunctionalKind { kInverseEntropy, kGeneralizedJsd, kAbsGap };

inline std::string_view FunctionalKindName(FunctionalKind kind) {
  switch (kind) {
    case FunctionalKind::kInverseEntropy:
      return "inverse_entropy";
    case FunctionalKind::kGeneralizedJsd:
      return "generalized_jsd";
    case FunctionalKind::kAbsGap:
      return "abs_gap";
  }
  return "unknown";
}

// The scalar bias measure B attributed along an activation path.
struct BiasFunctional {
  FunctionalKind kind = FunctionalKind::kInverseEntropy;
  double epsilon = kDefaultEpsilon;
  // Candidate indices of the demographic pair; used by kAbsGap only.
  Eigen::Index first = 0;
  Eigen::Index second = 1;

  static BiasFunctional InverseEntropy(double epsilon = kDefaultEpsilon) {
    return {FunctionalKind::kInverseEntropy, epsilon, 0, 1};
  }
  static BiasFunctional GeneralizedJsd(double epsilon = kDefaultEpsilon) {
    return {FunctionalKind::kGeneralizedJsd, epsilon, 0, 1};
  }
  static BiasFunctional AbsGap(Eigen::Index first, Eigen::Index second) {
    return {FunctionalKind::kAbsGap, kDefaultEpsilon, first, second};
  }

  // Number of distributions the functional consumes; 0 means "two or more".
  std::size_t Arity() const {
    return kind == FunctionalKind::kGeneralizedJsd ? 0 : 1;
  }

  void Validate() const {
    Require(epsilon > 0.0 && epsilon <= 1e-6,
            "BiasFunctional epsilon must be in (0, 1e-6], got ", epsilon);
    if (kind == FunctionalKind::kAbsGap) {
      Require(first != second && first >= 0 && second >= 0,
              "AbsGap needs two distinct candidate indices");
    }
  }
};

// -- Scalar functionals ------------------------------------------------------

inline double Entropy(const ProbVec& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double pk = p[k];
    if (pk > 0.0) h -= pk * std::log(pk);
  }
  return std::max(h, 0.0);
}

inline double InverseEntropy(const ProbVec& p,
                             double epsilon = kDefaultEpsilon) {
  Require(epsilon > 0.0, "InverseEntropy: epsilon must be positive");
  return 1.0 / (Entropy(p) + epsilon);
}

// KL(p || q), with q floored so that q_k = 0 < p_k stays finite.
inline double KlDivergence(const ProbVec& p, const ProbVec& q) {
  Require(p.size() == q.size(), "KlDivergence: length mismatch");
  double kl = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) {
      kl += p[k] * (std::log(p[k]) - std::log(std::max(q[k], kProbFloor)));
    }
  }
  return kl;
}

inline ProbVec MeanDistribution(std::span<const ProbVec> dists) {
  Require(!dists.empty(), "MeanDistribution: no distributions");
  Vec mean = Vec::Zero(dists.front().size());
  for (const auto& p : dists) {
    Require(p.size() == mean.size(), "distributions have mismatched lengths");
    mean += p.values();
  }
  mean /= static_cast<double>(dists.size());
  return ProbVec::FromValues(std::move(mean));
}

// Generalized Jensen-Shannon divergence (1/n) sum_i KL(p_i || mean).
inline double Jsd(std::span<const ProbVec> dists) {
  Require(dists.size() >= 2, "Jsd needs at least 2 distributions, got ",
          dists.size());
  const ProbVec mean = MeanDistribution(dists);
  double total = 0.0;
  for (const auto& p : dists) total += KlDivergence(p, mean);
  return std::max(total / static_cast<double>(dists.size()), 0.0);
}

// -- Softmax -----------------------------------------------------------------

inline ProbVec Softmax(const Vec& logits) {
  Require(logits.size() >= 2, "Softmax needs at least 2 logits");
  Require(logits.allFinite(), "Softmax: non-finite logits");
  const double top = logits.maxCoeff();
  Vec p = logits.unaryExpr([top](double z) { return std::exp(z - top); });
  p /= p.sum();
  return ProbVec::FromValues(std::move(p));
}

inline Vec SliceLogits(const ProjectionSlice& slice, const Vec& hidden) {
  Require(hidden.size() == slice.hidden_dim(), "hidden vector has length ",
          hidden.size(), " but the projection slice expects ",
          slice.hidden_dim());
  Vec z = slice.rows * hidden + slice.bias;
  Require(z.allFinite(), "non-finite logits");
  return z;
}

inline ProbVec RestrictedSoftmax(const ProjectionSlice& slice,
                                 const Vec& hidden) {
  return Softmax(SliceLogits(slice, hidden));
}

// -- Functional evaluation -----------------------------------------------------

inline double Evaluate(const BiasFunctional& functional,
                       std::span<const ProbVec> dists) {
  functional.Validate();
  switch (functional.kind) {
    case FunctionalKind::kInverseEntropy:
      Require(dists.size() == 1, "InverseEntropy takes one distribution");
      return InverseEntropy(dists[0], functional.epsilon);
    case FunctionalKind::kAbsGap: {
      Require(dists.size() == 1, "AbsGap takes one distribution");
      const ProbVec& p = dists[0];
      Require(functional.first < p.size() && functional.second < p.size(),
              "AbsGap pair index out of range");
      return std::abs(p[functional.first] - p[functional.second]);
    }
    case FunctionalKind::kGeneralizedJsd:
      return Jsd(dists);
  }
  return 0.0;
}

inline double EvaluateLogits(const BiasFunctional& functional,
                             std::span<const Vec> logits) {
  std::vector<ProbVec> dists;
  dists.reserve(logits.size());
  for (const auto& z : logits) dists.push_back(Softmax(z));
  return Evaluate(functional, dists);
}

inline double EvaluateHidden(const BiasFunctional& functional,
                             std::span<const ProjectionSlice> slices,
                             std::span<const Vec> hiddens) {
  Require(slices.size() == hiddens.size(), "got ", slices.size(),
          " slices for ", hiddens.size(), " hidden vectors");
  std::vector<Vec> logits;
  logits.reserve(hiddens.size());
  for (std::size_t i = 0; i < hiddens.size(); ++i) {
    logits.push_back(SliceLogits(slices[i], hiddens[i]));
  }
  return EvaluateLogits(functional, logits);
}

// -- Gradients -----------------------------------------------------------------

// Pulls dB/dp back through the softmax Jacobian p_m (delta_mk - p_k).
inline Vec SoftmaxVjp(const ProbVec& p, const Vec& grad_p) {
  const Vec& pv = p.values();
  const double mean = pv.dot(grad_p);
  return (pv.array() * (grad_p.array() - mean)).matrix();
}

// dB/dz for each distribution, z being that distribution's logits.
inline std::vector<Vec> GradWrtLogits(const BiasFunctional& functional,
                                      std::span<const Vec> logits) {
  functional.Validate();
  std::vector<ProbVec> dists;
  dists.reserve(logits.size());
  for (const auto& z : logits) dists.push_back(Softmax(z));

  std::vector<Vec> grads;
  switch (functional.kind) {
    case FunctionalKind::kInverseEntropy: {
      Require(dists.size() == 1, "InverseEntropy takes one distribution");
      const Vec& p = dists[0].values();
      const double h = Entropy(dists[0]);
      const double scale = 1.0 / ((h + functional.epsilon) *
                                  (h + functional.epsilon));
      // dH/dz_k = -p_k (ln p_k + H);  d(1/(H+eps))/dz = -dH/dz / (H+eps)^2.
      Vec g(p.size());
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        g[k] = scale * p[k] * (std::log(std::max(p[k], kProbFloor)) + h);
      }
      grads.push_back(std::move(g));
      break;
    }
    case FunctionalKind::kAbsGap: {
      Require(dists.size() == 1, "AbsGap takes one distribution");
      const Vec& p = dists[0].values();
      const Eigen::Index a = functional.first;
      const Eigen::Index b = functional.second;
      Require(a < p.size() && b < p.size(), "AbsGap pair index out of range");
      // sign(0) = +1: at the kink the d1-minus-d2 branch is used.
      const double sign = p[a] - p[b] >= 0.0 ? 1.0 : -1.0;
      Vec g = -(p[a] - p[b]) * p;
      g[a] += p[a];
      g[b] -= p[b];
      grads.push_back(sign * g);
      break;
    }
    case FunctionalKind::kGeneralizedJsd: {
      Require(dists.size() >= 2, "Jsd needs at least 2 distributions, got ",
              dists.size());
      const ProbVec mean = MeanDistribution(dists);
      const double n = static_cast<double>(dists.size());
      for (const auto& p : dists) {
        // dJSD/dp_i(w) = (1/n) ln(p_i(w) / mean(w)).
        Vec grad_p(p.size());
        for (Eigen::Index w = 0; w < p.size(); ++w) {
          grad_p[w] = (std::log(std::max(p[w], kProbFloor)) -
                       std::log(std::max(mean[w], kProbFloor))) /
                      n;
        }
        grads.push_back(SoftmaxVjp(p, grad_p));
      }
      break;
    }
  }
  return grads;
}

// dB/dh for each (slice, hidden) pair.
inline std::vector<Vec> GradBiasWrtHidden(
    const BiasFunctional& functional, std::span<const ProjectionSlice> slices,
    std::span<const Vec> hiddens) {
  Require(slices.size() == hiddens.size(), "got ", slices.size(),
          " slices for ", hiddens.size(), " hidden vectors");
  if (functional.Arity() == 1) {
    Require(hiddens.size() == 1, FunctionalKindName(functional.kind),
            " takes exactly one (slice, hidden) pair");
  }
  std::vector<Vec> logits;
  logits.reserve(hiddens.size());
  for (std::size_t i = 0; i < hiddens.size(); ++i) {
    slices[i].Validate();
    logits.push_back(SliceLogits(slices[i], hiddens[i]));
  }
  std::vector<Vec> grads = GradWrtLogits(functional, logits);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    grads[i] = slices[i].rows.transpose() * grads[i];
  }
  return grads;
}

namespace internal {

// Extended-precision evaluation of B used by the finite-difference oracle. It
// shares no code with the analytic gradient path.
inline long double EvaluateHiddenExtended(
    const BiasFunctional& functional, std::span<const ProjectionSlice> slices,
    std::span<const Vec> hiddens) {
  using Real = long double;
  std::vector<std::vector<Real>> dists;
  for (std::size_t i = 0; i < hiddens.size(); ++i) {
    const auto& s = slices[i];
    std::vector<Real> z(static_cast<std::size_t>(s.candidates()));
    for (Eigen::Index k = 0; k < s.candidates(); ++k) {
      Real acc = s.bias[k];
      for (Eigen::Index j = 0; j < s.hidden_dim(); ++j) {
        acc += static_cast<Real>(s.rows(k, j)) * hiddens[i][j];
      }
      z[static_cast<std::size_t>(k)] = acc;
    }
    const Real top = *std::max_element(z.begin(), z.end());
    Real sum = 0;
    for (auto& v : z) sum += (v = std::exp(v - top));
    for (auto& v : z) v /= sum;
    dists.push_back(std::move(z));
  }
  auto entropy = [](const std::vector<Real>& p) {
    Real h = 0;
    for (Real v : p) {
      if (v > 0) h -= v * std::log(v);
    }
    return h;
  };
  switch (functional.kind) {
    case FunctionalKind::kInverseEntropy:
      return 1 / (entropy(dists[0]) + functional.epsilon);
    case FunctionalKind::kAbsGap:
      return std::abs(dists[0][static_cast<std::size_t>(functional.first)] -
                      dists[0][static_cast<std::size_t>(functional.second)]);
    case FunctionalKind::kGeneralizedJsd: {
      std::vector<Real> mean(dists[0].size(), 0);
      for (const auto& p : dists) {
        for (std::size_t w = 0; w < p.size(); ++w) mean[w] += p[w];
      }
      for (auto& v : mean) v /= static_cast<Real>(dists.size());
      Real sum_h = 0;
      for (const auto& p : dists) sum_h += entropy(p);
      return entropy(mean) - sum_h / static_cast<Real>(dists.size());
    }
  }
  return 0;
}

}  // namespace internal

// Central finite differences against the analytic gradient. Returns the max
// over every hidden coordinate of |analytic - numeric| / max(|numeric|, 1e-12).
inline double CheckGradient(const BiasFunctional& functional,
                            std::span<const ProjectionSlice> slices,
                            std::span<const Vec> hiddens, double step) {
  Require(step >= 1e-7 && step <= 1e-3,
          "CheckGradient: step must be in [1e-7, 1e-3], got ", step);
  const std::vector<Vec> analytic =
      GradBiasWrtHidden(functional, slices, hiddens);
  std::vector<Vec> probe(hiddens.begin(), hiddens.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (Eigen::Index j = 0; j < probe[i].size(); ++j) {
      const double saved = probe[i][j];
      probe[i][j] = saved + step;
      const long double plus =
          internal::EvaluateHiddenExtended(functional, slices, probe);
      probe[i][j] = saved - step;
      const long double minus =
          internal::EvaluateHiddenExtended(functional, slices, probe);
      probe[i][j] = saved;
      const double numeric = static_cast<double>((plus - minus) / (2 * step));
      const double error = std::abs(analytic[i][j] - numeric) /
                           std::max(std::abs(numeric), 1e-12);
      worst = std::max(worst, error);
    }
  }
  return worst;
}

}  // namespace math
}  // namespace biasattr
