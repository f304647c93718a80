// Copyright 2026 The NBPO Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Likelihood objectives for point-wise implicit-feedback learning and their
// per-sample gradient coefficients.
//
// Notation used below, for one (u, i) cell:
//   r = R_ui, the preference score (U_u . V_i)
//   g = G_ui, the flip logit (P_u . Q_i); sigmoid(g) = p(observed 0 | true 1)
//
// Observed-label probability under the flip model:
//   label 1:  sigmoid(-g) sigmoid(r)
//   label 0:  sigmoid(-r) + sigmoid(g) sigmoid(r)
//
// Every gradient coefficient is a scalar c such that the parameter update for
// one sample is c * dR/dTheta (or c * dG/dPhi); for the factorization model
// dR/dU_u = V_i and dR/dV_i = U_u.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "nbpo/common.hpp"
#include "nbpo/model.hpp"

namespace nbpo {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ln sigmoid(x) without overflow in either direction.
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// ln(e^a + e^b)
inline double log_add_exp(double a, double b) {
  const double hi = std::max(a, b);
  const double lo = std::min(a, b);
  if (hi == -HUGE_VAL) return hi;
  return hi + std::log1p(std::exp(lo - hi));
}

struct SampleTerm {
  Index user = 0;
  Index item = 0;
  int label = 0;  // observed R~_ui, 0 or 1
  double score = 0.0;
  double noise_logit = 0.0;
};

struct RegSpec {
  double lambda_theta = 0.0;
  double lambda_phi = 0.0;
};

inline SampleTerm make_term(const ModelParams& params, Index u, Index i, int label) {
  return {u, i, label, score(params.preference, u, i), noise_logit(params.noise, u, i)};
}

inline double preference_penalty(const PreferenceParams& theta, const RegSpec& reg) {
  return 0.5 * reg.lambda_theta * (theta.users.squared_norm() + theta.items.squared_norm());
}

inline double noise_penalty(const NoiseParams& phi, const RegSpec& reg) {
  return 0.5 * reg.lambda_phi * (phi.users.squared_norm() + phi.items.squared_norm());
}

// ---- per-term values -------------------------------------------------------

inline double bpo_term(const SampleTerm& t) {
  return t.label == 1 ? log_sigmoid(t.score) : log_sigmoid(-t.score);
}

inline double nbpo_observed_prob(const SampleTerm& t) {
  if (t.label == 1) return sigmoid(-t.noise_logit) * sigmoid(t.score);
  return sigmoid(-t.score) + sigmoid(t.noise_logit) * sigmoid(t.score);
}

inline double nbpo_log_observed_prob(const SampleTerm& t) {
  if (t.label == 1) return log_sigmoid(-t.noise_logit) + log_sigmoid(t.score);
  return log_add_exp(log_sigmoid(-t.score), log_sigmoid(t.noise_logit) + log_sigmoid(t.score));
}

// Jensen lower bound of nbpo_log_observed_prob. Positive terms are exact.
inline double nbpo_lower_bound_term(const SampleTerm& t) {
  if (t.label == 1) return log_sigmoid(-t.noise_logit) + log_sigmoid(t.score);
  return log_sigmoid(-t.score) + log_sigmoid(t.noise_logit) + log_sigmoid(t.score);
}

// ---- objectives ------------------------------------------------------------

// Point-wise log posterior with the additive prior constant dropped.
inline double bpo_loglik(std::span<const SampleTerm> terms, const PreferenceParams& theta,
                         const RegSpec& reg) {
  double sum = 0.0;
  for (const auto& t : terms) sum += bpo_term(t);
  return sum - preference_penalty(theta, reg);
}

inline double nbpo_loglik(std::span<const SampleTerm> terms, const PreferenceParams& theta,
                          const NoiseParams& phi, const RegSpec& reg) {
  double sum = 0.0;
  for (const auto& t : terms) sum += nbpo_log_observed_prob(t);
  return sum - noise_penalty(phi, reg) - preference_penalty(theta, reg);
}

inline double nbpo_lower_bound(std::span<const SampleTerm> terms, const PreferenceParams& theta,
                               const NoiseParams& phi, const RegSpec& reg) {
  double sum = 0.0;
  for (const auto& t : terms) sum += nbpo_lower_bound_term(t);
  return sum - noise_penalty(phi, reg) - preference_penalty(theta, reg);
}

// Sum of probabilities (not log-probabilities) minus both penalties.
inline double nbpo_surrogate(std::span<const SampleTerm> terms, const PreferenceParams& theta,
                             const NoiseParams& phi, const RegSpec& reg) {
  double sum = 0.0;
  for (const auto& t : terms) sum += nbpo_observed_prob(t);
  return sum - noise_penalty(phi, reg) - preference_penalty(theta, reg);
}

// ---- gradient coefficients -------------------------------------------------

struct Coefficients {
  double theta = 0.0;  // multiplies dR/dTheta
  double phi = 0.0;    // multiplies dG/dPhi
};

// True derivative of bpo_term with respect to r.
inline double bpo_coefficient(const SampleTerm& t) {
  return t.label == 1 ? sigmoid(-t.score) : -sigmoid(t.score);
}

// True derivatives of nbpo_log_observed_prob.
inline Coefficients nbpo_log_coefficients(const SampleTerm& t) {
  const double r = t.score, g = t.noise_logit;
  if (t.label == 1) return {sigmoid(-r), -sigmoid(g)};
  // f = 1 - sigmoid(r) sigmoid(-g); df/dr = -s(r)s(-r)s(-g); df/dg = s(g)s(-g)s(r).
  const double log_f = nbpo_log_observed_prob(t);
  const double ls_r = log_sigmoid(r), ls_nr = log_sigmoid(-r);
  const double ls_g = log_sigmoid(g), ls_ng = log_sigmoid(-g);
  return {-std::exp(ls_r + ls_nr + ls_ng - log_f), std::exp(ls_g + ls_ng + ls_r - log_f)};
}

// True derivatives of nbpo_observed_prob. These vanish when the sigmoids
// saturate at the wrong end.
inline Coefficients nbpo_prob_coefficients(const SampleTerm& t) {
  const double sr = sigmoid(t.score), snr = sigmoid(-t.score);
  const double sg = sigmoid(t.noise_logit), sng = sigmoid(-t.noise_logit);
  if (t.label == 1) return {sng * sr * snr, -sg * sng * sr};
  return {-sr * snr * sng, sg * sng * sr};
}

// Surrogate gradient of nbpo_observed_prob: every sigmoid factor s(x) is
// differentiated as d ln s(x)/dx = s(-x) instead of s(x) s(-x).
inline Coefficients surrogate_coefficients(const SampleTerm& t) {
  const double sr = sigmoid(t.score), snr = sigmoid(-t.score);
  const double sg = sigmoid(t.noise_logit), sng = sigmoid(-t.noise_logit);
  if (t.label == 1) return {sng * snr, -sg * sr};
  return {-sr + sg * snr, sng * sr};
}

// Pairwise ranking term ln sigmoid(R_ui - R_uj) and its coefficient
// sigmoid(-(R_ui - R_uj)).
inline double bpr_pair_term(double score_diff) { return log_sigmoid(score_diff); }
inline double bpr_coefficient(double score_diff) { return sigmoid(-score_diff); }

}  // namespace nbpo
