#pragma once

// Preference losses over sequence log-likelihoods.
//
// Every loss has the logistic form loss = -log sigmoid(z) = softplus(-z),
// where z is a margin built from scalar sequence log-likelihoods. Each
// LossReport carries d loss / d s_w and d loss / d s_l, the derivatives
// w.r.t. the two policy-side scalars (s_w, s_l) that enter z. The trainer
// chains these into the policy parameters through per-position weights
// (see position_weights()).
//
// Also here: the scalar analysis of the DPO objective in probability space,
// X1 = pi(y_w|x), X2 = pi(y_l|x), K1 = pi_ref(y_w|x), K2 = pi_ref(y_l|x).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lddpo/error.hpp"
#include "lddpo/policy.hpp"

namespace lddpo {

enum class Method { kDpo, kLdDpo, kRDpo, kSimPo, kLdChosen, kLdRejected };

inline constexpr Method kAllMethods[] = {Method::kDpo,   Method::kLdDpo,    Method::kRDpo,
                                         Method::kSimPo, Method::kLdChosen, Method::kLdRejected};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::kDpo: return "dpo";
    case Method::kLdDpo: return "ld-dpo";
    case Method::kRDpo: return "r-dpo";
    case Method::kSimPo: return "simpo";
    case Method::kLdChosen: return "ld-chosen";
    case Method::kLdRejected: return "ld-rejected";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  return std::nullopt;
}

// Which sequences of a pair get the length-decoupled likelihood.
enum class LdTarget { kBoth, kChosenOnly, kRejectedOnly };

struct LdConfig {
  double alpha = 1.0;
  double beta = 0.1;
  LdTarget target = LdTarget::kBoth;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  }
  bool modifies_chosen() const { return target != LdTarget::kRejectedOnly; }
  bool modifies_rejected() const { return target != LdTarget::kChosenOnly; }
};

struct PairLogProbs {
  SeqLogProb policy_w, policy_l, ref_w, ref_l;

  std::size_t len_w() const { return policy_w.length(); }
  std::size_t len_l() const { return policy_l.length(); }

  void validate() const {
    if (len_w() == 0 || len_l() == 0) throw InputError("pair: empty response");
    if (ref_w.length() != len_w() || ref_l.length() != len_l()) {
      throw InputError("pair: policy and reference lengths differ");
    }
    if (!std::isfinite(ref_w.sum_full()) || !std::isfinite(ref_l.sum_full())) {
      throw InputError("pair: non-finite reference log-likelihood");
    }
  }
};

struct LossReport {
  double loss = 0.0;
  double z = 0.0;
  double d_loss_d_sw = 0.0;
  double d_loss_d_sl = 0.0;
  Method method = Method::kDpo;
};

// softplus(t) = log(1 + e^t), stable for any finite t.
inline double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

// 1 / (1 + e^t) without overflow.
inline double sigmoid_neg(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(t));
}

inline std::size_t public_length(std::size_t len_w, std::size_t len_l) {
  if (len_w < 1 || len_l < 1) throw InputError("public_length: lengths must be >= 1");
  return std::min(len_w, len_l);
}

// alpha * full + (1 - alpha) * prefix(l_p). Returns the full sum unchanged
// when there is no excess part, and is exact at both alpha endpoints.
inline double ld_logprob(const SeqLogProb& s, std::size_t l_p, double alpha) {
  if (l_p < 1 || l_p > s.length()) {
    throw InputError("ld_logprob: public length " + std::to_string(l_p) + " outside [1, " +
                     std::to_string(s.length()) + "]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("ld_logprob: alpha must be in [0, 1]");
  if (l_p == s.length()) return s.sum_full();
  return alpha * s.sum_full() + (1.0 - alpha) * s.sum_prefix(l_p);
}

namespace detail {

inline LossReport logistic_report(double z, double dz_dsw, double dz_dsl, Method m) {
  LossReport r;
  r.method = m;
  r.z = z;
  r.loss = softplus(-z);
  const double s = sigmoid_neg(z);
  r.d_loss_d_sw = -s * dz_dsw;
  r.d_loss_d_sl = -s * dz_dsl;
  return r;
}

}  // namespace detail

inline LossReport dpo_loss(const PairLogProbs& p, double beta) {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  const double z = beta * (p.policy_w.sum_full() - p.ref_w.sum_full()) -
                   beta * (p.policy_l.sum_full() - p.ref_l.sum_full());
  return detail::logistic_report(z, beta, -beta, Method::kDpo);
}

// DPO on length-decoupled likelihoods. The designated sequences are replaced
// by ld_logprob(., l_p, alpha) for both policy and reference.
inline LossReport ld_dpo_loss(const PairLogProbs& p, const LdConfig& cfg) {
  cfg.validate();
  const std::size_t l_p = public_length(p.len_w(), p.len_l());
  auto pick = [&](const SeqLogProb& s, bool modified) {
    return modified ? ld_logprob(s, l_p, cfg.alpha) : s.sum_full();
  };
  const double sw = pick(p.policy_w, cfg.modifies_chosen());
  const double rw = pick(p.ref_w, cfg.modifies_chosen());
  const double sl = pick(p.policy_l, cfg.modifies_rejected());
  const double rl = pick(p.ref_l, cfg.modifies_rejected());
  const double z = cfg.beta * (sw - rw) - cfg.beta * (sl - rl);
  Method m = Method::kLdDpo;
  if (cfg.target == LdTarget::kChosenOnly) m = Method::kLdChosen;
  if (cfg.target == LdTarget::kRejectedOnly) m = Method::kLdRejected;
  return detail::logistic_report(z, cfg.beta, -cfg.beta, m);
}

// DPO margin minus a linear penalty on the length gap.
inline LossReport r_dpo_loss(const PairLogProbs& p, double beta, double alpha_rdpo) {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(alpha_rdpo >= 0.0)) throw ConfigError("r-dpo alpha must be >= 0");
  const double gap = static_cast<double>(p.len_w()) - static_cast<double>(p.len_l());
  const double z = beta * (p.policy_w.sum_full() - p.ref_w.sum_full()) -
                   beta * (p.policy_l.sum_full() - p.ref_l.sum_full()) - alpha_rdpo * gap;
  return detail::logistic_report(z, beta, -beta, Method::kRDpo);
}

// Reference-free, length-normalized rewards with a target margin. The
// derivatives are w.r.t. the full (unnormalized) sums, so they carry 1/len.
inline LossReport simpo_loss(const PairLogProbs& p, double beta, double gamma_margin) {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  const double lw = static_cast<double>(p.len_w());
  const double ll = static_cast<double>(p.len_l());
  const double z = (beta / lw) * p.policy_w.sum_full() - (beta / ll) * p.policy_l.sum_full() -
                   gamma_margin;
  return detail::logistic_report(z, beta / lw, -beta / ll, Method::kSimPo);
}

// Hyperparameters for every method in one place. Defaults follow the
// published settings: beta 0.1 for the DPO family, SimPO beta 2 / gamma 1,
// R-DPO length coefficient 0.05.
struct MethodConfig {
  Method method = Method::kDpo;
  double beta = 0.1;
  double alpha = 1.0;
  double alpha_rdpo = 0.05;
  double simpo_beta = 2.0;
  double simpo_gamma = 1.0;

  LdConfig ld() const {
    LdConfig c{alpha, beta, LdTarget::kBoth};
    if (method == Method::kLdChosen) c.target = LdTarget::kChosenOnly;
    if (method == Method::kLdRejected) c.target = LdTarget::kRejectedOnly;
    return c;
  }

  bool is_ld() const {
    return method == Method::kLdDpo || method == Method::kLdChosen ||
           method == Method::kLdRejected;
  }
};

inline LossReport evaluate_loss(const PairLogProbs& p, const MethodConfig& cfg) {
  switch (cfg.method) {
    case Method::kDpo: return dpo_loss(p, cfg.beta);
    case Method::kLdDpo:
    case Method::kLdChosen:
    case Method::kLdRejected: return ld_dpo_loss(p, cfg.ld());
    case Method::kRDpo: return r_dpo_loss(p, cfg.beta, cfg.alpha_rdpo);
    case Method::kSimPo: return simpo_loss(p, cfg.simpo_beta, cfg.simpo_gamma);
  }
  throw ConfigError("unknown method");
}

// d s / d per_token[i] for the policy-side scalar s of one response: 1 on the
// public positions, alpha on the excess positions of a decoupled sequence.
inline std::vector<double> position_weights(const MethodConfig& cfg, bool chosen,
                                            std::size_t len, std::size_t l_p) {
  std::vector<double> w(len, 1.0);
  if (!cfg.is_ld()) return w;
  const LdConfig ld = cfg.ld();
  const bool modified = chosen ? ld.modifies_chosen() : ld.modifies_rejected();
  if (!modified) return w;
  for (std::size_t i = l_p; i < len; ++i) w[i] = cfg.alpha;
  return w;
}

// ---------------------------------------------------------------------------
// Scalar analysis in probability space.

struct ScalarPoint {
  double x1, x2, k1, k2, beta;
};

struct ScalarPartials {
  double d_x1;
  double d_x2;
};

// d G_a / d X_b where G1 = dL/dX1 and G2 = dL/dX2.
struct SecondOrder {
  double g1_x1, g1_x2, g2_x1, g2_x2;
};

namespace detail {

inline void check_scalar_domain(const ScalarPoint& p) {
  for (double v : {p.x1, p.x2, p.k1, p.k2}) {
    if (!(v > 0.0 && v < 1.0)) throw DomainError("likelihood arguments must lie in (0, 1)");
  }
  if (!(p.beta > 0.0 && p.beta <= 1.0)) throw DomainError("beta must lie in (0, 1]");
}

// A = (K2 X1)^beta, B = (K1 X2)^beta.
struct PowerTerms {
  double a, b;
};

inline PowerTerms power_terms(const ScalarPoint& p) {
  return {std::pow(p.k2 * p.x1, p.beta), std::pow(p.k1 * p.x2, p.beta)};
}

}  // namespace detail

// -log(A / (A + B)).
inline double scalar_dpo_loss(const ScalarPoint& p) {
  detail::check_scalar_domain(p);
  const auto [a, b] = detail::power_terms(p);
  return -std::log(a / (a + b));
}

inline ScalarPartials scalar_partials(const ScalarPoint& p) {
  detail::check_scalar_domain(p);
  const auto [a, b] = detail::power_terms(p);
  const double s = a + b;
  return {-p.beta * b / (p.x1 * s),
          p.beta * std::pow(p.k1, p.beta) * std::pow(p.x2, p.beta - 1.0) / s};
}

// Closed forms of the four second-order derivatives. Expected signs at every
// valid point: (+, -, -, -).
inline SecondOrder scalar_second_order(const ScalarPoint& p) {
  detail::check_scalar_domain(p);
  const auto [a, b] = detail::power_terms(p);
  const double s = a + b;
  const double s2 = s * s;
  const double beta = p.beta;
  SecondOrder r;
  r.g1_x1 = (beta * b * b + beta * (beta + 1.0) * a * b) / (p.x1 * p.x1 * s2);
  r.g1_x2 = -beta * beta * std::pow(p.k1, beta) * std::pow(p.x2, beta - 1.0) * p.x1 * a /
            (p.x1 * p.x1 * s2);
  r.g2_x1 = -beta * beta * std::pow(p.k1, beta) * std::pow(p.x2, beta - 1.0) *
            std::pow(p.k2, beta) * std::pow(p.x1, beta - 1.0) / s2;
  // beta (beta - 1) K1^b X2^(b-2) K2^b X1^b  -  beta K1^(2b) X2^(2b-2)
  r.g2_x2 = (beta * (beta - 1.0) * std::pow(p.k1, beta) * std::pow(p.x2, beta - 2.0) *
                 std::pow(p.k2, beta) * std::pow(p.x1, beta) -
             beta * std::pow(p.k1, 2.0 * beta) * std::pow(p.x2, 2.0 * beta - 2.0)) /
            s2;
  return r;
}

}  // namespace lddpo
