#pragma once

// Gradient audit: analytic loss gradients against central differences, both
// w.r.t. the sequence log-likelihood scalars and end to end w.r.t. the logit
// table of a small random policy.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lddpo/analysis.hpp"
#include "lddpo/losses.hpp"
#include "lddpo/policy.hpp"
#include "lddpo/rng.hpp"
#include "lddpo/synthgen.hpp"
#include "lddpo/trainer.hpp"

namespace lddpo {

struct GradCheckCase {
  std::string label;  // method name, with alpha for the LD family
  MethodConfig method;
};

inline std::vector<GradCheckCase> default_gradcheck_cases() {
  std::vector<GradCheckCase> out;
  out.push_back({"dpo", MethodConfig{}});
  for (double a : {0.0, 0.3, 0.7, 1.0}) {
    MethodConfig m;
    m.method = Method::kLdDpo;
    m.alpha = a;
    out.push_back({"ld-dpo(alpha=" + std::to_string(a).substr(0, 3) + ")", m});
  }
  for (Method kind : {Method::kLdChosen, Method::kLdRejected}) {
    MethodConfig m;
    m.method = kind;
    m.alpha = 0.4;
    out.push_back({std::string(method_name(kind)) + "(alpha=0.4)", m});
  }
  MethodConfig r;
  r.method = Method::kRDpo;
  out.push_back({"r-dpo", r});
  MethodConfig s;
  s.method = Method::kSimPo;
  out.push_back({"simpo", s});
  return out;
}

struct GradCheckResult {
  std::string label;
  std::size_t instances = 0;
  double max_scalar_rel_error = 0.0;
  double max_param_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& r : results) m = std::max({m, r.max_scalar_rel_error, r.max_param_rel_error});
    return m;
  }
};

namespace detail {

inline SeqLogProb random_seq(Rng& rng, std::size_t len) {
  std::vector<double> v(len);
  for (double& x : v) x = rng.uniform(-4.0, -0.05);
  return SeqLogProb(std::move(v));
}

inline TokenSeq random_response(Rng& rng, const Vocab& vocab, std::size_t len) {
  TokenSeq y;
  std::vector<TokenId> body(vocab.content_ids);
  body.insert(body.end(), vocab.filler_ids.begin(), vocab.filler_ids.end());
  for (std::size_t i = 0; i + 1 < len; ++i) y.push_back(body[rng.below(body.size())]);
  y.push_back(vocab.eos_id);
  return y;
}

// Relative error floor: coordinates whose true derivative is below this are
// compared in absolute terms.
inline constexpr double kGradFloor = 1e-6;

}  // namespace detail

// Scalar check: perturbing the first per-token log-prob of a response moves
// its policy-side scalar by exactly the perturbation for every method (the
// first position is always public and enters every sum with weight 1).
inline double scalar_gradcheck(const MethodConfig& m, Rng& rng) {
  const std::size_t lw = 1 + rng.below(12);
  const std::size_t ll = 1 + rng.below(12);
  const PairLogProbs base{detail::random_seq(rng, lw), detail::random_seq(rng, ll),
                          detail::random_seq(rng, lw), detail::random_seq(rng, ll)};
  const LossReport r = evaluate_loss(base, m);
  auto loss_at = [&](std::span<const double> s) {
    auto w = base.policy_w.per_token();
    auto l = base.policy_l.per_token();
    w[0] = s[0];
    l[0] = s[1];
    return evaluate_loss(PairLogProbs{SeqLogProb(w), SeqLogProb(l), base.ref_w, base.ref_l}, m)
        .loss;
  };
  const double point[2] = {base.policy_w.per_token()[0], base.policy_l.per_token()[0]};
  const auto fd = finite_diff(loss_at, point, 1e-6);
  return std::max(rel_error(r.d_loss_d_sw, fd[0], detail::kGradFloor),
                  rel_error(r.d_loss_d_sl, fd[1], detail::kGradFloor));
}

// End-to-end check over every logit of a small random bigram policy.
inline double param_gradcheck(const MethodConfig& m, Rng& rng) {
  const Vocab vocab = Vocab::make(2, 3, 2);
  PolicyModel policy(vocab, 1);
  PolicyModel reference(vocab, 1);
  for (double& x : policy.logits()) x = rng.uniform(-1.5, 1.5);
  for (double& x : reference.logits()) x = rng.uniform(-1.5, 1.5);
  PreferencePair p;
  p.prompt = {vocab.prompt_ids[rng.below(vocab.prompt_ids.size())]};
  p.chosen = detail::random_response(rng, vocab, 1 + rng.below(8));
  p.rejected = detail::random_response(rng, vocab, 1 + rng.below(8));

  std::vector<double> grad(policy.logits().size(), 0.0);
  pair_objective(policy, pair_logprobs(policy, reference, p), p, m, 1.0, grad);

  auto loss_at = [&](std::span<const double> theta) {
    PolicyModel q = policy;
    std::copy(theta.begin(), theta.end(), q.logits().begin());
    return evaluate_loss(pair_logprobs(q, reference, p), m).loss;
  };
  const std::vector<double> theta(policy.logits().begin(), policy.logits().end());
  const auto fd = finite_diff(loss_at, theta, 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    worst = std::max(worst, rel_error(grad[i], fd[i], detail::kGradFloor));
  }
  return worst;
}

inline GradCheckReport run_gradcheck(std::size_t instances, std::uint64_t seed,
                                     const std::vector<GradCheckCase>& cases =
                                         default_gradcheck_cases()) {
  GradCheckReport rep;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Rng rng(derive_seed(seed, c));
    GradCheckResult res;
    res.label = cases[c].label;
    res.instances = instances;
    for (std::size_t i = 0; i < instances; ++i) {
      res.max_scalar_rel_error =
          std::max(res.max_scalar_rel_error, scalar_gradcheck(cases[c].method, rng));
      res.max_param_rel_error =
          std::max(res.max_param_rel_error, param_gradcheck(cases[c].method, rng));
    }
    rep.results.push_back(res);
  }
  return rep;
}

}  // namespace lddpo
