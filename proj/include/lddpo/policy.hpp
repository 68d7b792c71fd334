#pragma once

// Tabular order-k autoregressive softmax policy.
//
// The next-token distribution depends only on the last k tokens of the
// stream (prompt followed by the response so far), left-padded with bos.
// Each of the |V|^k contexts owns one row of |V| logits. Sequence
// likelihoods are accumulated in log space, and the gradient of any
// position-weighted sum of per-token log-probabilities w.r.t. the logits is
// available in closed form.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lddpo/error.hpp"
#include "lddpo/rng.hpp"

namespace lddpo {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr int kMaxOrder = 3;

// Token alphabet. Layout produced by make(): bos, eos, prompt ids, content
// ids, filler ids. Any layout satisfying validate() is accepted.
struct Vocab {
  int size = 0;
  TokenId bos_id = 0;
  TokenId eos_id = 1;
  std::vector<TokenId> prompt_ids;
  std::vector<TokenId> content_ids;
  std::vector<TokenId> filler_ids;

  static Vocab make(int n_prompts, int n_content, int n_filler) {
    if (n_prompts < 1 || n_content < 1 || n_filler < 0) {
      throw ConfigError("vocab: need >= 1 prompt, >= 1 content token, >= 0 filler tokens");
    }
    Vocab v;
    v.bos_id = 0;
    v.eos_id = 1;
    TokenId next = 2;
    for (int i = 0; i < n_prompts; ++i) v.prompt_ids.push_back(next++);
    for (int i = 0; i < n_content; ++i) v.content_ids.push_back(next++);
    for (int i = 0; i < n_filler; ++i) v.filler_ids.push_back(next++);
    v.size = next;
    return v;
  }

  bool valid_id(TokenId id) const { return id >= 0 && id < size; }

  bool is_content(TokenId id) const {
    return std::find(content_ids.begin(), content_ids.end(), id) != content_ids.end();
  }
  bool is_filler(TokenId id) const {
    return std::find(filler_ids.begin(), filler_ids.end(), id) != filler_ids.end();
  }

  void validate() const {
    if (size < 2) throw ConfigError("vocab: size must be >= 2");
    if (!valid_id(bos_id) || !valid_id(eos_id)) throw ConfigError("vocab: special id out of range");
    if (bos_id == eos_id) throw ConfigError("vocab: bos_id must differ from eos_id");
    std::vector<int> seen(static_cast<std::size_t>(size), 0);
    seen[static_cast<std::size_t>(bos_id)] = 1;
    seen[static_cast<std::size_t>(eos_id)] = 1;
    for (const auto* group : {&prompt_ids, &content_ids, &filler_ids}) {
      for (TokenId id : *group) {
        if (!valid_id(id)) throw ConfigError("vocab: id " + std::to_string(id) + " out of range");
        if (seen[static_cast<std::size_t>(id)]++) {
          throw ConfigError("vocab: id " + std::to_string(id) + " assigned twice");
        }
      }
    }
  }

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

// Per-token conditional log-probabilities of a response plus running sums.
class SeqLogProb {
 public:
  SeqLogProb() : prefix_{0.0} {}

  explicit SeqLogProb(std::vector<double> per_token) : per_token_(std::move(per_token)) {
    prefix_.reserve(per_token_.size() + 1);
    prefix_.push_back(0.0);
    double acc = 0.0;
    for (double v : per_token_) {
      acc += v;
      prefix_.push_back(acc);
    }
  }

  std::size_t length() const { return per_token_.size(); }
  const std::vector<double>& per_token() const { return per_token_; }

  double sum_full() const { return prefix_.back(); }

  // Sum over the first j tokens, 0 <= j <= length().
  double sum_prefix(std::size_t j) const {
    if (j > per_token_.size()) {
      throw InputError("sum_prefix: j=" + std::to_string(j) + " exceeds length " +
                       std::to_string(per_token_.size()));
    }
    return prefix_[j];
  }

 private:
  std::vector<double> per_token_;
  std::vector<double> prefix_;
};

class PolicyModel {
 public:
  PolicyModel() = default;

  // Uniform policy (all logits zero).
  PolicyModel(Vocab vocab, int order) : vocab_(std::move(vocab)), order_(order) {
    vocab_.validate();
    if (order < 1 || order > kMaxOrder) {
      throw ConfigError("policy: order must be in [1, " + std::to_string(kMaxOrder) + "]");
    }
    num_contexts_ = 1;
    for (int i = 0; i < order_; ++i) num_contexts_ *= static_cast<std::size_t>(vocab_.size);
    logits_.assign(num_contexts_ * static_cast<std::size_t>(vocab_.size), 0.0);
  }

  const Vocab& vocab() const { return vocab_; }
  int order() const { return order_; }
  int vocab_size() const { return vocab_.size; }
  std::size_t num_contexts() const { return num_contexts_; }

  std::span<const double> logits() const { return logits_; }
  std::span<double> logits() { return logits_; }

  std::span<const double> row(std::size_t ctx) const {
    return std::span<const double>(logits_).subspan(ctx * width(), width());
  }
  std::span<double> row(std::size_t ctx) {
    return std::span<double>(logits_).subspan(ctx * width(), width());
  }

  // Context index after the prompt: bos padding, then every prompt token.
  std::size_t start(std::span<const TokenId> prompt) const {
    std::size_t ctx = 0;
    for (int i = 0; i < order_; ++i) ctx = advance(ctx, vocab_.bos_id);
    for (TokenId t : prompt) ctx = advance(ctx, t);
    return ctx;
  }

  // Context index after appending one token: base-|V| digits of the last k tokens.
  std::size_t advance(std::size_t ctx, TokenId token) const {
    return (ctx * width() + static_cast<std::size_t>(token)) % num_contexts_;
  }

  // Numerically stable log-softmax of one context row.
  std::vector<double> log_softmax(std::size_t ctx) const {
    auto r = row(ctx);
    const double m = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - m);
    const double lse = m + std::log(z);
    std::vector<double> out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i] - lse;
    return out;
  }

  std::vector<double> softmax(std::size_t ctx) const {
    auto r = row(ctx);
    const double m = *std::max_element(r.begin(), r.end());
    std::vector<double> out(r.size());
    double z = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      out[i] = std::exp(r[i] - m);
      z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
  }

  void check_ids(std::span<const TokenId> seq, const char* what) const {
    for (TokenId t : seq) {
      if (!vocab_.valid_id(t)) {
        throw InputError(std::string(what) + ": invalid token id " + std::to_string(t));
      }
    }
  }

  bool same_shape(const PolicyModel& other) const {
    return order_ == other.order_ && vocab_ == other.vocab_;
  }

  friend bool operator==(const PolicyModel&, const PolicyModel&) = default;

 private:
  std::size_t width() const { return static_cast<std::size_t>(vocab_.size); }

  Vocab vocab_;
  int order_ = 1;
  std::size_t num_contexts_ = 0;
  std::vector<double> logits_;
};

namespace detail {

inline void check_response(const PolicyModel& policy, std::span<const TokenId> x,
                           std::span<const TokenId> y) {
  if (y.empty()) throw InputError("response must be nonempty");
  policy.check_ids(x, "prompt");
  policy.check_ids(y, "response");
  if (y.back() != policy.vocab().eos_id) throw InputError("response must end with eos");
}

}  // namespace detail

// log pi(y | x) token by token. Prompt tokens are context only.
inline SeqLogProb seq_logprob(const PolicyModel& policy, std::span<const TokenId> x,
                              std::span<const TokenId> y) {
  detail::check_response(policy, x, y);
  std::vector<double> per_token;
  per_token.reserve(y.size());
  std::size_t ctx = policy.start(x);
  for (TokenId t : y) {
    auto r = policy.row(ctx);
    const double m = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - m);
    per_token.push_back(r[static_cast<std::size_t>(t)] - m - std::log(z));
    ctx = policy.advance(ctx, t);
  }
  return SeqLogProb(std::move(per_token));
}

// grad += scale * d(sum_i weights[i] * log p(y_i | ctx_i)) / d logits.
inline void accumulate_seq_logprob_grad(const PolicyModel& policy, std::span<const TokenId> x,
                                        std::span<const TokenId> y, std::span<const double> weights,
                                        double scale, std::span<double> grad) {
  detail::check_response(policy, x, y);
  if (weights.size() != y.size()) {
    throw InputError("seq_logprob_grad: weights length " + std::to_string(weights.size()) +
                     " != response length " + std::to_string(y.size()));
  }
  if (grad.size() != policy.logits().size()) throw InputError("seq_logprob_grad: grad table shape");
  const auto width = static_cast<std::size_t>(policy.vocab_size());
  std::size_t ctx = policy.start(x);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = scale * weights[i];
    if (w != 0.0) {
      const auto p = policy.softmax(ctx);
      double* g = grad.data() + ctx * width;
      for (std::size_t v = 0; v < width; ++v) g[v] -= w * p[v];
      g[static_cast<std::size_t>(y[i])] += w;
    }
    ctx = policy.advance(ctx, y[i]);
  }
}

inline std::vector<double> seq_logprob_grad(const PolicyModel& policy, std::span<const TokenId> x,
                                            std::span<const TokenId> y,
                                            std::span<const double> weights) {
  std::vector<double> grad(policy.logits().size(), 0.0);
  accumulate_seq_logprob_grad(policy, x, y, weights, 1.0, grad);
  return grad;
}

struct Sample {
  TokenSeq tokens;
  bool truncated = false;
};

// Ancestral sampling. At most max_len tokens are returned; if the last drawn
// token is not eos it is replaced by eos and the sample is flagged truncated.
inline Sample sample(const PolicyModel& policy, std::span<const TokenId> x, Rng& rng,
                     int max_len) {
  if (max_len < 1) throw InputError("sample: max_len must be >= 1");
  policy.check_ids(x, "prompt");
  Sample out;
  std::size_t ctx = policy.start(x);
  const TokenId eos = policy.vocab().eos_id;
  for (int step = 0; step < max_len; ++step) {
    const auto p = policy.softmax(ctx);
    const double u = rng.uniform();
    double acc = 0.0;
    auto tok = static_cast<TokenId>(p.size() - 1);
    for (std::size_t v = 0; v < p.size(); ++v) {
      acc += p[v];
      if (u < acc) {
        tok = static_cast<TokenId>(v);
        break;
      }
    }
    out.tokens.push_back(tok);
    if (tok == eos) return out;
    ctx = policy.advance(ctx, tok);
  }
  out.tokens.back() = eos;
  out.truncated = true;
  return out;
}

inline Sample sample(const PolicyModel& policy, std::span<const TokenId> x, std::uint64_t seed,
                     int max_len) {
  Rng rng(seed);
  return sample(policy, x, rng, max_len);
}

// Argmax decoding, ties resolved toward the smaller id.
inline Sample greedy(const PolicyModel& policy, std::span<const TokenId> x, int max_len) {
  if (max_len < 1) throw InputError("greedy: max_len must be >= 1");
  policy.check_ids(x, "prompt");
  Sample out;
  std::size_t ctx = policy.start(x);
  const TokenId eos = policy.vocab().eos_id;
  for (int step = 0; step < max_len; ++step) {
    auto r = policy.row(ctx);
    const auto tok = static_cast<TokenId>(std::max_element(r.begin(), r.end()) - r.begin());
    out.tokens.push_back(tok);
    if (tok == eos) return out;
    ctx = policy.advance(ctx, tok);
  }
  out.tokens.back() = eos;
  out.truncated = true;
  return out;
}

}  // namespace lddpo
