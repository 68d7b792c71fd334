#pragma once

// Two-stage pipeline: maximum-likelihood SFT, then preference optimization
// with any method from losses.hpp. Plain gradient descent on the logit
// table, cosine or constant learning-rate schedule with linear warmup.
// Everything is sequential and seeded, so runs are bit-reproducible.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lddpo/error.hpp"
#include "lddpo/losses.hpp"
#include "lddpo/policy.hpp"
#include "lddpo/rng.hpp"
#include "lddpo/synthgen.hpp"

namespace lddpo {

enum class LrSchedule { kCosine, kConstant };

// Published settings: SFT lr 2e-5, batch 128, 3 epochs; PO lr 5e-7, batch
// 32, 1 epoch; cosine schedule with 10% warmup. Those learning rates are
// for billion-parameter networks under an adaptive optimizer; a logit table
// under plain gradient descent needs far larger steps and more epochs, so
// the defaults below keep the batch sizes, schedule and warmup but rescale
// lr and epochs.
struct TrainConfig {
  MethodConfig method;
  int order = 1;
  double lr_sft = 10.0;
  double lr_po = 3.0;
  std::size_t batch_sft = 128;
  std::size_t batch_po = 32;
  int epochs_sft = 40;
  int epochs_po = 20;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  double warmup_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (order < 1 || order > kMaxOrder) throw ConfigError("train.order must be in [1, 3]");
    if (!(lr_sft >= 0.0)) throw ConfigError("train.lr_sft must be >= 0");
    if (!(lr_po >= 0.0)) throw ConfigError("train.lr_po must be >= 0");
    if (batch_sft < 1) throw ConfigError("train.batch_sft must be >= 1");
    if (batch_po < 1) throw ConfigError("train.batch_po must be >= 1");
    if (epochs_sft < 1) throw ConfigError("train.epochs_sft must be >= 1");
    if (epochs_po < 1) throw ConfigError("train.epochs_po must be >= 1");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
      throw ConfigError("train.warmup_frac must be in [0, 1)");
    }
    if (!(method.alpha >= 0.0 && method.alpha <= 1.0)) {
      throw ConfigError("train.alpha must be in [0, 1]");
    }
    if (!(method.beta > 0.0)) throw ConfigError("train.beta must be > 0");
    if (!(method.simpo_beta > 0.0)) throw ConfigError("train.simpo_beta must be > 0");
    if (!(method.alpha_rdpo >= 0.0)) throw ConfigError("train.alpha_rdpo must be >= 0");
  }
};

inline double scheduled_lr(double base, LrSchedule schedule, double warmup_frac,
                           std::size_t step, std::size_t total_steps) {
  if (schedule == LrSchedule::kConstant || total_steps == 0) return base;
  const auto warmup =
      static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t span = total_steps > warmup ? total_steps - warmup : 1;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Per-epoch shuffled batches of pair indices. The last partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch,
                                                          std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t end = std::min(n, start + batch);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

struct RunRecord {
  std::vector<int> step_epoch;
  std::vector<double> step_loss;
  std::vector<double> step_logp_w;  // batch mean log pi(y_w|x) before the update
  std::vector<double> step_logp_l;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_logp_w;
  std::vector<double> epoch_logp_l;

  std::size_t steps() const { return step_loss.size(); }
};

inline void write_run_record_csv(std::ostream& out, const RunRecord& rec) {
  out << "step,epoch,loss,mean_logp_w,mean_logp_l\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < rec.steps(); ++i) {
    out << i << ',' << rec.step_epoch[i] << ',' << rec.step_loss[i] << ',' << rec.step_logp_w[i]
        << ',' << rec.step_logp_l[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// SFT

// Mean over sequences of -log pi(y|x); SFT fits chosen and rejected alike.
inline double sft_nll(const PolicyModel& policy, const Dataset& data) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : data) {
    total -= seq_logprob(policy, p.prompt, p.chosen).sum_full();
    total -= seq_logprob(policy, p.prompt, p.rejected).sum_full();
  }
  return total / (2.0 * static_cast<double>(data.size()));
}

inline PolicyModel train_sft(const Vocab& vocab, const Dataset& data, const TrainConfig& cfg,
                             RunRecord* record = nullptr) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_sft: empty dataset");
  PolicyModel policy(vocab, cfg.order);
  const std::size_t per_epoch = (data.size() + cfg.batch_sft - 1) / cfg.batch_sft;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs_sft);
  std::vector<double> grad(policy.logits().size());
  std::vector<double> ones;
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_sft; ++epoch) {
    double e_loss = 0.0, e_w = 0.0, e_l = 0.0;
    for (const auto& batch : make_batches(data.size(), cfg.batch_sft, cfg.seed, epoch)) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const double scale = 1.0 / (2.0 * static_cast<double>(batch.size()));
      double loss = 0.0, mean_w = 0.0, mean_l = 0.0;
      for (std::size_t idx : batch) {
        const auto& p = data[idx];
        for (const TokenSeq* y : {&p.chosen, &p.rejected}) {
          const double lp = seq_logprob(policy, p.prompt, *y).sum_full();
          loss -= lp * scale;
          (y == &p.chosen ? mean_w : mean_l) += 2.0 * scale * lp;
          ones.assign(y->size(), 1.0);
          // Ascent direction of the log-likelihood, so descent on the NLL is +=.
          accumulate_seq_logprob_grad(policy, p.prompt, *y, ones, scale, grad);
        }
      }
      const double lr = scheduled_lr(cfg.lr_sft, cfg.lr_schedule, cfg.warmup_frac, step, total);
      auto logits = policy.logits();
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += lr * grad[i];
      if (record) {
        record->step_epoch.push_back(epoch);
        record->step_loss.push_back(loss);
        record->step_logp_w.push_back(mean_w);
        record->step_logp_l.push_back(mean_l);
      }
      const auto n = static_cast<double>(batch.size());
      e_loss += loss * n;
      e_w += mean_w * n;
      e_l += mean_l * n;
      ++step;
    }
    if (record) {
      const auto n = static_cast<double>(data.size());
      record->epoch_loss.push_back(e_loss / n);
      record->epoch_logp_w.push_back(e_w / n);
      record->epoch_logp_l.push_back(e_l / n);
    }
  }
  return policy;
}

// ---------------------------------------------------------------------------
// Preference optimization

inline PairLogProbs pair_logprobs(const PolicyModel& policy, const PolicyModel& reference,
                                  const PreferencePair& p) {
  return {seq_logprob(policy, p.prompt, p.chosen), seq_logprob(policy, p.prompt, p.rejected),
          seq_logprob(reference, p.prompt, p.chosen), seq_logprob(reference, p.prompt, p.rejected)};
}

// Loss of one pair; when grad is given, adds scale * d loss / d logits.
inline LossReport pair_objective(const PolicyModel& policy, const PairLogProbs& lp,
                                 const PreferencePair& p, const MethodConfig& cfg, double scale,
                                 std::span<double> grad) {
  const LossReport r = evaluate_loss(lp, cfg);
  if (!grad.empty()) {
    const std::size_t l_p = public_length(lp.len_w(), lp.len_l());
    const auto ww = position_weights(cfg, true, lp.len_w(), l_p);
    const auto wl = position_weights(cfg, false, lp.len_l(), l_p);
    accumulate_seq_logprob_grad(policy, p.prompt, p.chosen, ww, scale * r.d_loss_d_sw, grad);
    accumulate_seq_logprob_grad(policy, p.prompt, p.rejected, wl, scale * r.d_loss_d_sl, grad);
  }
  return r;
}

// Mean loss over a dataset and its gradient w.r.t. the policy logits.
inline double dataset_objective(const PolicyModel& policy, const PolicyModel& reference,
                                const Dataset& data, const MethodConfig& cfg,
                                std::vector<double>* grad = nullptr) {
  if (grad) grad->assign(policy.logits().size(), 0.0);
  const double scale = 1.0 / static_cast<double>(data.size());
  double loss = 0.0;
  for (const auto& p : data) {
    const auto lp = pair_logprobs(policy, reference, p);
    loss += scale * pair_objective(policy, lp, p, cfg, scale,
                                   grad ? std::span<double>(*grad) : std::span<double>())
                        .loss;
  }
  return loss;
}

inline PolicyModel train_po(const PolicyModel& policy_init, const PolicyModel& reference,
                            const Dataset& data, const TrainConfig& cfg,
                            RunRecord* record = nullptr) {
  cfg.validate();
  if (!policy_init.same_shape(reference)) {
    throw ConfigError("train_po: policy and reference differ in vocab or order");
  }
  if (data.empty()) throw ConfigError("train_po: empty dataset");

  // The reference is frozen; its log-likelihoods are computed once.
  std::vector<SeqLogProb> ref_w, ref_l;
  ref_w.reserve(data.size());
  ref_l.reserve(data.size());
  for (const auto& p : data) {
    ref_w.push_back(seq_logprob(reference, p.prompt, p.chosen));
    ref_l.push_back(seq_logprob(reference, p.prompt, p.rejected));
  }

  PolicyModel policy = policy_init;
  const std::size_t per_epoch = (data.size() + cfg.batch_po - 1) / cfg.batch_po;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs_po);
  std::vector<double> grad(policy.logits().size());
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_po; ++epoch) {
    double e_loss = 0.0, e_w = 0.0, e_l = 0.0;
    for (const auto& batch : make_batches(data.size(), cfg.batch_po, cfg.seed, epoch)) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(batch.size());
      double loss = 0.0, mean_w = 0.0, mean_l = 0.0;
      for (std::size_t idx : batch) {
        const auto& p = data[idx];
        PairLogProbs lp{seq_logprob(policy, p.prompt, p.chosen),
                        seq_logprob(policy, p.prompt, p.rejected), ref_w[idx], ref_l[idx]};
        const LossReport r = pair_objective(policy, lp, p, cfg.method, scale, grad);
        loss += scale * r.loss;
        mean_w += scale * lp.policy_w.sum_full();
        mean_l += scale * lp.policy_l.sum_full();
      }
      const double lr = scheduled_lr(cfg.lr_po, cfg.lr_schedule, cfg.warmup_frac, step, total);
      auto logits = policy.logits();
      for (std::size_t i = 0; i < logits.size(); ++i) logits[i] -= lr * grad[i];
      if (record) {
        record->step_epoch.push_back(epoch);
        record->step_loss.push_back(loss);
        record->step_logp_w.push_back(mean_w);
        record->step_logp_l.push_back(mean_l);
      }
      const auto n = static_cast<double>(batch.size());
      e_loss += loss * n;
      e_w += mean_w * n;
      e_l += mean_l * n;
      ++step;
    }
    if (record) {
      const auto n = static_cast<double>(data.size());
      record->epoch_loss.push_back(e_loss / n);
      record->epoch_logp_w.push_back(e_w / n);
      record->epoch_logp_l.push_back(e_l / n);
    }
  }
  return policy;
}

// ---------------------------------------------------------------------------
// Sampling statistics

struct LengthStats {
  std::optional<double> mean;  // empty when every sample was truncated
  double truncation_rate = 0.0;
  std::size_t kept = 0;
  std::size_t total = 0;
};

// Mean token count (eos included) of non-truncated samples, n_samples per
// prompt, prompts visited in order from one seeded stream.
inline LengthStats avg_sample_length(const PolicyModel& policy, const std::vector<TokenSeq>& prompts,
                                     std::size_t n_samples, std::uint64_t seed, int max_len) {
  if (n_samples < 1) throw InputError("avg_sample_length: n_samples must be >= 1");
  Rng rng(seed);
  LengthStats s;
  double sum = 0.0;
  for (const auto& x : prompts) {
    for (std::size_t i = 0; i < n_samples; ++i) {
      const Sample smp = sample(policy, x, rng, max_len);
      ++s.total;
      if (smp.truncated) continue;
      ++s.kept;
      sum += static_cast<double>(smp.tokens.size());
    }
  }
  if (s.total > 0) {
    s.truncation_rate = static_cast<double>(s.total - s.kept) / static_cast<double>(s.total);
  }
  if (s.kept > 0) s.mean = sum / static_cast<double>(s.kept);
  return s;
}

struct EvalStats {
  double mean_quality = 0.0;  // over all samples, truncated included
  LengthStats length;
};

// Ground-truth quality and length of fresh samples for every prompt of the
// world. Uses the same seeded stream layout as avg_sample_length, so the
// length part equals avg_sample_length at the same seed.
inline EvalStats evaluate_samples(const PolicyModel& policy, const WorldSpec& world,
                                  std::size_t n_per_prompt, std::uint64_t seed, int max_len) {
  if (n_per_prompt < 1) throw InputError("evaluate_samples: n_per_prompt must be >= 1");
  Rng rng(seed);
  EvalStats e;
  double len_sum = 0.0;
  double q_sum = 0.0;
  for (std::size_t pi = 0; pi < world.vocab.prompt_ids.size(); ++pi) {
    const TokenSeq x = world.prompt(pi);
    for (std::size_t i = 0; i < n_per_prompt; ++i) {
      const Sample smp = sample(policy, x, rng, max_len);
      ++e.length.total;
      q_sum += quality(x, smp.tokens, world);
      if (smp.truncated) continue;
      ++e.length.kept;
      len_sum += static_cast<double>(smp.tokens.size());
    }
  }
  const auto total = static_cast<double>(e.length.total);
  e.mean_quality = q_sum / total;
  e.length.truncation_rate = static_cast<double>(e.length.total - e.length.kept) / total;
  if (e.length.kept > 0) e.length.mean = len_sum / static_cast<double>(e.length.kept);
  return e;
}

inline std::vector<TokenSeq> world_prompts(const WorldSpec& world) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < world.vocab.prompt_ids.size(); ++i) out.push_back(world.prompt(i));
  return out;
}

}  // namespace lddpo
