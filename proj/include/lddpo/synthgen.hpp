#pragma once

// Synthetic preference world with a ground-truth quality oracle.
//
// Each prompt owns a relevance set of content tokens. A response body is a
// string of tokens where every position is, independently, a relevant
// content token with probability q and otherwise a filler token. Quality is
// the share of relevant tokens among the content tokens of a response, so
// filler changes length but not quality. Sampled responses may also contain
// other prompts' content tokens, which count against quality.
//
// Response lengths count the terminal eos. The body length (non-eos tokens)
// follows a geometric law truncated to [1, max_len - 1] whose parameter is
// chosen so the truncated mean equals the configured mean. Lengths are drawn
// once per pair and never resampled, so the length law is exact.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lddpo/error.hpp"
#include "lddpo/policy.hpp"
#include "lddpo/rng.hpp"

namespace lddpo {

struct WorldSpec {
  Vocab vocab;
  // relevance[p] is the relevant content set of prompt vocab.prompt_ids[p].
  std::vector<std::vector<TokenId>> relevance;
  double mean_len_w = 12.0;
  double mean_len_l = 6.0;
  int max_len = 40;
  double quality_gap = 0.2;
  std::uint64_t seed = 0;

  // 4 prompts, 8 content, 8 filler; each prompt owns a disjoint slice of the
  // content tokens.
  static WorldSpec make_default(int n_prompts = 4, int n_content = 8, int n_filler = 8) {
    WorldSpec w;
    w.vocab = Vocab::make(n_prompts, n_content, n_filler);
    w.relevance.resize(static_cast<std::size_t>(n_prompts));
    for (int i = 0; i < n_content; ++i) {
      w.relevance[static_cast<std::size_t>(i % n_prompts)].push_back(
          w.vocab.content_ids[static_cast<std::size_t>(i)]);
    }
    return w;
  }

  void validate() const {
    vocab.validate();
    if (vocab.prompt_ids.empty()) throw ConfigError("world: at least one prompt id required");
    if (relevance.size() != vocab.prompt_ids.size()) {
      throw ConfigError("world.relevance: one set per prompt required");
    }
    for (const auto& set : relevance) {
      if (set.empty()) throw ConfigError("world.relevance: sets must be nonempty");
      for (TokenId t : set) {
        if (!vocab.is_content(t)) {
          throw ConfigError("world.relevance: id " + std::to_string(t) + " is not a content id");
        }
      }
    }
    if (!(mean_len_w >= 1.0)) throw ConfigError("world.mean_len_w must be >= 1");
    if (!(mean_len_l >= 1.0)) throw ConfigError("world.mean_len_l must be >= 1");
    if (max_len < 2) throw ConfigError("world.max_len must be >= 2");
    if (mean_len_w != 1.0 && !(mean_len_w < max_len / 2.0)) throw ConfigError("world.mean_len_w must be < max_len / 2");
    if (mean_len_l != 1.0 && !(mean_len_l < max_len / 2.0)) throw ConfigError("world.mean_len_l must be < max_len / 2");
    if (!(quality_gap > 0.0 && quality_gap <= 1.0)) {
      throw ConfigError("world.quality_gap must be in (0, 1]");
    }
    if (vocab.filler_ids.empty()) throw ConfigError("world: at least one filler id required");
  }

  std::size_t prompt_index(const TokenSeq& prompt) const {
    if (prompt.size() == 1) {
      for (std::size_t i = 0; i < vocab.prompt_ids.size(); ++i) {
        if (vocab.prompt_ids[i] == prompt[0]) return i;
      }
    }
    throw InputError("unknown prompt");
  }

  TokenSeq prompt(std::size_t index) const { return {vocab.prompt_ids.at(index)}; }
};

struct PreferencePair {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  double q_w = 0.0;
  double q_l = 0.0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

using Dataset = std::vector<PreferencePair>;

// Share of content tokens that are relevant to the prompt; 0 when the
// response has no content tokens.
inline double quality(const TokenSeq& prompt, const TokenSeq& response, const WorldSpec& world) {
  const auto& relevant = world.relevance[world.prompt_index(prompt)];
  int content = 0;
  int hits = 0;
  for (TokenId t : response) {
    if (!world.vocab.is_content(t)) continue;
    ++content;
    if (std::find(relevant.begin(), relevant.end(), t) != relevant.end()) ++hits;
  }
  return content == 0 ? 0.0 : static_cast<double>(hits) / content;
}

// Mean of the geometric law on {1, 2, ...} with stop probability p,
// conditioned on <= cap.
inline double truncated_geometric_mean(double p, int cap) {
  if (p >= 1.0) return 1.0;
  const double log_q = std::log1p(-p);
  const double q_cap = std::exp(cap * log_q);
  return 1.0 / p - cap * q_cap / -std::expm1(cap * log_q);
}

// Stop probability whose truncated law on [1, cap] has the given mean. The
// mean must lie in [1, (cap + 1) / 2), the range the law can reach.
inline double geometric_p_for_mean(double mean, int cap) {
  if (mean == 1.0) return 1.0;
  if (!(mean > 1.0) || !(mean < (cap + 1) / 2.0)) {
    throw ConfigError("length mean " + std::to_string(mean) + " is outside [1, " +
                      std::to_string((cap + 1) / 2.0) + ") for a cap of " + std::to_string(cap));
  }
  double lo = 1e-12, hi = 1.0;  // mean is decreasing in p
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (truncated_geometric_mean(mid, cap) > mean ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Geometric law with stop probability p on {1, 2, ...}, conditioned on <= cap.
inline int sample_truncated_geometric(Rng& rng, double p, int cap) {
  if (p >= 1.0 || cap <= 1) return 1;
  const double log_q = std::log1p(-p);
  const double mass = -std::expm1(cap * log_q);  // P(L <= cap)
  const double u = rng.uniform() * mass;
  const int k = static_cast<int>(std::ceil(std::log1p(-u) / log_q));
  return std::clamp(k, 1, cap);
}

inline Dataset gen_dataset(const WorldSpec& world, std::size_t n_pairs, std::uint64_t seed) {
  world.validate();
  if (n_pairs < 1) throw ConfigError("n_pairs must be >= 1");

  const std::size_t n_prompts = world.vocab.prompt_ids.size();
  const auto& filler = world.vocab.filler_ids;

  Rng rng(seed);
  // Body lengths (eos excluded) follow truncated geometric laws whose means
  // are exactly mean_len_w and mean_len_l.
  const int body_cap = world.max_len - 1;
  const double p_w = geometric_p_for_mean(world.mean_len_w, body_cap);
  const double p_l = geometric_p_for_mean(world.mean_len_l, body_cap);
  auto fill = [&](std::size_t p, int body, double q) {
    TokenSeq out;
    out.reserve(static_cast<std::size_t>(body) + 1);
    const auto& rel = world.relevance[p];
    for (int i = 0; i < body; ++i) {
      out.push_back(rng.bernoulli(q) ? rel[rng.below(rel.size())]
                                     : filler[rng.below(filler.size())]);
    }
    out.push_back(world.vocab.eos_id);
    return out;
  };

  constexpr int kMaxAttempts = 100000;
  Dataset data;
  data.reserve(n_pairs);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    const std::size_t p = rng.below(n_prompts);
    const int body_w = sample_truncated_geometric(rng, p_w, body_cap);
    const int body_l = sample_truncated_geometric(rng, p_l, body_cap);
    PreferencePair pair;
    pair.prompt = world.prompt(p);
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      const double q = rng.uniform(world.quality_gap, 1.0);
      const double q_l = std::clamp(q - world.quality_gap, 0.0, 1.0);
      pair.chosen = fill(p, body_w, q);
      pair.rejected = fill(p, body_l, q_l);
      pair.q_w = quality(pair.prompt, pair.chosen, world);
      pair.q_l = quality(pair.prompt, pair.rejected, world);
      accepted = pair.q_w > pair.q_l;
    }
    if (!accepted) throw ConfigError("world: could not draw a pair with q_w > q_l");
    data.push_back(std::move(pair));
  }
  return data;
}

// ---------------------------------------------------------------------------
// JSONL persistence: one object per line,
//   {"prompt": [ids], "chosen": [ids], "rejected": [ids], "q_w": x, "q_l": y}
// Lines starting with '#' (provenance headers) and empty lines are skipped.

inline nlohmann::ordered_json pair_to_json(const PreferencePair& p) {
  return {{"prompt", p.prompt}, {"chosen", p.chosen}, {"rejected", p.rejected},
          {"q_w", p.q_w},       {"q_l", p.q_l}};
}

inline void write_jsonl(std::ostream& out, const Dataset& pairs) {
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
}

inline void write_jsonl(const Dataset& pairs, const std::string& path,
                        const std::string& header_comment = {}) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  write_jsonl(out, pairs);
  if (!out) throw IoError("write failed: " + path);
}

inline Dataset read_jsonl(std::istream& in) {
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PreferencePair p;
      j.at("prompt").get_to(p.prompt);
      j.at("chosen").get_to(p.chosen);
      j.at("rejected").get_to(p.rejected);
      p.q_w = j.at("q_w").get<double>();
      p.q_l = j.at("q_l").get<double>();
      if (j.size() != 5) throw ParseError(lineno, "unexpected keys");
      if (p.chosen.empty() || p.rejected.empty()) throw ParseError(lineno, "empty response");
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("dataset not found: " + path);
  return read_jsonl(in);
}

struct DatasetSummary {
  std::size_t n_pairs = 0;
  double mean_len_w = 0.0;
  double mean_len_l = 0.0;
  double mean_q_w = 0.0;
  double mean_q_l = 0.0;
  std::size_t chosen_longer = 0;
  std::size_t rejected_longer = 0;
  std::size_t equal_length = 0;
};

inline DatasetSummary summarize(const Dataset& data) {
  DatasetSummary s;
  s.n_pairs = data.size();
  if (data.empty()) return s;
  for (const auto& p : data) {
    s.mean_len_w += static_cast<double>(p.chosen.size());
    s.mean_len_l += static_cast<double>(p.rejected.size());
    s.mean_q_w += p.q_w;
    s.mean_q_l += p.q_l;
    if (p.chosen.size() > p.rejected.size()) {
      ++s.chosen_longer;
    } else if (p.chosen.size() < p.rejected.size()) {
      ++s.rejected_longer;
    } else {
      ++s.equal_length;
    }
  }
  const auto n = static_cast<double>(data.size());
  s.mean_len_w /= n;
  s.mean_len_l /= n;
  s.mean_q_w /= n;
  s.mean_q_l /= n;
  return s;
}

inline nlohmann::ordered_json to_json(const DatasetSummary& s) {
  return {{"n_pairs", s.n_pairs},         {"mean_len_w", s.mean_len_w},
          {"mean_len_l", s.mean_len_l},   {"mean_q_w", s.mean_q_w},
          {"mean_q_l", s.mean_q_l},       {"chosen_longer", s.chosen_longer},
          {"rejected_longer", s.rejected_longer}, {"equal_length", s.equal_length}};
}

}  // namespace lddpo
