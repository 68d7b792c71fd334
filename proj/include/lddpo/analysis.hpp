#pragma once

// Desk-scale diagnostics: length/likelihood-gap heatmaps, probability
// difference split by which response is longer, the alpha sweep with its
// length sensitivity coefficient, and a central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <future>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lddpo/error.hpp"
#include "lddpo/losses.hpp"
#include "lddpo/policy.hpp"
#include "lddpo/rng.hpp"
#include "lddpo/synthgen.hpp"
#include "lddpo/trainer.hpp"

namespace lddpo {

// ---------------------------------------------------------------------------
// Finite differences

using ScalarFn = std::function<double(std::span<const double>)>;

inline std::vector<double> finite_diff(const ScalarFn& f, std::span<const double> point,
                                       double step) {
  if (!(step > 0.0)) throw InputError("finite_diff: step must be > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite_diff: non-finite evaluation at coordinate " + std::to_string(i));
    }
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero pairs from
// producing meaningless ratios.
inline double rel_error(double a, double b, double floor = 1e-12) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

// ---------------------------------------------------------------------------
// Rank statistics

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// Spearman rank correlation (Pearson on average ranks). 0 when either side
// is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("spearman: need >= 2 paired values");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

// ---------------------------------------------------------------------------
// Heatmap of log pi(y_l|x) - log pi(y_w|x) over (len_w, len_l)

struct HeatmapGrid {
  std::size_t max_len = 0;       // bins 1..max_len on both axes
  std::vector<double> sum;       // (len_w - 1) * max_len + (len_l - 1)
  std::vector<std::size_t> count;

  explicit HeatmapGrid(std::size_t max_len_ = 0)
      : max_len(max_len_), sum(max_len_ * max_len_, 0.0), count(max_len_ * max_len_, 0) {}

  std::size_t index(std::size_t len_w, std::size_t len_l) const {
    return (len_w - 1) * max_len + (len_l - 1);
  }
  bool empty(std::size_t len_w, std::size_t len_l) const { return count[index(len_w, len_l)] == 0; }
  // Mean of log pi(y_l|x) - log pi(y_w|x) in the cell; NaN for empty cells.
  double value(std::size_t len_w, std::size_t len_l) const {
    const auto i = index(len_w, len_l);
    return count[i] == 0 ? std::nan("") : sum[i] / static_cast<double>(count[i]);
  }

  struct Cell {
    std::size_t len_w, len_l, count;
    double value;
  };
  std::vector<Cell> cells() const {
    std::vector<Cell> out;
    for (std::size_t w = 1; w <= max_len; ++w) {
      for (std::size_t l = 1; l <= max_len; ++l) {
        if (!empty(w, l)) out.push_back({w, l, count[index(w, l)], value(w, l)});
      }
    }
    return out;
  }
};

// Gap ld_logprob(y_w) - ld_logprob(y_l) of one pair at the given alpha.
inline double pair_gap(const PolicyModel& policy, const PreferencePair& p, double alpha) {
  const auto sw = seq_logprob(policy, p.prompt, p.chosen);
  const auto sl = seq_logprob(policy, p.prompt, p.rejected);
  const std::size_t l_p = public_length(sw.length(), sl.length());
  return ld_logprob(sw, l_p, alpha) - ld_logprob(sl, l_p, alpha);
}

// Unit-width bins; pairs with a response longer than max_len are dropped.
inline HeatmapGrid heatmap(const PolicyModel& policy, const Dataset& data, double alpha,
                           std::size_t max_len) {
  if (data.empty()) throw InputError("heatmap: empty dataset");
  HeatmapGrid g(max_len);
  for (const auto& p : data) {
    const std::size_t lw = p.chosen.size();
    const std::size_t ll = p.rejected.size();
    if (lw > max_len || ll > max_len) continue;
    const auto i = g.index(lw, ll);
    g.sum[i] += -pair_gap(policy, p, alpha);
    ++g.count[i];
  }
  return g;
}

// Spearman correlation over nonempty cells between len_w - len_l and the
// mean gap log pi(y_w|x) - log pi(y_l|x) (the negated cell value).
inline double heatmap_length_correlation(const HeatmapGrid& g) {
  std::vector<double> dl, gap;
  for (const auto& c : g.cells()) {
    dl.push_back(static_cast<double>(c.len_w) - static_cast<double>(c.len_l));
    gap.push_back(-c.value);
  }
  if (dl.size() < 2) return 0.0;
  return spearman(dl, gap);
}

inline void write_heatmap_csv(std::ostream& out, const HeatmapGrid& g, double alpha,
                              std::uint64_t seed) {
  out << "len_w,len_l,alpha,seed,value,count\n";
  out << std::setprecision(17);
  for (const auto& c : g.cells()) {
    out << c.len_w << ',' << c.len_l << ',' << alpha << ',' << seed << ',' << c.value << ','
        << c.count << '\n';
  }
}

// ---------------------------------------------------------------------------
// Probability difference split by the longer side

struct ProbDiffSummary {
  std::size_t count = 0;
  std::optional<double> mean;  // empty for an empty subset
  double hist_lo = 0.0;
  double hist_width = 0.0;
  std::vector<std::size_t> histogram;
};

struct ProbDiffSplit {
  ProbDiffSummary chosen_longer;
  ProbDiffSummary rejected_longer;
  std::size_t equal_length = 0;
};

// log pi(y_w|x) - log pi(y_l|x) per pair (ld_logprob at alpha; alpha = 1 is
// the plain likelihood, alpha = 0 the public-length likelihood), summarized
// separately for chosen-longer and rejected-longer pairs.
inline ProbDiffSplit probdiff_split(const PolicyModel& policy, const Dataset& data,
                                    double alpha = 1.0, std::size_t bins = 40,
                                    double hist_lo = -40.0, double hist_hi = 40.0) {
  std::vector<double> gw, gl;
  ProbDiffSplit out;
  for (const auto& p : data) {
    if (p.chosen.size() == p.rejected.size()) {
      ++out.equal_length;
      continue;
    }
    (p.chosen.size() > p.rejected.size() ? gw : gl).push_back(pair_gap(policy, p, alpha));
  }
  auto summarize_subset = [&](const std::vector<double>& v) {
    ProbDiffSummary s;
    s.count = v.size();
    s.hist_lo = hist_lo;
    s.hist_width = (hist_hi - hist_lo) / static_cast<double>(bins);
    s.histogram.assign(bins, 0);
    if (v.empty()) return s;
    double sum = 0.0;
    for (double g : v) {
      sum += g;
      const double pos = std::floor((g - hist_lo) / s.hist_width);
      const auto b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
      ++s.histogram[b];
    }
    s.mean = sum / static_cast<double>(v.size());
    return s;
  };
  out.chosen_longer = summarize_subset(gw);
  out.rejected_longer = summarize_subset(gl);
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct EvalSettings {
  std::size_t n_pairs = 2000;
  std::size_t samples_per_prompt = 500;
  int max_len = 120;
};

// Stream tags so every method trained at one seed sees the same data,
// reference, batch order and evaluation draws.
enum : std::uint64_t { kTagData = 1, kTagSft = 2, kTagPo = 3, kTagEval = 4 };

struct SeedSetup {
  std::uint64_t seed = 0;
  Dataset data;
  PolicyModel sft;
};

inline SeedSetup prepare_seed(const WorldSpec& world, const TrainConfig& cfg,
                              const EvalSettings& es, std::uint64_t seed) {
  SeedSetup s;
  s.seed = seed;
  s.data = gen_dataset(world, es.n_pairs, derive_seed(seed, kTagData));
  TrainConfig sft_cfg = cfg;
  sft_cfg.seed = derive_seed(seed, kTagSft);
  s.sft = train_sft(world.vocab, s.data, sft_cfg);
  return s;
}

inline PolicyModel run_po(const SeedSetup& s, const TrainConfig& cfg, const MethodConfig& method) {
  TrainConfig c = cfg;
  c.method = method;
  c.seed = derive_seed(s.seed, kTagPo);
  return train_po(s.sft, s.sft, s.data, c);
}

inline EvalStats evaluate(const PolicyModel& policy, const WorldSpec& world,
                          const EvalSettings& es, std::uint64_t seed) {
  return evaluate_samples(policy, world, es.samples_per_prompt, derive_seed(seed, kTagEval),
                          es.max_len);
}

struct SweepCell {
  double alpha = 1.0;
  std::uint64_t seed = 0;
  double quality = 0.0;
  double avg_len = 0.0;  // NaN if every sample was truncated
  double truncation_rate = 0.0;
};

struct AlphaSweepResult {
  std::vector<double> alphas;
  std::vector<std::uint64_t> seeds;
  std::vector<SweepCell> cells;         // alpha-major, then seed
  std::vector<double> mean_quality;     // per alpha, averaged over seeds
  std::vector<double> mean_length;
  double alpha_star = 1.0;
  double gamma = 0.0;
};

// Argmax of the metric; ties go to the larger alpha.
inline std::size_t argmax_prefer_larger(std::span<const double> alphas,
                                        std::span<const double> metric) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < alphas.size(); ++i) {
    if (metric[i] > metric[best] || (metric[i] == metric[best] && alphas[i] > alphas[best])) {
      best = i;
    }
  }
  return best;
}

// LD-DPO for every (alpha, seed). Each seed gets its own dataset and SFT
// reference; cells are independent and may run on `threads` workers. The
// result does not depend on the thread count.
inline AlphaSweepResult alpha_sweep(const WorldSpec& world, const TrainConfig& cfg,
                                    std::vector<double> alphas,
                                    const std::vector<std::uint64_t>& seeds,
                                    const EvalSettings& es, unsigned threads = 1) {
  if (alphas.empty()) throw ConfigError("alpha_sweep: need >= 1 alpha");
  if (seeds.empty()) throw ConfigError("alpha_sweep: need >= 1 seed");
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha_sweep: alphas must be in [0, 1]");
  }
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());

  std::vector<SeedSetup> setups;
  for (auto seed : seeds) setups.push_back(prepare_seed(world, cfg, es, seed));

  AlphaSweepResult res;
  res.alphas = alphas;
  res.seeds = seeds;
  res.cells.resize(alphas.size() * seeds.size());

  auto run_cell = [&](std::size_t i) {
    const std::size_t ai = i / seeds.size();
    const std::size_t si = i % seeds.size();
    MethodConfig m = cfg.method;
    m.method = Method::kLdDpo;
    m.alpha = alphas[ai];
    PolicyModel pol;
    try {
      pol = run_po(setups[si], cfg, m);
    } catch (const std::exception& e) {
      throw std::runtime_error("alpha_sweep: alpha=" + std::to_string(alphas[ai]) +
                               " seed=" + std::to_string(seeds[si]) + ": " + e.what());
    }
    const EvalStats ev = evaluate(pol, world, es, seeds[si]);
    return SweepCell{alphas[ai], seeds[si], ev.mean_quality,
                     ev.length.mean.value_or(std::nan("")), ev.length.truncation_rate};
  };

  const std::size_t n = res.cells.size();
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) res.cells[i] = run_cell(i);
  } else {
    for (std::size_t start = 0; start < n; start += threads) {
      std::vector<std::future<SweepCell>> jobs;
      for (std::size_t i = start; i < std::min(n, start + threads); ++i) {
        jobs.push_back(std::async(std::launch::async, run_cell, i));
      }
      for (std::size_t k = 0; k < jobs.size(); ++k) res.cells[start + k] = jobs[k].get();
    }
  }

  for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
    double q = 0.0, len = 0.0;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      q += res.cells[ai * seeds.size() + si].quality;
      len += res.cells[ai * seeds.size() + si].avg_len;
    }
    res.mean_quality.push_back(q / static_cast<double>(seeds.size()));
    res.mean_length.push_back(len / static_cast<double>(seeds.size()));
  }
  res.alpha_star = alphas[argmax_prefer_larger(alphas, res.mean_quality)];
  res.gamma = 1.0 - res.alpha_star;
  return res;
}

inline void write_sweep_csv(std::ostream& out, const AlphaSweepResult& r) {
  out << "alpha,seed,quality,avg_len,truncation_rate\n";
  out << std::setprecision(17);
  for (const auto& c : r.cells) {
    out << c.alpha << ',' << c.seed << ',' << c.quality << ',' << c.avg_len << ','
        << c.truncation_rate << '\n';
  }
}

}  // namespace lddpo
