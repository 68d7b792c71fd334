#pragma once

// Experiment configuration: one JSON document with four sections.
//
//   {
//     "world":    {...},   // synthetic preference world + dataset size
//     "train":    {...},   // SFT and preference-optimization settings
//     "analysis": {...},   // sweep alphas/seeds, evaluation sample counts
//     "paths":    {...}    // dataset, checkpoints, output directory
//   }
//
// Every section and key is optional; missing keys keep their defaults.
// Unknown keys are rejected. Validation errors name the offending field.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "lddpo/analysis.hpp"
#include "lddpo/error.hpp"
#include "lddpo/losses.hpp"
#include "lddpo/synthgen.hpp"
#include "lddpo/trainer.hpp"

namespace lddpo {

struct WorldConfig {
  int n_prompts = 4;
  int n_content = 8;
  int n_filler = 8;
  double mean_len_w = 12.0;
  double mean_len_l = 6.0;
  int max_len = 40;
  double quality_gap = 0.2;
  std::size_t n_pairs = 2000;
  std::uint64_t seed = 0;

  WorldSpec spec() const {
    if (n_prompts < 1) throw ConfigError("world.n_prompts must be >= 1");
    if (n_content < n_prompts) throw ConfigError("world.n_content must be >= world.n_prompts");
    if (n_filler < 1) throw ConfigError("world.n_filler must be >= 1");
    if (n_pairs < 1) throw ConfigError("world.n_pairs must be >= 1");
    WorldSpec w = WorldSpec::make_default(n_prompts, n_content, n_filler);
    w.mean_len_w = mean_len_w;
    w.mean_len_l = mean_len_l;
    w.max_len = max_len;
    w.quality_gap = quality_gap;
    w.seed = seed;
    w.validate();
    return w;
  }
};

struct AnalysisConfig {
  std::vector<double> alphas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  double heatmap_alpha = 1.0;
  int bins = 40;
  double probdiff_lo = -40.0;
  double probdiff_hi = 40.0;
  std::size_t samples_per_prompt = 500;
  int eval_max_len = 120;
  unsigned threads = 1;
  std::size_t gradcheck_instances = 100;
  double gradcheck_tol = 1e-4;

  void validate() const {
    if (alphas.empty()) throw ConfigError("analysis.alphas must be nonempty");
    for (double a : alphas) {
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("analysis.alphas entries must be in [0, 1]");
    }
    if (seeds.empty()) throw ConfigError("analysis.seeds must be nonempty");
    if (!(heatmap_alpha >= 0.0 && heatmap_alpha <= 1.0)) {
      throw ConfigError("analysis.heatmap_alpha must be in [0, 1]");
    }
    if (bins < 1) throw ConfigError("analysis.bins must be >= 1");
    if (!(probdiff_lo < probdiff_hi)) {
      throw ConfigError("analysis.probdiff_lo must be < analysis.probdiff_hi");
    }
    if (samples_per_prompt < 1) throw ConfigError("analysis.samples_per_prompt must be >= 1");
    if (eval_max_len < 2) throw ConfigError("analysis.eval_max_len must be >= 2");
    if (threads < 1) throw ConfigError("analysis.threads must be >= 1");
    if (gradcheck_instances < 1) throw ConfigError("analysis.gradcheck_instances must be >= 1");
    if (!(gradcheck_tol > 0.0)) throw ConfigError("analysis.gradcheck_tol must be > 0");
  }
};

struct PathsConfig {
  std::string dataset = "out/data.jsonl";
  std::string sft_checkpoint = "out/sft.ckpt";
  std::string po_checkpoint = "out/po.ckpt";
  std::string out_dir = "out";
};

struct ExperimentConfig {
  WorldConfig world;
  TrainConfig train;
  AnalysisConfig analysis;
  PathsConfig paths;

  void validate() const {
    (void)world.spec();
    train.validate();
    analysis.validate();
  }

  EvalSettings eval_settings() const {
    return {world.n_pairs, analysis.samples_per_prompt, analysis.eval_max_len};
  }
};

inline std::string schedule_name(LrSchedule s) {
  return s == LrSchedule::kCosine ? "cosine" : "constant";
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  const auto& w = c.world;
  j["world"] = {{"n_prompts", w.n_prompts},
                {"n_content", w.n_content},
                {"n_filler", w.n_filler},
                {"mean_len_w", w.mean_len_w},
                {"mean_len_l", w.mean_len_l},
                {"max_len", w.max_len},
                {"quality_gap", w.quality_gap},
                {"n_pairs", w.n_pairs},
                {"seed", w.seed}};
  const auto& t = c.train;
  j["train"] = {{"method", std::string(method_name(t.method.method))},
                {"beta", t.method.beta},
                {"alpha", t.method.alpha},
                {"alpha_rdpo", t.method.alpha_rdpo},
                {"simpo_beta", t.method.simpo_beta},
                {"simpo_gamma", t.method.simpo_gamma},
                {"order", t.order},
                {"lr_sft", t.lr_sft},
                {"lr_po", t.lr_po},
                {"batch_sft", t.batch_sft},
                {"batch_po", t.batch_po},
                {"epochs_sft", t.epochs_sft},
                {"epochs_po", t.epochs_po},
                {"lr_schedule", schedule_name(t.lr_schedule)},
                {"warmup_frac", t.warmup_frac},
                {"seed", t.seed}};
  const auto& a = c.analysis;
  j["analysis"] = {{"alphas", a.alphas},
                   {"seeds", a.seeds},
                   {"heatmap_alpha", a.heatmap_alpha},
                   {"bins", a.bins},
                   {"probdiff_lo", a.probdiff_lo},
                   {"probdiff_hi", a.probdiff_hi},
                   {"samples_per_prompt", a.samples_per_prompt},
                   {"eval_max_len", a.eval_max_len},
                   {"threads", a.threads},
                   {"gradcheck_instances", a.gradcheck_instances},
                   {"gradcheck_tol", a.gradcheck_tol}};
  const auto& p = c.paths;
  j["paths"] = {{"dataset", p.dataset},
                {"sft_checkpoint", p.sft_checkpoint},
                {"po_checkpoint", p.po_checkpoint},
                {"out_dir", p.out_dir}};
  return j;
}

namespace detail {

using json = nlohmann::json;
using Setter = std::function<void(const json&)>;

template <typename T>
Setter set(T& field, std::string name) {
  return [&field, name = std::move(name)](const json& v) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(name + " must be a boolean");
      } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError(name + " must be a nonnegative integer");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(name + " must be an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(name + " must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(name + " must be a string");
      }
      v.get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(name + " has the wrong type");
    }
  };
}

inline void apply_section(const json& root, const std::string& section,
                          const std::map<std::string, Setter>& setters) {
  if (!root.contains(section)) return;
  const json& obj = root.at(section);
  if (!obj.is_object()) throw ConfigError(section + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key " + section + "." + key);
    it->second(value);
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  using detail::set;
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : root.items()) {
    if (key != "world" && key != "train" && key != "analysis" && key != "paths") {
      throw ConfigError("unknown key " + key);
    }
  }
  ExperimentConfig c;
  auto& w = c.world;
  detail::apply_section(root, "world",
                        {{"n_prompts", set(w.n_prompts, "world.n_prompts")},
                         {"n_content", set(w.n_content, "world.n_content")},
                         {"n_filler", set(w.n_filler, "world.n_filler")},
                         {"mean_len_w", set(w.mean_len_w, "world.mean_len_w")},
                         {"mean_len_l", set(w.mean_len_l, "world.mean_len_l")},
                         {"max_len", set(w.max_len, "world.max_len")},
                         {"quality_gap", set(w.quality_gap, "world.quality_gap")},
                         {"n_pairs", set(w.n_pairs, "world.n_pairs")},
                         {"seed", set(w.seed, "world.seed")}});

  auto& t = c.train;
  std::string method = std::string(method_name(t.method.method));
  std::string schedule = schedule_name(t.lr_schedule);
  detail::apply_section(root, "train",
                        {{"method", set(method, "train.method")},
                         {"beta", set(t.method.beta, "train.beta")},
                         {"alpha", set(t.method.alpha, "train.alpha")},
                         {"alpha_rdpo", set(t.method.alpha_rdpo, "train.alpha_rdpo")},
                         {"simpo_beta", set(t.method.simpo_beta, "train.simpo_beta")},
                         {"simpo_gamma", set(t.method.simpo_gamma, "train.simpo_gamma")},
                         {"order", set(t.order, "train.order")},
                         {"lr_sft", set(t.lr_sft, "train.lr_sft")},
                         {"lr_po", set(t.lr_po, "train.lr_po")},
                         {"batch_sft", set(t.batch_sft, "train.batch_sft")},
                         {"batch_po", set(t.batch_po, "train.batch_po")},
                         {"epochs_sft", set(t.epochs_sft, "train.epochs_sft")},
                         {"epochs_po", set(t.epochs_po, "train.epochs_po")},
                         {"lr_schedule", set(schedule, "train.lr_schedule")},
                         {"warmup_frac", set(t.warmup_frac, "train.warmup_frac")},
                         {"seed", set(t.seed, "train.seed")}});
  const auto m = parse_method(method);
  if (!m) throw ConfigError("train.method: unknown method '" + method + "'");
  t.method.method = *m;
  if (schedule == "cosine") {
    t.lr_schedule = LrSchedule::kCosine;
  } else if (schedule == "constant") {
    t.lr_schedule = LrSchedule::kConstant;
  } else {
    throw ConfigError("train.lr_schedule must be cosine or constant");
  }

  auto& a = c.analysis;
  detail::apply_section(root, "analysis",
                        {{"alphas", set(a.alphas, "analysis.alphas")},
                         {"seeds", set(a.seeds, "analysis.seeds")},
                         {"heatmap_alpha", set(a.heatmap_alpha, "analysis.heatmap_alpha")},
                         {"bins", set(a.bins, "analysis.bins")},
                         {"probdiff_lo", set(a.probdiff_lo, "analysis.probdiff_lo")},
                         {"probdiff_hi", set(a.probdiff_hi, "analysis.probdiff_hi")},
                         {"samples_per_prompt",
                          set(a.samples_per_prompt, "analysis.samples_per_prompt")},
                         {"eval_max_len", set(a.eval_max_len, "analysis.eval_max_len")},
                         {"threads", set(a.threads, "analysis.threads")},
                         {"gradcheck_instances",
                          set(a.gradcheck_instances, "analysis.gradcheck_instances")},
                         {"gradcheck_tol", set(a.gradcheck_tol, "analysis.gradcheck_tol")}});

  auto& p = c.paths;
  detail::apply_section(root, "paths",
                        {{"dataset", set(p.dataset, "paths.dataset")},
                         {"sft_checkpoint", set(p.sft_checkpoint, "paths.sft_checkpoint")},
                         {"po_checkpoint", set(p.po_checkpoint, "paths.po_checkpoint")},
                         {"out_dir", set(p.out_dir, "paths.out_dir")}});
  c.validate();
  return c;
}

inline ExperimentConfig config_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

// FNV-1a 64 over the canonical dump of the resolved config, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

}  // namespace lddpo
