#pragma once

// Command-line front end. Subcommands:
//   gen-data  write a preference dataset (JSONL) and a summary sidecar
//   train     SFT or preference optimization; writes a checkpoint and a
//             per-step CSV record, prints a one-line summary
//   analyze   heatmap | probdiff | sweep | gradcheck
//
// Exit codes: 0 ok, 2 configuration, 3 I/O, 4 missing artifact, 5 check
// failure. Flags override the config file.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lddpo/analysis.hpp"
#include "lddpo/checkpoint.hpp"
#include "lddpo/config.hpp"
#include "lddpo/error.hpp"
#include "lddpo/gradcheck.hpp"
#include "lddpo/synthgen.hpp"
#include "lddpo/trainer.hpp"

namespace lddpo::cli {

enum ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kIo = 3,
  kMissing = 4,
  kCheckFailed = 5,
};

namespace detail {

inline std::string provenance(const ExperimentConfig& cfg, const std::string& seed) {
  return "config_hash=" + config_hash(cfg) + " seed=" + seed;
}

inline void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

inline std::ofstream open_out(const std::string& path) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  finish(out, path);
}

inline std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.paths.out_dir) / name).string();
}

inline void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(what + " not found: " + path);
}

inline PolicyModel load_policy_for(const std::string& path, const WorldSpec& world) {
  require_file(path, "checkpoint");
  auto ck = load_checkpoint(path);
  if (!(ck.policy.vocab() == world.vocab)) {
    throw ConfigError("checkpoint " + path + " was trained on a different world vocabulary");
  }
  return std::move(ck.policy);
}

inline Dataset load_dataset(const std::string& path) {
  require_file(path, "dataset");
  return read_jsonl(path);
}

inline nlohmann::ordered_json to_json(const ProbDiffSummary& s) {
  nlohmann::ordered_json j;
  j["count"] = s.count;
  j["mean"] = s.mean ? nlohmann::ordered_json(*s.mean) : nlohmann::ordered_json(nullptr);
  j["hist_lo"] = s.hist_lo;
  j["hist_width"] = s.hist_width;
  j["histogram"] = s.histogram;
  return j;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

}  // namespace detail

// Options shared by every subcommand plus per-command flags. Optional flags
// stay unset unless given so they only override the file when present.
struct Options {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::string> in;
  std::optional<std::uint64_t> seed;
  // train
  std::string stage;
  std::optional<std::string> method;
  std::optional<double> alpha;
  std::optional<std::string> sft;
  // analyze
  std::string kind;
  std::optional<std::string> checkpoint;
  std::optional<std::size_t> instances;
};

inline ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.method) {
    const auto m = parse_method(*o.method);
    if (!m) throw ConfigError("--method: unknown method '" + *o.method + "'");
    cfg.train.method.method = *m;
  }
  if (o.alpha) cfg.train.method.alpha = *o.alpha;
  cfg.validate();
  return cfg;
}

inline int cmd_gen_data(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(o);
  if (o.seed) cfg.world.seed = *o.seed;
  if (o.out) cfg.paths.dataset = *o.out;
  const WorldSpec world = cfg.world.spec();
  const Dataset data = gen_dataset(world, cfg.world.n_pairs, cfg.world.seed);
  const std::string prov = detail::provenance(cfg, std::to_string(cfg.world.seed));
  detail::ensure_parent(cfg.paths.dataset);
  write_jsonl(data, cfg.paths.dataset, prov);

  nlohmann::ordered_json side;
  side["config_hash"] = config_hash(cfg);
  side["seed"] = cfg.world.seed;
  const auto s = summarize(data);
  side["summary"] = to_json(s);
  detail::write_json(cfg.paths.dataset + ".summary.json", side);
  out << "pairs=" << s.n_pairs << " mean_len_w=" << detail::fmt(s.mean_len_w)
      << " mean_len_l=" << detail::fmt(s.mean_len_l) << " mean_q_w=" << detail::fmt(s.mean_q_w)
      << " mean_q_l=" << detail::fmt(s.mean_q_l) << " out=" << cfg.paths.dataset << '\n';
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(o);
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.in) cfg.paths.dataset = *o.in;
  if (o.sft) cfg.paths.sft_checkpoint = *o.sft;
  const bool sft = o.stage == "sft";
  std::string& target = sft ? cfg.paths.sft_checkpoint : cfg.paths.po_checkpoint;
  if (o.out) target = *o.out;
  const std::string ckpt_path = target;

  const WorldSpec world = cfg.world.spec();
  const Dataset data = detail::load_dataset(cfg.paths.dataset);
  if (data.empty()) throw ConfigError("dataset " + cfg.paths.dataset + " has no pairs");
  RunRecord rec;
  PolicyModel policy;
  if (sft) {
    policy = train_sft(world.vocab, data, cfg.train, &rec);
  } else {
    const PolicyModel ref = detail::load_policy_for(cfg.paths.sft_checkpoint, world);
    if (ref.order() != cfg.train.order) {
      throw ConfigError("train.order does not match the SFT checkpoint");
    }
    policy = train_po(ref, ref, data, cfg.train, &rec);
  }

  const std::string prov = detail::provenance(cfg, std::to_string(cfg.train.seed));
  detail::ensure_parent(ckpt_path);
  save_checkpoint(policy, ckpt_path, prov + " stage=" + o.stage);
  const std::string csv_path = ckpt_path + ".run.csv";
  auto csv = detail::open_out(csv_path);
  csv << "# " << prov << '\n';
  write_run_record_csv(csv, rec);
  detail::finish(csv, csv_path);

  const EvalStats ev = evaluate(policy, world, cfg.eval_settings(), cfg.train.seed);
  out << "stage=" << o.stage;
  if (!sft) {
    out << " method=" << method_name(cfg.train.method.method)
        << " alpha=" << detail::fmt(cfg.train.method.alpha);
  }
  out << " final_loss=" << detail::fmt(rec.epoch_loss.back()) << " avg_len="
      << (ev.length.mean ? detail::fmt(*ev.length.mean) : std::string("undefined"))
      << " truncation_rate=" << detail::fmt(ev.length.truncation_rate)
      << " quality=" << detail::fmt(ev.mean_quality) << " out=" << ckpt_path << '\n';
  return kOk;
}

inline int cmd_analyze(const Options& o, std::ostream& out) {
  ExperimentConfig cfg = resolve_config(o);
  if (o.in) cfg.paths.dataset = *o.in;
  if (o.checkpoint) cfg.paths.po_checkpoint = *o.checkpoint;
  const WorldSpec world = cfg.world.spec();
  const auto& an = cfg.analysis;

  if (o.kind == "heatmap") {
    const double alpha = o.alpha ? *o.alpha : an.heatmap_alpha;
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("--alpha must be in [0, 1]");
    const PolicyModel policy = detail::load_policy_for(cfg.paths.po_checkpoint, world);
    const Dataset data = detail::load_dataset(cfg.paths.dataset);
    const auto grid = heatmap(policy, data, alpha, static_cast<std::size_t>(cfg.world.max_len));
    const std::string path = o.out ? *o.out : detail::out_path(cfg, "heatmap.csv");
    auto f = detail::open_out(path);
    f << "# " << detail::provenance(cfg, std::to_string(cfg.train.seed)) << '\n';
    write_heatmap_csv(f, grid, alpha, cfg.train.seed);
    detail::finish(f, path);
    out << "cells=" << grid.cells().size()
        << " spearman=" << detail::fmt(heatmap_length_correlation(grid)) << " out=" << path
        << '\n';
    return kOk;
  }

  if (o.kind == "probdiff") {
    const PolicyModel policy = detail::load_policy_for(cfg.paths.po_checkpoint, world);
    const Dataset data = detail::load_dataset(cfg.paths.dataset);
    const auto bins = static_cast<std::size_t>(an.bins);
    const auto full = probdiff_split(policy, data, 1.0, bins, an.probdiff_lo, an.probdiff_hi);
    const auto pub = probdiff_split(policy, data, 0.0, bins, an.probdiff_lo, an.probdiff_hi);
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.train.seed;
    j["equal_length"] = full.equal_length;
    j["full"] = {{"chosen_longer", detail::to_json(full.chosen_longer)},
                 {"rejected_longer", detail::to_json(full.rejected_longer)}};
    j["public_length"] = {{"chosen_longer", detail::to_json(pub.chosen_longer)},
                          {"rejected_longer", detail::to_json(pub.rejected_longer)}};
    const std::string path = o.out ? *o.out : detail::out_path(cfg, "probdiff.json");
    detail::write_json(path, j);
    auto m = [](const ProbDiffSummary& s) {
      return s.mean ? detail::fmt(*s.mean) : std::string("empty");
    };
    out << "chosen_longer full=" << m(full.chosen_longer) << " public=" << m(pub.chosen_longer)
        << " rejected_longer full=" << m(full.rejected_longer)
        << " public=" << m(pub.rejected_longer) << " out=" << path << '\n';
    return kOk;
  }

  if (o.kind == "sweep") {
    const auto res = alpha_sweep(world, cfg.train, an.alphas, an.seeds, cfg.eval_settings(),
                                 an.threads);
    std::string seeds;
    for (std::size_t i = 0; i < an.seeds.size(); ++i) {
      seeds += (i ? "," : "") + std::to_string(an.seeds[i]);
    }
    const std::string path = o.out ? *o.out : detail::out_path(cfg, "sweep.csv");
    auto f = detail::open_out(path);
    f << "# " << detail::provenance(cfg, seeds) << '\n';
    write_sweep_csv(f, res);
    detail::finish(f, path);
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash(cfg);
    j["seeds"] = an.seeds;
    j["alphas"] = res.alphas;
    j["mean_quality"] = res.mean_quality;
    j["mean_length"] = res.mean_length;
    j["alpha_star"] = res.alpha_star;
    j["gamma"] = res.gamma;
    detail::write_json(path + ".summary.json", j);
    out << "alpha_star=" << detail::fmt(res.alpha_star) << " gamma=" << detail::fmt(res.gamma)
        << " rows=" << res.cells.size() << " out=" << path << '\n';
    return kOk;
  }

  if (o.kind == "gradcheck") {
    const std::uint64_t seed = o.seed ? *o.seed : cfg.train.seed;
    const std::size_t n = o.instances ? *o.instances : an.gradcheck_instances;
    const auto rep = run_gradcheck(n, seed);
    const double worst = rep.max_rel_error();
    if (o.out) {
      nlohmann::ordered_json j;
      j["config_hash"] = config_hash(cfg);
      j["seed"] = seed;
      j["tolerance"] = an.gradcheck_tol;
      j["max_rel_error"] = worst;
      for (const auto& r : rep.results) {
        j["methods"].push_back({{"method", r.label},
                                {"instances", r.instances},
                                {"max_scalar_rel_error", r.max_scalar_rel_error},
                                {"max_param_rel_error", r.max_param_rel_error}});
      }
      detail::write_json(*o.out, j);
    }
    for (const auto& r : rep.results) {
      out << r.label << " scalar=" << detail::fmt(r.max_scalar_rel_error)
          << " params=" << detail::fmt(r.max_param_rel_error) << '\n';
    }
    out << "max_rel_error=" << detail::fmt(worst) << " tolerance=" << detail::fmt(an.gradcheck_tol)
        << '\n';
    return worst <= an.gradcheck_tol ? kOk : kCheckFailed;
  }
  throw ConfigError("unknown --kind " + o.kind);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Length-desensitized preference optimization on a synthetic world", "lddpo"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Experiment config (JSON)");
    sub->add_option("--out", o.out, "Output path");
    sub->add_option("--seed", o.seed, "Seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a preference dataset");
  add_common(gen);

  auto* train = app.add_subcommand("train", "Run SFT or preference optimization");
  add_common(train);
  train->add_option("--stage", o.stage, "sft or po")
      ->required()
      ->check(CLI::IsMember({"sft", "po"}));
  train->add_option("--method", o.method, "dpo, ld-dpo, r-dpo, simpo, ld-chosen, ld-rejected");
  train->add_option("--alpha", o.alpha, "LD-DPO alpha in [0, 1]");
  train->add_option("--in", o.in, "Dataset (JSONL)");
  train->add_option("--sft", o.sft, "SFT checkpoint (stage po)");

  auto* analyze = app.add_subcommand("analyze", "Diagnostics");
  add_common(analyze);
  analyze->add_option("--kind", o.kind, "heatmap, probdiff, sweep or gradcheck")
      ->required()
      ->check(CLI::IsMember({"heatmap", "probdiff", "sweep", "gradcheck"}));
  analyze->add_option("--checkpoint", o.checkpoint, "Policy checkpoint");
  analyze->add_option("--in", o.in, "Dataset (JSONL)");
  analyze->add_option("--alpha", o.alpha, "Heatmap alpha");
  analyze->add_option("--instances", o.instances, "Gradcheck instances per method");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (train->parsed()) return cmd_train(o, out);
    return cmd_analyze(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const InputError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DomainError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const MissingArtifactError& e) {
    err << "missing artifact: " << e.what() << '\n';
    return kMissing;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const ParseError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"lddpo"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lddpo::cli
