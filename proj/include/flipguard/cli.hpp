#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flipguard/config.hpp"
#include "flipguard/data.hpp"
#include "flipguard/eval.hpp"
#include "flipguard/training.hpp"

#ifndef FLIPGUARD_CODE_FINGERPRINT
#define FLIPGUARD_CODE_FINGERPRINT "unversioned"
#endif

namespace flipguard::cli {

namespace fs = std::filesystem;
using alignment::Method;
using config::Config;

inline constexpr const char* kCodeFingerprint = FLIPGUARD_CODE_FINGERPRINT;
inline constexpr const char* kDefaultRoot = "runs";

/// Input artifacts by role; `runs` may hold several paths.
using Inputs = std::map<std::string, std::vector<std::string>>;

struct Manifest {
  std::string run_id, command;
  Config config;
  Inputs inputs;
  std::vector<std::string> outputs;
  std::string code_fingerprint = kCodeFingerprint;
  double duration_seconds = 0.0;
};

inline nlohmann::ordered_json to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["run_id"] = m.run_id;
  j["command"] = m.command;
  j["seeds"] = {{"seed", m.config.integer("seed")}};
  j["config"] = m.config.values();
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["code_fingerprint"] = m.code_fingerprint;
  j["duration_seconds"] = m.duration_seconds;
  return j;
}

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  try {
    const auto j = nlohmann::json::parse(in);
    Manifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.command = j.at("command").get<std::string>();
    for (const auto& [k, v] : j.at("config").items()) m.config.set(k, v.get<std::string>());
    m.inputs = j.at("inputs").get<Inputs>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.code_fingerprint = j.at("code_fingerprint").get<std::string>();
    m.duration_seconds = j.at("duration_seconds").get<double>();
    return m;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error("malformed manifest '" + path.string() + "': " + e.what());
  }
}

// Fingerprints ---------------------------------------------------------------

inline std::uint64_t hash_file(const fs::path& p, std::uint64_t h) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  return fnv1a(bytes, h);
}

/// Content hash of a file, or of every file under a directory except manifests.
inline std::uint64_t hash_path(const fs::path& p, std::uint64_t h) {
  if (fs::is_regular_file(p)) return hash_file(p, h);
  if (!fs::is_directory(p)) throw Error("input '" + p.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) h = hash_file(f, fnv1a(fs::relative(f, p).generic_string(), h));
  return h;
}

inline std::string short_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf, 8);
}

/// `<command>-<seed>-<short-fingerprint>`, a function of the command, the
/// resolved config, the input contents and the code.
inline std::string run_id(const std::string& command, const Config& cfg, const Inputs& inputs) {
  std::uint64_t h = fnv1a(command + "\n" + cfg.to_text() + kCodeFingerprint);
  for (const auto& [role, paths] : inputs)
    for (const auto& p : paths) {
      if (!fs::exists(p)) throw Error("input --" + role + " '" + p + "' does not exist");
      h = hash_path(p, fnv1a(role, h));
    }
  return command + "-" + cfg.text("seed") + "-" + short_hex(h);
}

inline fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FLIPGUARD_OUT"); env && *env) return env;
  return kDefaultRoot;
}

// Artifact lookup --------------------------------------------------------------

inline const std::string& single(const Inputs& in, const std::string& role) {
  const auto it = in.find(role);
  if (it == in.end() || it->second.empty()) throw Error("missing input --" + role);
  return it->second.front();
}

inline bool has(const Inputs& in, const std::string& role) {
  const auto it = in.find(role);
  return it != in.end() && !it->second.empty();
}

/// A checkpoint path given directly or as the run directory holding it.
inline fs::path artifact(const fs::path& p, const std::string& file, const std::string& what) {
  if (fs::is_directory(p)) {
    if (fs::is_regular_file(p / file)) return p / file;
    throw Error(what + " directory '" + p.string() + "' has no " + file);
  }
  if (fs::is_regular_file(p)) return p;
  throw Error(what + " '" + p.string() + "' does not exist");
}

inline data::Dataset load_data(const Inputs& in) { return data::load_splits(single(in, "data")); }

inline std::vector<TokenSequence> prompts_of(std::span<const data::PreferenceExample> split) {
  std::vector<TokenSequence> out;
  for (const auto& e : split) out.push_back(e.prompt);
  return out;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw Error("cannot write '" + p.string() + "'");
}

// Stages -------------------------------------------------------------------------

struct Stage {
  Config config;
  Inputs inputs;
  fs::path dir;
  std::vector<std::string> outputs;
};

inline void run_gen_data(Stage& s) {
  const data::SplitSizes sizes{s.config.integer("n_sft"), s.config.integer("n_rm"), s.config.integer("n_align"),
                               s.config.integer("n_test")};
  data::save_splits(s.dir, data::generate_dataset({}, sizes, s.config.integer("seed")));
  for (const auto& name : data::kSplitNames) s.outputs.push_back(std::string(name) + ".jsonl");
}

inline training::TrainOptions train_options(const Stage& s) {
  return {s.dir, s.config.flag("dump_triggers"), {}};
}

inline void record_training(Stage& s, const training::TrainResult& r) {
  s.outputs.push_back(r.checkpoint.filename().string());
  s.outputs.push_back(r.metrics_log.filename().string());
  if (!r.trigger_log.empty()) s.outputs.push_back(r.trigger_log.filename().string());
}

inline void run_sft(Stage& s) {
  const auto d = load_data(s.inputs);
  const auto align = config::align_config(s.config);
  training::TrainInputs in{model::init_params({}, align.seed), std::nullopt, d.sft, std::nullopt, std::nullopt};
  record_training(s, training::run_training(align, {}, in, train_options(s)));
}

inline model::PolicySnapshot load_sft(const Inputs& in) {
  if (!has(in, "sft")) throw Error("an SFT checkpoint is required (--sft); run the sft stage first");
  return model::load_checkpoint(artifact(single(in, "sft"), "policy.fgck", "SFT checkpoint"));
}

inline std::optional<model::RewardModel> load_rm(const Inputs& in) {
  if (!has(in, "reward-model")) return std::nullopt;
  return model::load_reward_model(artifact(single(in, "reward-model"), "reward_model.fgck", "reward model"));
}

inline void run_train_rm(Stage& s) {
  const auto d = load_data(s.inputs);
  training::TrainInputs in{load_sft(s.inputs), std::nullopt, d.rm, std::nullopt, std::nullopt};
  record_training(s, training::run_training(config::align_config(s.config), {}, in, train_options(s)));
}

inline void run_align(Stage& s) {
  const auto align = config::align_config(s.config);
  if (align.method != Method::kDpo && align.method != Method::kPpo)
    throw Error("align needs method dpo or ppo, got " + alignment::to_string(align.method));
  const auto sft = load_sft(s.inputs);
  const auto rm = load_rm(s.inputs);
  if (align.method == Method::kPpo && align.reward_source == alignment::RewardSource::kLearned && !rm)
    throw Error("reward_source=learned needs --reward-model");
  const auto d = load_data(s.inputs);
  training::TrainInputs in{sft, sft, d.align, rm, std::nullopt};
  record_training(s, training::run_training(align, config::guard_config(s.config), in, train_options(s)));
}

/// Evaluates `post` against the SFT policy on the test split and writes
/// records.jsonl and stats.json into the stage directory.
inline void evaluate_into(Stage& s, const model::PolicySnapshot& post, const Config& aligned_config) {
  const auto d = load_data(s.inputs);
  const auto pre = load_sft(s.inputs);
  alignment::Scorer judge = [](std::span<const Token> x, std::span<const Token> y) { return data::gold_reward(x, y); };
  if (s.config.text("judge") == "learned") {
    const auto rm = load_rm(s.inputs);
    if (!rm) throw Error("judge=learned needs --reward-model");
    judge = [m = *rm](std::span<const Token> x, std::span<const Token> y) { return m.score(x, y); };
  }
  const auto prompts = prompts_of(d.test);
  const auto records = eval::evaluate_policy_pair(pre, post, prompts, judge, s.config.real("dead_zone"),
                                                  s.config.integer("max_response_len"));
  eval::save_records(s.dir / "records.jsonl", records);
  const auto st = eval::flip_stats(records);
  double gold = 0.0;
  for (const auto& r : records) gold += data::gold_reward(r.prompt, r.post_response);
  nlohmann::ordered_json j;
  j["method"] = aligned_config.text("method");
  j["constraint"] = aligned_config.text("constraint");
  j["gamma"] = aligned_config.real("gamma");
  j["epsilon"] = aligned_config.real("epsilon");
  j["seed"] = aligned_config.integer("seed");
  j["n"] = st.n;
  j["pre_better"] = st.pre_better;
  j["post_better"] = st.post_better;
  j["ties"] = st.ties;
  j["nfr"] = st.nfr;
  j["win_rate"] = st.win_rate;
  j["tie_rate"] = st.tie_rate;
  j["mean_token_kl"] = eval::mean_token_kl(post, pre, eval::post_completions(records));
  j["mean_gold_reward"] = gold / static_cast<double>(records.size());
  write_text(s.dir / "stats.json", j.dump(2) + "\n");
  s.outputs.push_back("records.jsonl");
  s.outputs.push_back("stats.json");
}

inline void run_eval(Stage& s) {
  const fs::path policy = single(s.inputs, "policy");
  const auto post = model::load_checkpoint(artifact(policy, "policy.fgck", "aligned policy"));
  // The aligned run's own settings label the summary row when its manifest is at hand.
  Config labels = s.config;
  if (fs::is_regular_file(fs::path(policy) / "manifest.json"))
    labels = load_manifest(fs::path(policy) / "manifest.json").config;
  evaluate_into(s, post, labels);
}

/// One grid point: align, then evaluate, in a single run directory.
inline void run_sweep_point(Stage& s) {
  run_align(s);
  evaluate_into(s, model::load_checkpoint(s.dir / "policy.fgck"), s.config);
}

inline void run_report(Stage& s) {
  if (!has(s.inputs, "runs")) throw Error("report needs at least one evaluated run (--runs)");
  std::vector<eval::ReportInput> runs;
  for (const fs::path dir : s.inputs.at("runs")) {
    const auto manifest = load_manifest(dir / "manifest.json");
    std::ifstream in(dir / "stats.json", std::ios::binary);
    if (!in) throw Error("run '" + dir.string() + "' has no stats.json; evaluate it first");
    const auto stats = nlohmann::json::parse(in);
    eval::ReportInput r;
    r.records = eval::load_records(dir / "records.jsonl");
    const auto st = eval::flip_stats(r.records);
    r.row = {manifest.run_id,
             stats.at("method").get<std::string>(),
             stats.at("constraint").get<std::string>(),
             stats.at("gamma").get<double>(),
             stats.at("epsilon").get<double>(),
             stats.at("seed").get<std::uint64_t>(),
             st.nfr,
             st.win_rate,
             st.tie_rate,
             stats.at("mean_token_kl").get<double>(),
             stats.at("mean_gold_reward").get<double>()};
    if (fs::is_regular_file(dir / "metrics.jsonl")) {
      r.metrics_log = dir / "metrics.jsonl";
    } else if (manifest.inputs.contains("policy")) {
      const fs::path aligned = manifest.inputs.at("policy").front();
      if (fs::is_regular_file(aligned / "metrics.jsonl")) r.metrics_log = aligned / "metrics.jsonl";
    }
    runs.push_back(std::move(r));
  }
  eval::emit_report(runs, s.dir);
  s.outputs = {"summary.csv", "curves.csv", "scatter"};
}

inline const std::map<std::string, void (*)(Stage&)>& stages() {
  static const std::map<std::string, void (*)(Stage&)> table{
      {"gen-data", run_gen_data}, {"sft", run_sft},   {"train-rm", run_train_rm}, {"align", run_align},
      {"eval", run_eval},         {"sweep", run_sweep_point}, {"report", run_report},
  };
  return table;
}

/// Runs one stage under `root`, writes manifest.json and config.txt beside its
/// outputs and returns the run directory.
inline fs::path run_stage(const std::string& command, Config cfg, Inputs inputs, const fs::path& root) {
  const auto stage = stages().find(command);
  if (stage == stages().end()) throw Error("unknown command '" + command + "'");
  if (command == "sft") cfg.set("method", "sft");
  if (command == "train-rm") cfg.set("method", "rm");
  for (auto& [role, paths] : inputs)
    for (auto& p : paths) p = fs::absolute(p).lexically_normal().string();
  const auto start = std::chrono::steady_clock::now();
  Manifest m;
  m.command = command;
  m.run_id = run_id(command, cfg, inputs);
  m.config = cfg;
  m.inputs = inputs;
  Stage s{cfg, inputs, root / m.run_id, {}};
  const bool fresh = fs::create_directories(s.dir);
  try {
    stage->second(s);
  } catch (...) {
    std::error_code ec;
    if (fresh) fs::remove_all(s.dir, ec);
    throw;
  }
  m.outputs = s.outputs;
  m.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(s.dir / "config.txt", cfg.to_text());
  write_text(s.dir / "manifest.json", to_json(m).dump(2) + "\n");
  return s.dir;
}

/// Re-executes the run recorded in a manifest under a new output root.
inline fs::path rerun(const fs::path& manifest_path, const fs::path& root) {
  const auto m = load_manifest(manifest_path);
  if (m.code_fingerprint != kCodeFingerprint)
    std::cerr << "warning: manifest was written by code " << m.code_fingerprint << ", this is " << kCodeFingerprint
              << "\n";
  return run_stage(m.command, m.config, m.inputs, root);
}

// Command line -------------------------------------------------------------------

/// "0..4" or "0,2,5".
inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const auto lo = std::stoull(text.substr(0, dots)), hi = std::stoull(text.substr(dots + 2));
    if (hi < lo) throw Error("empty seed range '" + text + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoull(config::canonical(config::spec("seed"), item)));
  if (out.empty()) throw Error("no seeds in '" + text + "'");
  return out;
}

inline std::vector<std::string> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(config::canonical(config::spec(key), item));
  if (out.empty()) throw Error("empty list for --" + key);
  return out;
}

inline std::string json_error(const std::string& command, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = message;
  j["command"] = command;
  return j.dump();
}

/// Entry point of the flipguard executable. 0 on success, 1 on a failed run,
/// 2 on a usage error.
inline int execute(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"flipguard: negative-flip-aware alignment lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  struct Flags {
    std::string config_path, out;
    std::vector<std::string> sets;
    std::map<std::string, std::string> keys;
    Inputs inputs;
    std::string seeds, gammas, epsilons, manifest;
  };
  std::map<std::string, Flags> flags;

  auto add = [&](const std::string& name, const std::string& about, std::vector<std::string> roles,
                 std::vector<std::string> required, bool grid) {
    CLI::App* sub = app.add_subcommand(name, about);
    Flags& f = flags[name];
    sub->add_option("--config", f.config_path, "key = value file applied over the defaults");
    sub->add_option("--set", f.sets, "key=value override, repeatable");
    sub->add_option("--out", f.out, "output root (default $FLIPGUARD_OUT or ./runs)");
    for (const auto& k : config::keys()) {
      if (grid && (k.name == "seed" || k.name == "gamma" || k.name == "epsilon")) continue;
      std::string names = "--" + k.name;
      if (k.name.find('_') != std::string::npos) {
        std::string dashed = k.name;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        names += ",--" + dashed;
      }
      sub->add_option(names, f.keys[k.name], k.help);
    }
    for (const auto& role : roles) {
      auto* opt = sub->add_option("--" + role, f.inputs[role], "input: " + role);
      if (std::find(required.begin(), required.end(), role) != required.end()) opt->required();
    }
    if (grid) {
      sub->add_option("--seeds", f.seeds, "seed range a..b or list")->required();
      sub->add_option("--gamma", f.gammas, "comma-separated gamma grid");
      sub->add_option("--epsilon", f.epsilons, "comma-separated epsilon grid");
    }
    return sub;
  };
  add("gen-data", "generate the synthetic preference splits", {}, {}, false);
  add("sft", "supervised fine-tuning of the pre-aligned policy", {"data"}, {"data"}, false);
  add("train-rm", "train the Bradley-Terry reward model", {"data", "sft"}, {"data", "sft"}, false);
  add("align", "DPO or PPO alignment, optionally constrained", {"data", "sft", "reward-model"}, {"data", "sft"}, false);
  add("eval", "judge an aligned policy against its SFT policy", {"data", "sft", "policy", "reward-model"},
      {"data", "sft", "policy"}, false);
  add("sweep", "align and evaluate over a gamma/epsilon/seed grid, then report", {"data", "sft", "reward-model"},
      {"data", "sft"}, true);
  add("report", "summary, scatter and curve files from evaluated runs", {"runs"}, {"runs"}, false);
  CLI::App* re = app.add_subcommand("rerun", "re-execute a run from its manifest");
  re->add_option("--manifest", flags["rerun"].manifest, "manifest.json of the run")->required();
  re->add_option("--out", flags["rerun"].out, "output root (default $FLIPGUARD_OUT or ./runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    std::string message = e.what();
    // Mistyped config flags get the nearest key as a hint.
    for (int i = 1; i < argc; ++i) {
      std::string name = argv[i];
      if (!name.starts_with("--") || message.find(name) == std::string::npos) continue;
      name = name.substr(2, name.find('=') == std::string::npos ? std::string::npos : name.find('=') - 2);
      std::replace(name.begin(), name.end(), '-', '_');
      try {
        config::spec(name);
      } catch (const Error& hint) {
        message += "; " + std::string(hint.what());
      }
    }
    err << (subs.empty() ? app.help() : subs.front()->help());
    err << json_error(subs.empty() ? "" : subs.front()->get_name(), message) << "\n";
    return 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  const Flags& f = flags.at(command);
  try {
    const fs::path root = output_root(f.out);
    if (command == "rerun") {
      out << rerun(f.manifest, root).string() << "\n";
      return 0;
    }
    Config cfg = config::load_config(f.config_path, f.sets);
    for (const auto& [key, value] : f.keys)
      if (sub->count("--" + key) > 0) cfg.set(key, value);
    Inputs inputs;
    for (const auto& [role, paths] : f.inputs)
      if (!paths.empty()) inputs[role] = paths;

    if (command != "sweep") {
      out << run_stage(command, cfg, inputs, root).string() << "\n";
      return 0;
    }
    const auto gammas = f.gammas.empty() ? std::vector<std::string>{cfg.text("gamma")} : parse_list("gamma", f.gammas);
    const auto epsilons =
        f.epsilons.empty() ? std::vector<std::string>{cfg.text("epsilon")} : parse_list("epsilon", f.epsilons);
    Inputs report;
    for (const auto seed : parse_seeds(f.seeds))
      for (const auto& gamma : gammas)
        for (const auto& epsilon : epsilons) {
          Config point = cfg;
          point.set("seed", std::to_string(seed));
          point.set("gamma", gamma);
          point.set("epsilon", epsilon);
          const auto dir = run_stage("sweep", point, inputs, root);
          report["runs"].push_back(dir.string());
          out << dir.string() << "\n";
        }
    out << run_stage("report", cfg, report, root).string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << json_error(command, e.what()) << "\n";
    return 1;
  }
}

}  // namespace flipguard::cli
