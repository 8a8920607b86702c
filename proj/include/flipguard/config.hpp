#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flipguard/alignment.hpp"
#include "flipguard/eval.hpp"
#include "flipguard/flipguard.hpp"

namespace flipguard::config {

enum class Type { kInteger, kReal, kBool, kChoice };

struct KeySpec {
  std::string name;
  Type type;
  std::string fallback;
  std::vector<std::string> choices = {};
  std::string help = {};
};

inline const std::vector<KeySpec>& keys() {
  static const std::vector<KeySpec> table{
      {"seed", Type::kInteger, "0", {}, "master seed for data, init, batches and sampling"},
      {"method", Type::kChoice, "dpo", {"sft", "rm", "dpo", "ppo"}, "alignment method"},
      {"beta", Type::kReal, "0.1", {}, "DPO temperature"},
      {"kl_coeff", Type::kReal, "0.1", {}, "PPO per-token KL penalty"},
      {"learning_rate", Type::kReal, "0.001", {}, "Adam step size"},
      {"batch_size", Type::kInteger, "16", {}, "examples (PPO: trajectories) per step"},
      {"steps", Type::kInteger, "2000", {}, "optimizer steps"},
      {"rollouts_per_prompt", Type::kInteger, "4", {}, "PPO samples per prompt"},
      {"clip_ratio", Type::kReal, "0.2", {}, "PPO clip range"},
      {"reward_source", Type::kChoice, "gold", {"gold", "learned"}, "PPO training reward"},
      {"max_response_len", Type::kInteger, "13", {}, "sampling and decoding cap, EOS included"},
      {"temperature", Type::kReal, "1", {}, "PPO sampling temperature"},
      {"constraint", Type::kChoice, "none", {"none", "kd", "flipguard"}, "regression constraint"},
      {"gamma", Type::kReal, "0.01", {}, "constraint weight"},
      {"epsilon", Type::kReal, "0.1", {}, "flip threshold"},
      {"normalization", Type::kChoice, "token_mean", {"token_mean", "sequence_sum"}, "focal log-prob reduction"},
      {"dump_triggers", Type::kBool, "false", {}, "write triggers.jsonl during alignment"},
      {"dead_zone", Type::kReal, "0.1", {}, "judge tie band"},
      {"judge", Type::kChoice, "gold", {"gold", "learned"}, "evaluation scorer"},
      {"n_sft", Type::kInteger, "1000", {}, "SFT split size"},
      {"n_rm", Type::kInteger, "2000", {}, "reward-model split size"},
      {"n_align", Type::kInteger, "2000", {}, "alignment split size"},
      {"n_test", Type::kInteger, "200", {}, "test split size"},
  };
  return table;
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

inline const KeySpec& spec(std::string_view name) {
  const KeySpec* best = nullptr;
  std::size_t best_d = 0;
  for (const auto& k : keys()) {
    if (k.name == name) return k;
    const std::size_t d = edit_distance(name, k.name);
    if (!best || d < best_d) best = &k, best_d = d;
  }
  throw Error("unknown config key '" + std::string(name) + "' (did you mean '" + best->name + "'?)");
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

/// Parses `text` as the key's type and returns its canonical spelling.
inline std::string canonical(const KeySpec& k, std::string_view text) {
  const std::string v = trim(text);
  auto fail = [&](const char* expected) -> std::string {
    throw Error("config key '" + k.name + "' expects " + expected + ", got '" + v + "'");
  };
  switch (k.type) {
    case Type::kInteger: {
      std::uint64_t x = 0;
      const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) return fail("a non-negative integer");
      return std::to_string(x);
    }
    case Type::kReal: {
      double x = 0.0;
      const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(x))
        return fail("a finite real number");
      return eval::format_double(x);
    }
    case Type::kBool:
      if (v == "true" || v == "1") return "true";
      if (v == "false" || v == "0") return "false";
      return fail("true or false");
    case Type::kChoice: {
      if (std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end()) return v;
      std::string options;
      for (const auto& c : k.choices) options += (options.empty() ? "" : "|") + c;
      return fail(("one of " + options).c_str());
    }
  }
  return v;
}

/// A total assignment of every known key, in canonical text form.
class Config {
 public:
  Config() {
    for (const auto& k : keys()) values_[k.name] = k.fallback;
  }

  void set(std::string_view key, std::string_view value) {
    const KeySpec& k = spec(key);
    values_[k.name] = canonical(k, value);
  }

  /// Applies one "key=value" assignment.
  void assign(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw Error("expected key=value, got '" + std::string(assignment) + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  const std::string& text(std::string_view key) const { return values_.at(spec(key).name); }
  double real(std::string_view key) const { return std::stod(text(key)); }
  std::uint64_t integer(std::string_view key) const { return std::stoull(text(key)); }
  bool flag(std::string_view key) const { return text(key) == "true"; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// key = value lines in key order; reads back through load_config.
  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  friend bool operator==(const Config&, const Config&) = default;

 private:
  std::map<std::string, std::string> values_;
};

inline void apply_text(Config& c, std::string_view text, const std::string& origin) {
  std::size_t number = 0, pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      c.assign(line);
    } catch (const Error& e) {
      throw Error(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

/// defaults, then the file (if any), then overrides; later wins.
inline Config load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {}) {
  Config c;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open config '" + path.string() + "'");
    const std::string text{std::istreambuf_iterator<char>(in), {}};
    apply_text(c, text, path.string());
  }
  for (const auto& o : overrides) c.assign(o);
  return c;
}

inline alignment::AlignConfig align_config(const Config& c) {
  alignment::AlignConfig a;
  a.method = alignment::parse_method(c.text("method"));
  a.beta = c.real("beta");
  a.kl_coeff = c.real("kl_coeff");
  a.learning_rate = c.real("learning_rate");
  a.batch_size = c.integer("batch_size");
  a.steps = c.integer("steps");
  a.rollouts_per_prompt = c.integer("rollouts_per_prompt");
  a.clip_ratio = c.real("clip_ratio");
  a.seed = c.integer("seed");
  a.reward_source = alignment::parse_reward_source(c.text("reward_source"));
  a.max_response_len = c.integer("max_response_len");
  a.temperature = c.real("temperature");
  return a;
}

inline constraint::FlipGuardConfig guard_config(const Config& c) {
  constraint::FlipGuardConfig f;
  f.mode = constraint::parse_mode(c.text("constraint"));
  f.gamma = c.real("gamma");
  f.epsilon = c.real("epsilon");
  f.normalization = constraint::parse_normalization(c.text("normalization"));
  f.characterization = constraint::characterization_for(alignment::parse_method(c.text("method")));
  return f;
}

}  // namespace flipguard::config
