#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flipguard/rng.hpp"
#include "flipguard/tensor.hpp"
#include "flipguard/tokens.hpp"

namespace flipguard::data {

/// Probability of drawing each token class when sampling a candidate response.
struct ClassMix {
  double helpful = 0.0;
  double neutral = 0.0;
  double harmful = 0.0;
};

struct WorldSpec {
  double helpful_weight = 1.0;
  double neutral_weight = 0.0;
  double harmful_weight = -2.0;
  int prompt_min = 4, prompt_max = 8;
  int response_min = 3, response_max = 12;  // tokens before EOS
  double min_margin = 0.2;
  ClassMix chosen_mix{0.6, 0.3, 0.1};
  ClassMix rejected_mix{0.2, 0.4, 0.4};
  /// Chance that a response token repeats the first same-class token of the prompt.
  double echo_prob = 0.9;
  /// Chance that a response token keeps the class of the token before it;
  /// otherwise the class is redrawn from the mixture.
  double class_persistence = 0.5;

  void validate() const {
    if (!(min_margin > 0.0)) throw Error("world: min_margin must be positive");
    for (double w : {helpful_weight, neutral_weight, harmful_weight})
      if (!std::isfinite(w)) throw Error("world: class weights must be finite");
    if (prompt_min < 1 || prompt_max < prompt_min || response_min < 1 || response_max < response_min)
      throw Error("world: bad length range");
    for (const auto& m : {chosen_mix, rejected_mix})
      if (m.helpful < 0 || m.neutral < 0 || m.harmful < 0 || std::abs(m.helpful + m.neutral + m.harmful - 1.0) > 1e-12)
        throw Error("world: class mixture must be a probability vector");
    if (echo_prob < 0.0 || echo_prob > 1.0) throw Error("world: echo_prob must lie in [0, 1]");
    if (class_persistence < 0.0 || class_persistence >= 1.0)
      throw Error("world: class_persistence must lie in [0, 1)");
  }

  double weight(Token t) const noexcept {
    switch (token_class(t)) {
      case TokenClass::kHelpful: return helpful_weight;
      case TokenClass::kNeutral: return neutral_weight;
      case TokenClass::kHarmful: return harmful_weight;
      case TokenClass::kSpecial: return 0.0;
    }
    return 0.0;
  }
};

struct PreferenceExample {
  TokenSequence prompt;
  TokenSequence chosen;
  TokenSequence rejected;  // empty in the SFT split
  double gold_margin = 0.0;

  bool has_pair() const noexcept { return !rejected.empty(); }
  friend bool operator==(const PreferenceExample&, const PreferenceExample&) = default;
};

struct Dataset {
  std::vector<PreferenceExample> sft, rm, align, test;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SplitSizes {
  std::size_t sft = 1000, rm = 2000, align = 2000, test = 200;
};

inline constexpr std::size_t kMaxResamples = 1000;

inline void check_response(std::span<const Token> response) {
  if (response.empty() || response.back() != kEos) throw Error("response must end with EOS");
  for (std::size_t i = 0; i + 1 < response.size(); ++i)
    if (response[i] == kEos) throw Error("response contains EOS before its end");
}

/// Mean class weight over the tokens before EOS; 0 for an EOS-only response.
/// The programmatic judge of this world: it ignores the prompt.
inline double gold_reward(std::span<const Token> /*prompt*/, std::span<const Token> response,
                          const WorldSpec& world = {}) {
  check_response(response);
  const std::size_t n = response.size() - 1;
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += world.weight(response[i]);
  return total / static_cast<double>(n);
}

namespace detail {

inline Token draw_in_class(TokenClass cls, std::span<const Token> prompt, double echo_prob, Rng& rng) {
  const auto [lo, hi] = cls == TokenClass::kHelpful   ? std::pair{kHelpfulBegin, kHelpfulEnd}
                        : cls == TokenClass::kNeutral ? std::pair{kNeutralBegin, kNeutralEnd}
                                                      : std::pair{kHarmfulBegin, kHarmfulEnd};
  const auto echo = std::find_if(prompt.begin(), prompt.end(), [&](Token t) { return token_class(t) == cls; });
  if (echo != prompt.end() && rng.uniform() < echo_prob) return *echo;
  return static_cast<Token>(rng.uniform_range(lo, hi - 1));
}

inline TokenSequence draw_response(const WorldSpec& w, const ClassMix& mix, std::span<const Token> prompt, Rng& rng) {
  const int len = rng.uniform_range(w.response_min, w.response_max);
  TokenSequence out;
  out.reserve(static_cast<std::size_t>(len) + 1);
  TokenClass cls = TokenClass::kSpecial;
  for (int i = 0; i < len; ++i) {
    if (i == 0 || rng.uniform() >= w.class_persistence) {
      const double u = rng.uniform();
      cls = u < mix.helpful                 ? TokenClass::kHelpful
            : u < mix.helpful + mix.neutral ? TokenClass::kNeutral
                                            : TokenClass::kHarmful;
    }
    out.push_back(draw_in_class(cls, prompt, w.echo_prob, rng));
  }
  out.push_back(kEos);
  return out;
}

inline TokenSequence draw_prompt(const WorldSpec& w, Rng& rng) {
  TokenSequence p(static_cast<std::size_t>(rng.uniform_range(w.prompt_min, w.prompt_max)));
  for (auto& t : p) t = static_cast<Token>(rng.uniform_range(kHelpfulBegin, kHarmfulEnd - 1));
  return p;
}

}  // namespace detail

/// Draws one preference pair for `prompt`, resampling both candidates until the
/// gold margin reaches `world.min_margin`.
inline PreferenceExample draw_pair(const WorldSpec& world, TokenSequence prompt, Rng& rng) {
  for (std::size_t attempt = 0; attempt < kMaxResamples; ++attempt) {
    TokenSequence chosen = detail::draw_response(world, world.chosen_mix, prompt, rng);
    TokenSequence rejected = detail::draw_response(world, world.rejected_mix, prompt, rng);
    const double margin = gold_reward(prompt, chosen, world) - gold_reward(prompt, rejected, world);
    if (margin >= world.min_margin)
      return {std::move(prompt), std::move(chosen), std::move(rejected), margin};
  }
  throw Error("gold margin " + std::to_string(world.min_margin) + " unreachable in " +
              std::to_string(kMaxResamples) + " resamples for prompt " + to_string(prompt));
}

/// Deterministic per seed. Prompts are unique across all four splits.
inline Dataset generate_dataset(const WorldSpec& world, const SplitSizes& sizes, std::uint64_t seed) {
  world.validate();
  if (sizes.sft == 0 || sizes.rm == 0 || sizes.align == 0 || sizes.test == 0)
    throw Error("every split size must be positive");
  Rng rng(seed, Stream::kData);
  std::set<TokenSequence> used;
  auto fill = [&](std::vector<PreferenceExample>& split, std::size_t n, bool keep_rejected) {
    split.reserve(n);
    while (split.size() < n) {
      TokenSequence prompt = detail::draw_prompt(world, rng);
      if (!used.insert(prompt).second) continue;
      PreferenceExample ex = draw_pair(world, std::move(prompt), rng);
      if (!keep_rejected) {
        ex.rejected.clear();
        ex.gold_margin = 0.0;
      }
      split.push_back(std::move(ex));
    }
  };
  Dataset d;
  fill(d.sft, sizes.sft, false);
  fill(d.rm, sizes.rm, true);
  fill(d.align, sizes.align, true);
  fill(d.test, sizes.test, true);
  return d;
}

// Line-delimited JSON --------------------------------------------------------

inline std::string to_json_line(const PreferenceExample& ex) {
  nlohmann::ordered_json j;
  j["prompt"] = ex.prompt;
  j["chosen"] = ex.chosen;
  if (ex.has_pair()) {
    j["rejected"] = ex.rejected;
    j["gold_margin"] = ex.gold_margin;
  }
  return j.dump();
}

inline PreferenceExample parse_json_line(std::string_view line, std::size_t vocab_size = 32) {
  const auto j = nlohmann::json::parse(line);
  if (!j.is_object()) throw Error("expected a JSON object");
  auto tokens = [&](const char* key) {
    if (!j.contains(key)) throw Error(std::string("missing key '") + key + "'");
    const auto& arr = j.at(key);
    if (!arr.is_array()) throw Error(std::string("'") + key + "' must be an array of token ids");
    TokenSequence out;
    for (const auto& v : arr) {
      if (!v.is_number_integer()) throw Error(std::string("'") + key + "' must contain integers only");
      const auto id = v.get<std::int64_t>();
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
        throw Error("token id " + std::to_string(id) + " in '" + key + "' outside vocabulary of " +
                    std::to_string(vocab_size));
      out.push_back(static_cast<Token>(id));
    }
    return out;
  };
  PreferenceExample ex;
  ex.prompt = tokens("prompt");
  for (Token t : ex.prompt)
    if (t == kEos) throw Error("prompt contains EOS");
  ex.chosen = tokens("chosen");
  check_response(ex.chosen);
  if (j.contains("rejected") || j.contains("gold_margin")) {
    ex.rejected = tokens("rejected");
    check_response(ex.rejected);
    if (!j.contains("gold_margin") || !j.at("gold_margin").is_number())
      throw Error("'gold_margin' must be a number");
    ex.gold_margin = j.at("gold_margin").get<double>();
  }
  return ex;
}

inline void save_dataset(const std::filesystem::path& path, std::span<const PreferenceExample> examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : examples) out << to_json_line(ex) << '\n';
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline std::vector<PreferenceExample> load_dataset(const std::filesystem::path& path, std::size_t vocab_size = 32) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<PreferenceExample> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(parse_json_line(line, vocab_size));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

inline const std::array<std::string, 4> kSplitNames{"sft", "rm", "align", "test"};

inline void save_splits(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  save_dataset(dir / "sft.jsonl", d.sft);
  save_dataset(dir / "rm.jsonl", d.rm);
  save_dataset(dir / "align.jsonl", d.align);
  save_dataset(dir / "test.jsonl", d.test);
}

inline Dataset load_splits(const std::filesystem::path& dir) {
  return {load_dataset(dir / "sft.jsonl"), load_dataset(dir / "rm.jsonl"), load_dataset(dir / "align.jsonl"),
          load_dataset(dir / "test.jsonl")};
}

}  // namespace flipguard::data
