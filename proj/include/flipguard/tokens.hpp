#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flipguard {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;

/// Semantic classes of the 32-token vocabulary.
///   0 BOS, 1 EOS, 2-15 helpful, 16-23 neutral, 24-31 harmful.
enum class TokenClass { kSpecial, kHelpful, kNeutral, kHarmful };

inline constexpr Token kHelpfulBegin = 2, kHelpfulEnd = 16;
inline constexpr Token kNeutralBegin = 16, kNeutralEnd = 24;
inline constexpr Token kHarmfulBegin = 24, kHarmfulEnd = 32;

constexpr TokenClass token_class(Token t) noexcept {
  if (t >= kHelpfulBegin && t < kHelpfulEnd) return TokenClass::kHelpful;
  if (t >= kNeutralBegin && t < kNeutralEnd) return TokenClass::kNeutral;
  if (t >= kHarmfulBegin && t < kHarmfulEnd) return TokenClass::kHarmful;
  return TokenClass::kSpecial;
}

inline std::string to_string(const TokenSequence& seq) {
  std::string out = "[";
  for (std::size_t i = 0; i < seq.size(); ++i) out += (i ? "," : "") + std::to_string(seq[i]);
  return out + "]";
}

}  // namespace flipguard
