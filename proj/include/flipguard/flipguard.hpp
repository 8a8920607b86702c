#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flipguard/alignment.hpp"

namespace flipguard::constraint {

using alignment::Method;
using alignment::Scorer;
using model::PolicySnapshot;
using numerics::Graph;
using numerics::NodeId;

enum class Mode { kOff, kKd, kFlipGuard };
/// How the reward gap behind the indicator is measured.
enum class Characterization { kImplicit, kExplicit };
/// Reduction of log pi(y|x) inside the focal cross-entropy.
enum class Normalization { kTokenMean, kSequenceSum };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kOff: return "none";
    case Mode::kKd: return "kd";
    case Mode::kFlipGuard: return "flipguard";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "none" || s == "off") return Mode::kOff;
  if (s == "kd") return Mode::kKd;
  if (s == "flipguard") return Mode::kFlipGuard;
  throw Error("unknown constraint '" + std::string(s) + "' (expected none|kd|flipguard)");
}

inline std::string to_string(Characterization c) { return c == Characterization::kImplicit ? "implicit" : "explicit"; }
inline std::string to_string(Normalization n) { return n == Normalization::kTokenMean ? "token_mean" : "sequence_sum"; }

inline Normalization parse_normalization(std::string_view s) {
  if (s == "token_mean") return Normalization::kTokenMean;
  if (s == "sequence_sum") return Normalization::kSequenceSum;
  throw Error("unknown normalization '" + std::string(s) + "' (expected token_mean|sequence_sum)");
}

/// DPO reads flips off the policy's own likelihood; PPO needs the reward model.
constexpr Characterization characterization_for(Method m) noexcept {
  return m == Method::kPpo ? Characterization::kExplicit : Characterization::kImplicit;
}

struct FlipGuardConfig {
  double gamma = 0.01;
  double epsilon = 0.1;
  Mode mode = Mode::kOff;
  Characterization characterization = Characterization::kImplicit;
  Normalization normalization = Normalization::kTokenMean;

  void validate(Method method) const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw Error("gamma must be a finite value >= 0");
    if (!(epsilon >= 0.0)) throw Error("epsilon must be >= 0");
    if (method != Method::kDpo && method != Method::kPpo) {
      if (mode != Mode::kOff) throw Error("constraint " + to_string(mode) + " needs method dpo or ppo");
      return;
    }
    if (characterization != characterization_for(method))
      throw Error(to_string(method) + " requires the " + to_string(characterization_for(method)) +
                  " reward characterization");
  }
};

struct FlipTrigger {
  std::size_t example_id = 0;
  double delta = 0.0;
  bool triggered = false;
  TokenSequence focal_target;
};

// Reward gaps ----------------------------------------------------------------

/// log pi_0(y|x) - log pi(y|x) with summed log-probs; positive when the
/// current policy has lost likelihood on y.
inline double implicit_reward_gap(const PolicySnapshot& pre, const PolicySnapshot& current,
                                  std::span<const Token> prompt, std::span<const Token> target) {
  return model::sequence_log_prob(pre, prompt, target).total - model::sequence_log_prob(current, prompt, target).total;
}

/// R(x, y_ref) - R(x, y_pol).
inline double explicit_reward_gap(const Scorer& reward, std::span<const Token> prompt, std::span<const Token> y_ref,
                                  std::span<const Token> y_pol) {
  double r_ref = 0.0, r_pol = 0.0;
  try {
    r_ref = reward(prompt, y_ref);
    r_pol = reward(prompt, y_pol);
  } catch (const std::exception& e) {
    throw Error(std::string("reward scorer failed: ") + e.what());
  }
  return r_ref - r_pol;
}

/// 1 iff delta > epsilon. Always a constant with respect to the parameters.
constexpr bool flip_indicator(double delta, double epsilon) noexcept { return delta > epsilon; }

inline TokenSequence select_focal_target(bool triggered, Method method, std::span<const Token> y_chosen,
                                         const TokenSequence* y_ref, std::span<const Token> y_pol) {
  switch (method) {
    case Method::kDpo: return {y_chosen.begin(), y_chosen.end()};
    case Method::kPpo:
      if (y_ref == nullptr) throw Error("ppo focal target needs the pre-aligned reference response");
      return triggered ? *y_ref : TokenSequence(y_pol.begin(), y_pol.end());
    default: throw Error("focal targets exist only for dpo and ppo");
  }
}

// Penalty --------------------------------------------------------------------

/// gamma * mean over the batch of [indicator * (-log pi(target|x))], the
/// log-prob reduced per `norm`. `log_probs[i]` holds the per-token log-prob
/// node of example i's target and may be empty where the indicator is 0.
/// Returns nothing when the penalty is identically zero.
inline std::optional<NodeId> build_focal_penalty(Graph& g, std::span<const std::optional<NodeId>> log_probs,
                                                 std::span<const FlipTrigger> triggers, double gamma,
                                                 Normalization norm, bool force_all = false) {
  if (log_probs.size() != triggers.size()) throw Error("focal penalty: targets do not match triggers");
  if (triggers.empty()) throw Error("focal penalty: empty batch");
  if (gamma == 0.0) return std::nullopt;
  std::optional<NodeId> total;
  for (std::size_t i = 0; i < triggers.size(); ++i) {
    if (!force_all && !triggers[i].triggered) continue;
    if (!log_probs[i]) throw Error("focal penalty: missing target log-probs for example " + std::to_string(i));
    const NodeId nll = g.neg(norm == Normalization::kTokenMean ? g.mean(*log_probs[i]) : g.sum(*log_probs[i]));
    total = total ? g.add(*total, nll) : nll;
  }
  if (!total) return std::nullopt;
  return g.scale(g.scale(*total, 1.0 / static_cast<double>(triggers.size())), gamma);
}

namespace detail {

inline double penalty_value(const PolicySnapshot& policy, std::span<const TokenSequence> prompts,
                            std::span<const FlipTrigger> triggers, double gamma, Normalization norm, bool force_all) {
  if (prompts.size() != triggers.size()) throw Error("focal penalty: prompts do not match triggers");
  Graph g;
  const auto p = model::bind(g, policy.params(), false);
  std::vector<std::optional<NodeId>> lps(triggers.size());
  for (std::size_t i = 0; i < triggers.size(); ++i)
    if (force_all || triggers[i].triggered)
      lps[i] = model::build_response_log_prob(g, policy.config(), p, prompts[i], triggers[i].focal_target).per_token;
  const auto node = build_focal_penalty(g, lps, triggers, gamma, norm, force_all);
  return node ? g.value(*node).item() : 0.0;
}

}  // namespace detail

inline double focal_penalty(const PolicySnapshot& policy, std::span<const TokenSequence> prompts,
                            std::span<const FlipTrigger> triggers, double gamma,
                            Normalization norm = Normalization::kTokenMean) {
  return detail::penalty_value(policy, prompts, triggers, gamma, norm, false);
}

/// The focal penalty with every indicator forced to 1.
inline double kd_penalty(const PolicySnapshot& policy, std::span<const TokenSequence> prompts,
                         std::span<const FlipTrigger> triggers, double gamma,
                         Normalization norm = Normalization::kTokenMean) {
  return detail::penalty_value(policy, prompts, triggers, gamma, norm, true);
}

inline double flipguard_total_loss(double align_loss, double penalty) {
  if (!std::isfinite(align_loss) || !std::isfinite(penalty))
    throw Error("non-finite loss component (align " + std::to_string(align_loss) + ", penalty " +
                std::to_string(penalty) + ")");
  return align_loss + penalty;
}

/// One audit line: {step, example_id, delta, triggered, focal_nll}.
inline std::string trigger_json_line(std::size_t step, const FlipTrigger& t, double focal_nll) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["example_id"] = t.example_id;
  j["delta"] = t.delta;
  j["triggered"] = t.triggered;
  j["focal_nll"] = focal_nll;
  return j.dump();
}

}  // namespace flipguard::constraint
