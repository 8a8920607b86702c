#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "flipguard/flipguard.hpp"
#include "test_support.hpp"

namespace {

using namespace flipguard;
using namespace flipguard::constraint;
using flipguard::testing::random_policy;
using flipguard::testing::same_bits;
using model::ModelConfig;
using numerics::Graph;
using numerics::Shape;
using numerics::Tensor;

const ModelConfig kConfig{};

double gold(std::span<const Token> x, std::span<const Token> y) { return data::gold_reward(x, y); }

std::vector<data::PreferenceExample> batch(std::uint64_t seed, std::size_t n) {
  return data::generate_dataset({}, {1, n, 1, 1}, seed).rm;
}

// Adds the same vector to every lm_head column: every logit at a position
// moves by the same amount.
PolicySnapshot shift_logits(const PolicySnapshot& p, std::uint64_t seed) {
  auto params = p.params();
  Tensor& head = params.at("lm_head");
  Rng rng(seed);
  for (std::size_t r = 0; r < head.rows(); ++r) {
    const double u = 3.0 * rng.normal();
    for (std::size_t c = 0; c < head.cols(); ++c) head.at(r, c) += u;
  }
  return PolicySnapshot(p.config(), std::move(params));
}

std::vector<FlipTrigger> dpo_triggers(const PolicySnapshot& pre, const PolicySnapshot& cur,
                                      const std::vector<data::PreferenceExample>& b, double eps) {
  std::vector<FlipTrigger> out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = implicit_reward_gap(pre, cur, b[i].prompt, b[i].chosen);
    out.push_back({i, d, flip_indicator(d, eps), select_focal_target(true, Method::kDpo, b[i].chosen, nullptr, {})});
  }
  return out;
}

std::vector<TokenSequence> prompts_of(const std::vector<data::PreferenceExample>& b) {
  std::vector<TokenSequence> out;
  for (const auto& e : b) out.push_back(e.prompt);
  return out;
}

// Scalar oracle: gamma * (1/B) * sum over triggered of -mean log-prob.
double penalty_oracle(const PolicySnapshot& p, const std::vector<TokenSequence>& prompts,
                      const std::vector<FlipTrigger>& t, double gamma, bool all) {
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!all && !t[i].triggered) continue;
    const auto lp = model::sequence_log_prob(p, prompts[i], t[i].focal_target);
    total += -lp.total / static_cast<double>(lp.per_token.size());
  }
  return gamma * total / static_cast<double>(t.size());
}

// Reward gaps ----------------------------------------------------------------

TEST(ImplicitGap, ZeroForIdenticalPolicies) {
  const auto p = random_policy(kConfig, 1);
  for (const auto& e : batch(1, 5)) EXPECT_EQ(implicit_reward_gap(p, p, e.prompt, e.chosen), 0.0);
}

TEST(ImplicitGap, DifferenceOfSequenceLogProbs) {
  const auto pre = random_policy(kConfig, 2), cur = random_policy(kConfig, 3);
  for (const auto& e : batch(2, 5)) {
    const double a = model::sequence_log_prob(pre, e.prompt, e.chosen).total;
    const double b = model::sequence_log_prob(cur, e.prompt, e.chosen).total;
    EXPECT_NEAR(implicit_reward_gap(pre, cur, e.prompt, e.chosen), a - b, 1e-12);
  }
}

TEST(ImplicitGap, InvariantToPerPositionLogitShift) {
  const auto pre = random_policy(kConfig, 4), cur = random_policy(kConfig, 5);
  const auto pre_s = shift_logits(pre, 6), cur_s = shift_logits(cur, 7);
  for (const auto& e : batch(3, 5)) {
    const double base = implicit_reward_gap(pre, cur, e.prompt, e.chosen);
    EXPECT_NEAR(implicit_reward_gap(pre_s, cur_s, e.prompt, e.chosen), base, 1e-10);
    // The shift really changed the logits.
    TokenSequence ctx{kBos};
    ctx.insert(ctx.end(), e.prompt.begin(), e.prompt.end());
    EXPECT_NE(model::next_token_logits(pre, ctx), model::next_token_logits(pre_s, ctx));
  }
}

TEST(ImplicitGap, OverflowIsAnError) {
  const auto p = random_policy(kConfig, 8);
  const TokenSequence prompt(20, 2), response(10, 3);
  EXPECT_THROW(implicit_reward_gap(p, p, prompt, response), Error);
}

TEST(ExplicitGap, Examples) {
  const TokenSequence x{2, 17, 25, 9};
  EXPECT_EQ(explicit_reward_gap(gold, x, TokenSequence{5, 16, kEos}, TokenSequence{5, 16, kEos}), 0.0);
  EXPECT_DOUBLE_EQ(explicit_reward_gap(gold, x, TokenSequence{2, 2, kEos}, TokenSequence{24, kEos}), 3.0);
  const TokenSequence a{3, 26, kEos}, b{16, 17, 4, kEos};
  EXPECT_EQ(explicit_reward_gap(gold, x, a, b), data::gold_reward(x, a) - data::gold_reward(x, b));
}

TEST(ExplicitGap, ScorerFailureIsAnError) {
  const Scorer broken = [](std::span<const Token>, std::span<const Token>) -> double { throw Error("down"); };
  EXPECT_THROW(explicit_reward_gap(broken, TokenSequence{2, 3, 4, 5}, TokenSequence{2, kEos}, TokenSequence{3, kEos}),
               Error);
}

// Indicator and targets ------------------------------------------------------

TEST(FlipIndicator, StrictThreshold) {
  EXPECT_TRUE(flip_indicator(0.15, 0.1));
  EXPECT_FALSE(flip_indicator(0.1, 0.1));
  EXPECT_FALSE(flip_indicator(0.05, 0.1));
  EXPECT_FALSE(flip_indicator(0.0, 0.0));
  EXPECT_TRUE(flip_indicator(1e-300, 0.0));
}

TEST(FocalTarget, Selection) {
  const TokenSequence chosen{2, 3, kEos}, ref{4, kEos}, pol{24, kEos};
  EXPECT_EQ(select_focal_target(true, Method::kDpo, chosen, nullptr, pol), chosen);
  EXPECT_EQ(select_focal_target(false, Method::kDpo, chosen, &ref, pol), chosen);
  EXPECT_EQ(select_focal_target(true, Method::kPpo, chosen, &ref, pol), ref);
  EXPECT_EQ(select_focal_target(false, Method::kPpo, chosen, &ref, pol), pol);
  EXPECT_THROW(select_focal_target(true, Method::kPpo, chosen, nullptr, pol), Error);
  EXPECT_THROW(select_focal_target(true, Method::kSft, chosen, &ref, pol), Error);
}

TEST(FlipGuardConfig, Validation) {
  FlipGuardConfig c;
  c.mode = Mode::kFlipGuard;
  EXPECT_NO_THROW(c.validate(Method::kDpo));
  EXPECT_THROW(c.validate(Method::kPpo), Error);
  c.characterization = Characterization::kExplicit;
  EXPECT_NO_THROW(c.validate(Method::kPpo));
  EXPECT_THROW(c.validate(Method::kDpo), Error);
  EXPECT_THROW(c.validate(Method::kSft), Error);
  c = {};
  c.gamma = -0.01;
  EXPECT_THROW(c.validate(Method::kDpo), Error);
  c = {};
  c.epsilon = -1.0;
  EXPECT_THROW(c.validate(Method::kDpo), Error);
  c = {};
  EXPECT_NO_THROW(c.validate(Method::kSft));
  EXPECT_EQ(parse_mode("flipguard"), Mode::kFlipGuard);
  EXPECT_EQ(parse_mode("kd"), Mode::kKd);
  EXPECT_EQ(parse_mode("none"), Mode::kOff);
  EXPECT_THROW(parse_mode("focal"), Error);
}

// Penalty --------------------------------------------------------------------

double constant_penalty(std::vector<std::vector<double>> lps, std::vector<bool> fired, double gamma,
                        Normalization norm) {
  Graph g;
  std::vector<std::optional<NodeId>> nodes;
  std::vector<FlipTrigger> t;
  for (std::size_t i = 0; i < lps.size(); ++i) {
    const auto n = lps[i].size();
    nodes.push_back(g.constant(Tensor(Shape{n}, lps[i])));
    t.push_back({i, 0.0, fired[i], {}});
  }
  const auto node = build_focal_penalty(g, nodes, t, gamma, norm);
  return node ? g.value(*node).item() : 0.0;
}

TEST(FocalPenalty, OneTriggeredOfFour) {
  const std::vector<std::vector<double>> lps{{-1.0}, {-2.0, -3.0}, {-0.5, -0.5}, {-4.0}};
  const std::vector<bool> fired{false, true, false, false};
  EXPECT_NEAR(constant_penalty(lps, fired, 0.01, Normalization::kTokenMean), 0.01 * (2.5 / 4), 1e-15);
  EXPECT_NEAR(constant_penalty(lps, fired, 0.01, Normalization::kTokenMean), 0.00625, 1e-15);
  EXPECT_NEAR(constant_penalty(lps, fired, 0.01, Normalization::kSequenceSum), 0.01 * (5.0 / 4), 1e-15);
  EXPECT_EQ(constant_penalty(lps, fired, 0.0, Normalization::kTokenMean), 0.0);
  EXPECT_EQ(constant_penalty(lps, {false, false, false, false}, 0.01, Normalization::kTokenMean), 0.0);
}

TEST(FocalPenalty, MatchesScalarOracleOnPolicy) {
  const auto pre = random_policy(kConfig, 10), cur = random_policy(kConfig, 11);
  const auto b = batch(4, 8);
  const auto t = dpo_triggers(pre, cur, b, 0.0);
  const auto prompts = prompts_of(b);
  EXPECT_NEAR(focal_penalty(cur, prompts, t, 0.01), penalty_oracle(cur, prompts, t, 0.01, false), 1e-14);
  EXPECT_NEAR(kd_penalty(cur, prompts, t, 0.01), penalty_oracle(cur, prompts, t, 0.01, true), 1e-14);
}

TEST(FocalPenalty, GammaZeroAndNoTriggersAreZero) {
  const auto pre = random_policy(kConfig, 12), cur = random_policy(kConfig, 13);
  const auto b = batch(5, 6);
  const auto prompts = prompts_of(b);
  EXPECT_EQ(focal_penalty(cur, prompts, dpo_triggers(pre, cur, b, 0.0), 0.0), 0.0);
  EXPECT_EQ(kd_penalty(cur, prompts, dpo_triggers(pre, cur, b, 0.0), 0.0), 0.0);
  EXPECT_EQ(focal_penalty(cur, prompts, dpo_triggers(pre, cur, b, 1e9), 0.01), 0.0);
}

TEST(FocalPenalty, GammaLinearIsExact) {
  const auto pre = random_policy(kConfig, 14), cur = random_policy(kConfig, 15);
  const auto b = batch(6, 6);
  const auto prompts = prompts_of(b);
  const auto t = dpo_triggers(pre, cur, b, 0.0);
  for (double gamma : {0.005, 0.01, 0.02, 0.05, 0.3}) {
    const double one = focal_penalty(cur, prompts, t, gamma);
    ASSERT_GT(one, 0.0);
    EXPECT_TRUE(same_bits(focal_penalty(cur, prompts, t, 2 * gamma), 2 * one)) << gamma;
  }
}

TEST(KdPenalty, DominatesFocalAndEqualsItWhenAllTrigger) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto pre = random_policy(kConfig, 100 + s), cur = random_policy(kConfig, 200 + s);
    const auto b = batch(10 + s, 6);
    const auto prompts = prompts_of(b);
    auto t = dpo_triggers(pre, cur, b, 0.1);
    EXPECT_GE(kd_penalty(cur, prompts, t, 0.01), focal_penalty(cur, prompts, t, 0.01));
    for (auto& x : t) x.triggered = true;
    EXPECT_EQ(kd_penalty(cur, prompts, t, 0.01), focal_penalty(cur, prompts, t, 0.01));
  }
}

std::map<std::string, Tensor, std::less<>> penalty_gradients(const PolicySnapshot& p,
                                                             const std::vector<TokenSequence>& prompts,
                                                             const std::vector<FlipTrigger>& t, bool with_penalty,
                                                             bool with_align) {
  Graph g;
  const auto n = model::bind(g, p.params(), true);
  std::vector<std::optional<NodeId>> lps(t.size());
  NodeId total = g.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto lp = model::build_response_log_prob(g, p.config(), n, prompts[i], t[i].focal_target);
    lps[i] = lp.per_token;
    if (with_align) total = g.add(total, g.scale(lp.total, 0.1));
  }
  if (with_penalty)
    if (const auto pen = build_focal_penalty(g, lps, t, 0.01, Normalization::kTokenMean)) total = g.add(total, *pen);
  return g.gradients(total);
}

TEST(FocalPenalty, NoTriggersLeavesGradientsUntouched) {
  const auto p = random_policy(kConfig, 16);
  const auto b = batch(7, 4);
  auto t = dpo_triggers(p, p, b, 0.1);
  for (const auto& x : t) ASSERT_FALSE(x.triggered);
  const auto prompts = prompts_of(b);
  const auto with = penalty_gradients(p, prompts, t, true, true);
  const auto without = penalty_gradients(p, prompts, t, false, true);
  for (const auto& [name, grad] : with) EXPECT_EQ(grad, without.at(name)) << name;
}

TEST(FocalPenalty, GradientIgnoresDeltaAndPreSnapshot) {
  const auto cur = random_policy(kConfig, 17);
  const auto pre_a = random_policy(kConfig, 18), pre_b = random_policy(kConfig, 19);
  const auto b = batch(8, 12);
  const auto prompts = prompts_of(b);
  const auto ta = dpo_triggers(pre_a, cur, b, 0.1), tb = dpo_triggers(pre_b, cur, b, 0.1);
  bool some_differ = false, checked = false;
  for (std::size_t i = 0; i < b.size(); ++i) {
    some_differ |= ta[i].triggered != tb[i].triggered;
    if (!(ta[i].triggered && tb[i].triggered)) continue;
    ASSERT_NE(ta[i].delta, tb[i].delta);
    const std::vector<TokenSequence> one{prompts[i]};
    const auto ga = penalty_gradients(cur, one, {ta[i]}, true, false);
    const auto gb = penalty_gradients(cur, one, {tb[i]}, true, false);
    for (const auto& [name, grad] : ga) EXPECT_EQ(grad, gb.at(name)) << name;
    checked = true;
  }
  EXPECT_TRUE(some_differ);
  EXPECT_TRUE(checked);
}

TEST(FocalPenalty, MismatchedInputsAreErrors) {
  Graph g;
  std::vector<std::optional<NodeId>> lps(2);
  const std::vector<FlipTrigger> t(3);
  EXPECT_THROW(build_focal_penalty(g, lps, t, 0.01, Normalization::kTokenMean), Error);
  std::vector<FlipTrigger> fired(2);
  fired[0].triggered = true;
  EXPECT_THROW(build_focal_penalty(g, lps, fired, 0.01, Normalization::kTokenMean), Error);
}

TEST(TriggerCount, NonIncreasingInEpsilon) {
  const auto pre = random_policy(kConfig, 20, 0.2);
  const auto cur = random_policy(kConfig, 21, 0.2);
  const auto b = batch(9, 40);
  std::vector<double> deltas;
  for (const auto& e : b) deltas.push_back(implicit_reward_gap(pre, cur, e.prompt, e.chosen));
  std::size_t previous = b.size() + 1;
  for (double eps : {0.0, 0.05, 0.1, 0.2}) {
    std::size_t count = 0, oracle = 0;
    for (const auto& t : dpo_triggers(pre, cur, b, eps)) count += t.triggered;
    for (double d : deltas) oracle += d > eps ? 1 : 0;
    EXPECT_EQ(count, oracle);
    EXPECT_LE(count, previous);
    previous = count;
  }
}

// Composition ----------------------------------------------------------------

TEST(TotalLoss, Composition) {
  EXPECT_EQ(flipguard_total_loss(0.5, 0.0), 0.5);
  EXPECT_NEAR(flipguard_total_loss(std::numbers::ln2, 0.00625), 0.69940, 1e-5);
  EXPECT_THROW(flipguard_total_loss(std::nan(""), 0.0), Error);
  EXPECT_THROW(flipguard_total_loss(0.1, std::numeric_limits<double>::infinity()), Error);
}

TEST(TriggerDump, KeyOrder) {
  const FlipTrigger t{3, 0.25, true, {2, kEos}};
  EXPECT_EQ(trigger_json_line(7, t, 1.5),
            R"({"step":7,"example_id":3,"delta":0.25,"triggered":true,"focal_nll":1.5})");
}

}  // namespace
