#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flipguard/data.hpp"
#include "flipguard/decode.hpp"
#include "flipguard/model.hpp"

namespace flipguard::alignment {

using data::PreferenceExample;
using model::ModelConfig;
using model::PolicySnapshot;
using model::ResponseLogProb;
using numerics::Graph;
using numerics::NodeId;
using numerics::ParameterMap;
using numerics::ParameterNodes;
using numerics::Shape;
using numerics::Tensor;

enum class Method { kSft, kRm, kDpo, kPpo };
enum class RewardSource { kGold, kLearned };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kSft: return "sft";
    case Method::kRm: return "rm";
    case Method::kDpo: return "dpo";
    case Method::kPpo: return "ppo";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "sft") return Method::kSft;
  if (s == "rm") return Method::kRm;
  if (s == "dpo") return Method::kDpo;
  if (s == "ppo") return Method::kPpo;
  throw Error("unknown method '" + std::string(s) + "' (expected sft|rm|dpo|ppo)");
}

inline std::string to_string(RewardSource r) { return r == RewardSource::kGold ? "gold" : "learned"; }

inline RewardSource parse_reward_source(std::string_view s) {
  if (s == "gold") return RewardSource::kGold;
  if (s == "learned") return RewardSource::kLearned;
  throw Error("unknown reward source '" + std::string(s) + "' (expected gold|learned)");
}

struct AlignConfig {
  Method method = Method::kDpo;
  double beta = 0.1;
  double kl_coeff = 0.1;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  std::size_t rollouts_per_prompt = 4;
  double clip_ratio = 0.2;
  std::uint64_t seed = 0;
  RewardSource reward_source = RewardSource::kGold;
  std::size_t max_response_len = 13;  // sampled responses, EOS included
  double temperature = 1.0;

  void validate() const {
    if (!(beta > 0.0)) throw Error("beta must be > 0");
    if (!(kl_coeff >= 0.0)) throw Error("kl_coeff must be >= 0");
    if (!(clip_ratio > 0.0 && clip_ratio <= 1.0)) throw Error("clip_ratio must lie in (0, 1]");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be > 0");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (method == Method::kPpo) {
      if (rollouts_per_prompt == 0 || batch_size % rollouts_per_prompt != 0)
        throw Error("ppo batch_size must be a positive multiple of rollouts_per_prompt");
      if (batch_size < 2) throw Error("ppo needs at least two trajectories per batch");
      if (!(temperature > 0.0)) throw Error("ppo sampling temperature must be > 0");
    }
    if (max_response_len == 0) throw Error("max_response_len must be positive");
  }
};

// Scalar helpers -------------------------------------------------------------

/// -log(sigmoid(z)), stable for either sign of z.
inline double neg_log_sigmoid(double z) { return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

namespace detail {

inline NodeId mean_of(Graph& g, std::span<const NodeId> terms) {
  if (terms.empty()) throw Error("empty batch");
  NodeId total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  return g.scale(total, 1.0 / static_cast<double>(terms.size()));
}

/// -log(sigmoid(z)) as graph nodes.
inline NodeId neg_log_sigmoid(Graph& g, NodeId z) { return g.neg(g.log(g.sigmoid(z))); }

}  // namespace detail

// SFT ------------------------------------------------------------------------

struct SftTerms {
  NodeId loss;
  std::vector<ResponseLogProb> targets;
};

/// Mean over the batch of the mean per-token negative log-likelihood of the
/// target (the chosen response) given the prompt.
inline SftTerms build_sft_loss(Graph& g, const ModelConfig& c, const ParameterNodes& p,
                               std::span<const PreferenceExample> batch) {
  if (batch.empty()) throw Error("sft_loss: empty batch");
  SftTerms out;
  std::vector<NodeId> terms;
  for (const auto& ex : batch) {
    out.targets.push_back(model::build_response_log_prob(g, c, p, ex.prompt, ex.chosen));
    terms.push_back(g.neg(g.mean(out.targets.back().per_token)));
  }
  out.loss = detail::mean_of(g, terms);
  return out;
}

inline double sft_loss(const PolicySnapshot& policy, std::span<const PreferenceExample> batch) {
  Graph g;
  const auto p = model::bind(g, policy.params(), false);
  return g.value(build_sft_loss(g, policy.config(), p, batch).loss).item();
}

// Reward model ---------------------------------------------------------------

struct RmTerms {
  NodeId loss;
  std::vector<double> gaps;  // r(x, chosen) - r(x, rejected)
};

inline RmTerms build_rm_pair_loss(Graph& g, const ModelConfig& c, const ParameterNodes& trunk,
                                  const ParameterNodes& head, std::span<const PreferenceExample> batch) {
  if (batch.empty()) throw Error("rm_pair_loss: empty batch");
  RmTerms out;
  std::vector<NodeId> terms;
  for (const auto& ex : batch) {
    if (!ex.has_pair()) throw Error("rm_pair_loss: example without a rejected response");
    const NodeId gap = g.sub(model::build_reward(g, c, trunk, head, ex.prompt, ex.chosen),
                             model::build_reward(g, c, trunk, head, ex.prompt, ex.rejected));
    out.gaps.push_back(g.value(gap).item());
    terms.push_back(detail::neg_log_sigmoid(g, gap));
  }
  out.loss = detail::mean_of(g, terms);
  return out;
}

inline double rm_pair_loss(const PolicySnapshot& trunk, const model::RewardHead& head,
                           std::span<const PreferenceExample> batch) {
  Graph g;
  const auto t = model::bind(g, trunk.params(), false);
  const auto h = model::bind_head(g, head, false);
  return g.value(build_rm_pair_loss(g, trunk.config(), t, h, batch).loss).item();
}

// DPO ------------------------------------------------------------------------

/// Summed log-probabilities of both responses under the frozen reference.
struct ReferenceLogProbs {
  double chosen = 0.0;
  double rejected = 0.0;
};

inline ReferenceLogProbs reference_log_probs(const PolicySnapshot& reference, const PreferenceExample& ex) {
  return {model::sequence_log_prob(reference, ex.prompt, ex.chosen).total,
          model::sequence_log_prob(reference, ex.prompt, ex.rejected).total};
}

struct DpoTerms {
  NodeId loss;
  std::vector<ResponseLogProb> chosen;  // policy log-probs of y_w, reused by the focal penalty
  std::vector<double> delta_w, delta_l;  // log pi - log pi_ref
};

/// Mean of -log sigmoid(beta * (delta_w - delta_l)) with sequence-level log-probs.
inline DpoTerms build_dpo_loss(Graph& g, const ModelConfig& c, const ParameterNodes& p,
                               std::span<const PreferenceExample> batch, std::span<const ReferenceLogProbs> ref,
                               double beta) {
  if (batch.empty()) throw Error("dpo_loss: empty batch");
  if (ref.size() != batch.size()) throw Error("dpo_loss: reference log-probs do not match the batch");
  if (!(beta > 0.0)) throw Error("dpo_loss: beta must be > 0");
  DpoTerms out;
  std::vector<NodeId> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    if (!ex.has_pair()) throw Error("dpo_loss: example without a rejected response");
    const auto w = model::build_response_log_prob(g, c, p, ex.prompt, ex.chosen);
    const auto l = model::build_response_log_prob(g, c, p, ex.prompt, ex.rejected);
    const NodeId dw = g.sub(w.total, g.constant(ref[i].chosen));
    const NodeId dl = g.sub(l.total, g.constant(ref[i].rejected));
    out.chosen.push_back(w);
    out.delta_w.push_back(g.value(dw).item());
    out.delta_l.push_back(g.value(dl).item());
    terms.push_back(detail::neg_log_sigmoid(g, g.scale(g.sub(dw, dl), beta)));
  }
  out.loss = detail::mean_of(g, terms);
  return out;
}

inline double dpo_loss(const PolicySnapshot& policy, const PolicySnapshot& reference,
                       std::span<const PreferenceExample> batch, double beta) {
  std::vector<ReferenceLogProbs> ref;
  for (const auto& ex : batch) ref.push_back(reference_log_probs(reference, ex));
  Graph g;
  const auto p = model::bind(g, policy.params(), false);
  return g.value(build_dpo_loss(g, policy.config(), p, batch, ref, beta).loss).item();
}

// PPO ------------------------------------------------------------------------

using Scorer = std::function<double(std::span<const Token> prompt, std::span<const Token> response)>;

struct Trajectory {
  std::size_t prompt_id = 0;
  TokenSequence prompt;
  TokenSequence response;
  std::vector<double> sampling_log_probs;  // per token, under the sampling snapshot
  std::vector<double> reference_log_probs;  // per token, under the pre-aligned policy
  Tensor reference_distributions;           // [n, vocab] log-probs under the pre-aligned policy
  std::vector<double> rewards;              // per-token shaped reward
  double terminal_reward = 0.0;
  double ret = 0.0;
};

/// Samples `rollouts_per_prompt` responses for each prompt and attaches
/// KL-shaped per-token rewards: -kl_coeff * (log pi - log pi_0) at every token,
/// plus the terminal reward at EOS.
inline std::vector<Trajectory> ppo_rollout(const PolicySnapshot& policy, const PolicySnapshot& pre_policy,
                                           const Scorer& reward, std::span<const TokenSequence> prompts,
                                           std::span<const std::size_t> prompt_ids, const AlignConfig& config,
                                           Rng& rng) {
  if (prompt_ids.size() != prompts.size()) throw Error("ppo_rollout: prompt ids do not match prompts");
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t k = 0; k < config.rollouts_per_prompt; ++k) {
      Trajectory t;
      t.prompt_id = prompt_ids[i];
      t.prompt = prompts[i];
      const std::size_t room = policy.config().max_seq_len - std::min(policy.config().max_seq_len, t.prompt.size());
      t.response = model::sample_response(policy, t.prompt, std::min(config.max_response_len, room),
                                          config.temperature, rng);
      t.sampling_log_probs = model::sequence_log_prob(policy, t.prompt, t.response).per_token;
      {
        Graph g;
        const auto nodes = model::bind(g, pre_policy.params(), false);
        const auto lp = model::build_response_log_prob(g, pre_policy.config(), nodes, t.prompt, t.response);
        const auto per = g.value(lp.per_token).values();
        t.reference_log_probs.assign(per.begin(), per.end());
        t.reference_distributions = g.value(lp.log_probs);
      }
      try {
        t.terminal_reward = reward(t.prompt, t.response);
      } catch (const std::exception& e) {
        throw Error("reward scorer failed on prompt " + std::to_string(t.prompt_id) + ": " + e.what());
      }
      if (!std::isfinite(t.terminal_reward))
        throw Error("reward scorer returned a non-finite value on prompt " + std::to_string(t.prompt_id));
      const std::size_t n = t.response.size();
      t.rewards.resize(n);
      for (std::size_t j = 0; j < n; ++j)
        t.rewards[j] = -config.kl_coeff * (t.sampling_log_probs[j] - t.reference_log_probs[j]);
      t.rewards[n - 1] += t.terminal_reward;
      for (double r : t.rewards) t.ret += r;
      out.push_back(std::move(t));
    }
  }
  return out;
}

/// (return - batch mean) / (batch population std + 1e-8).
inline std::vector<double> advantages(std::span<const Trajectory> batch) {
  if (batch.size() < 2) throw Error("ppo: advantage standardization needs at least two trajectories");
  double mean = 0.0;
  for (const auto& t : batch) mean += t.ret;
  mean /= static_cast<double>(batch.size());
  double var = 0.0;
  for (const auto& t : batch) var += (t.ret - mean) * (t.ret - mean);
  const double sd = std::sqrt(var / static_cast<double>(batch.size()));
  std::vector<double> a;
  for (const auto& t : batch) a.push_back((t.ret - mean) / (sd + 1e-8));
  return a;
}

struct PpoTerms {
  NodeId loss;
  std::vector<ResponseLogProb> log_probs;  // current policy, one per trajectory
  std::vector<double> advantages;
  std::size_t clipped_tokens = 0;
};

/// Clipped surrogate, averaged over tokens within a trajectory and then over
/// trajectories. Which branch of the min is active is decided from the current
/// values and enters the graph as a constant mask.
inline PpoTerms build_ppo_surrogate(Graph& g, const ModelConfig& c, const ParameterNodes& p,
                                    std::span<const Trajectory> batch, double clip_ratio) {
  PpoTerms out;
  out.advantages = advantages(batch);
  std::vector<NodeId> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    const double a = out.advantages[i];
    const auto lp = model::build_response_log_prob(g, c, p, t.prompt, t.response);
    const std::size_t n = t.response.size();
    const Tensor old(Shape{n}, t.sampling_log_probs);
    const NodeId ratio = g.exp(g.sub(lp.per_token, g.constant(old)));
    const Tensor& rho = g.value(ratio);
    std::vector<double> weights(n);
    double constant_part = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double clipped = std::clamp(rho[j], 1.0 - clip_ratio, 1.0 + clip_ratio) * a;
      if (rho[j] * a <= clipped) {
        weights[j] = a / static_cast<double>(n);
      } else {
        constant_part += clipped / static_cast<double>(n);
        ++out.clipped_tokens;
      }
    }
    const NodeId weighted = g.reshape(
        g.matmul(g.reshape(ratio, Shape{1, n}), g.constant(Tensor(Shape{n, 1}, std::move(weights)))), Shape{});
    terms.push_back(g.add_scalar(weighted, constant_part));
    out.log_probs.push_back(lp);
  }
  out.loss = g.neg(detail::mean_of(g, terms));
  return out;
}

inline double ppo_surrogate_loss(std::span<const Trajectory> batch, const PolicySnapshot& policy,
                                 double clip_ratio) {
  Graph g;
  const auto p = model::bind(g, policy.params(), false);
  return g.value(build_ppo_surrogate(g, policy.config(), p, batch, clip_ratio).loss).item();
}

// Optimizer ------------------------------------------------------------------

/// Adam with bias correction and a constant learning rate.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {}

  std::size_t steps() const noexcept { return t_; }

  void step(ParameterMap& params, const ParameterMap& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, value] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& grad = git->second;
      if (grad.shape() != value.shape()) throw Error("adam: gradient for '" + name + "' has the wrong shape");
      auto& m = m_.try_emplace(name, value.shape()).first->second;
      auto& v = v_.try_emplace(name, value.shape()).first->second;
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * grad[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * grad[i] * grad[i];
        value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  ParameterMap m_, v_;
};

inline double global_norm(const ParameterMap& grads) {
  double total = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.values()) total += v * v;
  return std::sqrt(total);
}

}  // namespace flipguard::alignment
