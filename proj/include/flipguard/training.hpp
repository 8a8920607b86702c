#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flipguard/alignment.hpp"
#include "flipguard/eval.hpp"
#include "flipguard/flipguard.hpp"

namespace flipguard::training {

using alignment::AlignConfig;
using alignment::Method;
using constraint::FlipGuardConfig;
using constraint::FlipTrigger;
using constraint::Mode;
using data::PreferenceExample;
using model::PolicySnapshot;
using numerics::Graph;
using numerics::NodeId;
using numerics::ParameterMap;
using numerics::Tensor;

struct MetricsRecord {
  std::size_t step = 0;
  std::string method;
  double loss = 0.0;
  double align_loss = 0.0;
  double focal_term = 0.0;
  double trigger_rate = 0.0;
  double mean_token_kl = 0.0;
  double mean_reward = 0.0;
  double grad_norm = 0.0;
};

inline std::string to_json_line(const MetricsRecord& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["method"] = m.method;
  j["loss"] = m.loss;
  j["align_loss"] = m.align_loss;
  j["focal_term"] = m.focal_term;
  j["trigger_rate"] = m.trigger_rate;
  j["mean_token_kl"] = m.mean_token_kl;
  j["mean_reward"] = m.mean_reward;
  j["grad_norm"] = m.grad_norm;
  return j.dump();
}

/// What one optimization step saw, handed to the observer before the update.
struct StepAudit {
  std::size_t step = 0;
  std::vector<FlipTrigger> triggers;
  std::vector<double> focal_nll;  // -log pi(focal target | x), reduced per the configured normalization
  MetricsRecord metrics;
};

using Observer = std::function<void(const StepAudit&)>;

struct TrainInputs {
  PolicySnapshot initial;                           // policy, or reward-model trunk, at step 0
  std::optional<PolicySnapshot> pre_policy;         // pi_0 for dpo/ppo; defaults to `initial`
  std::vector<PreferenceExample> examples;          // split matching the method
  std::optional<model::RewardModel> reward_model;   // ppo with the learned reward
  std::optional<model::RewardHead> initial_head;    // rm; zeros when absent
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool dump_triggers = false;
  Observer observer;
};

struct TrainResult {
  PolicySnapshot policy;
  std::optional<model::RewardHead> head;
  std::vector<MetricsRecord> metrics;
  std::filesystem::path checkpoint, metrics_log, trigger_log;
};

/// Shuffled passes over [0, n); a new permutation starts when one runs out.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed, Stream::kBatches) {
    if (n == 0) throw Error("cannot sample batches from an empty split");
  }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
    pos_ = 0;
  }

  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline std::string describe(const AlignConfig& a, const FlipGuardConfig& f) {
  std::ostringstream s;
  s << "method=" << alignment::to_string(a.method) << " beta=" << eval::format_double(a.beta)
    << " kl_coeff=" << eval::format_double(a.kl_coeff) << " learning_rate=" << eval::format_double(a.learning_rate)
    << " batch_size=" << a.batch_size << " steps=" << a.steps << " rollouts_per_prompt=" << a.rollouts_per_prompt
    << " clip_ratio=" << eval::format_double(a.clip_ratio) << " seed=" << a.seed
    << " reward_source=" << alignment::to_string(a.reward_source) << " constraint=" << constraint::to_string(f.mode)
    << " gamma=" << eval::format_double(f.gamma) << " epsilon=" << eval::format_double(f.epsilon)
    << " normalization=" << constraint::to_string(f.normalization);
  return s.str();
}

namespace detail {

inline double nll(const Tensor& per_token, constraint::Normalization norm) {
  double total = 0.0;
  for (double v : per_token.values()) total += v;
  return norm == constraint::Normalization::kTokenMean ? -total / static_cast<double>(per_token.size()) : -total;
}

struct ReferenceCache {
  alignment::ReferenceLogProbs totals;
  Tensor chosen_distributions;  // [n, vocab]
};

}  // namespace detail

/// Runs `align.steps` optimizer steps of the configured method with the
/// constraint of `guard` added to the loss.
inline TrainResult run_training(const AlignConfig& align, const FlipGuardConfig& guard, const TrainInputs& in,
                                const TrainOptions& options = {}) {
  align.validate();
  guard.validate(align.method);
  const Method method = align.method;
  const model::ModelConfig cfg = in.initial.config();
  const PolicySnapshot pre = in.pre_policy ? *in.pre_policy : in.initial;
  if (in.examples.empty()) throw Error("training split is empty");
  if (method == Method::kPpo && align.reward_source == alignment::RewardSource::kLearned && !in.reward_model)
    throw Error("ppo with the learned reward needs a reward model");

  ParameterMap params = in.initial.params();
  if (method == Method::kRm) {
    const auto head = in.initial_head ? *in.initial_head : model::RewardHead::zeros(cfg.d_model);
    params.emplace(model::kHeadProjection, head.projection);
    params.emplace(model::kHeadBias, Tensor::scalar(head.bias));
  }

  alignment::Scorer scorer;
  if (method == Method::kPpo) {
    if (align.reward_source == alignment::RewardSource::kGold) {
      scorer = [](std::span<const Token> x, std::span<const Token> y) { return data::gold_reward(x, y); };
    } else {
      const model::RewardModel rm = *in.reward_model;
      scorer = [rm](std::span<const Token> x, std::span<const Token> y) { return rm.score(x, y); };
    }
  }

  std::ofstream metrics_out, trigger_out;
  TrainResult result{in.initial, std::nullopt, {}, {}, {}, {}};
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    result.metrics_log = options.out_dir / "metrics.jsonl";
    metrics_out.open(result.metrics_log, std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw Error("cannot open '" + result.metrics_log.string() + "' for writing");
    if (options.dump_triggers) {
      result.trigger_log = options.out_dir / "triggers.jsonl";
      trigger_out.open(result.trigger_log, std::ios::binary | std::ios::trunc);
      if (!trigger_out) throw Error("cannot open '" + result.trigger_log.string() + "' for writing");
    }
  }

  const std::size_t units = method == Method::kPpo ? align.batch_size / align.rollouts_per_prompt : align.batch_size;
  BatchSampler sampler(in.examples.size(), align.seed);
  Rng sample_rng(align.seed, Stream::kSampling);
  alignment::Adam adam(align.learning_rate);
  std::vector<std::optional<detail::ReferenceCache>> ref_cache(in.examples.size());
  std::map<std::size_t, std::pair<TokenSequence, double>> y_ref_cache;  // prompt id -> (greedy pi_0 response, reward)

  for (std::size_t step = 0; step < align.steps; ++step) {
    const std::vector<std::size_t> ids = sampler.next(units);
    std::vector<PreferenceExample> batch;
    for (std::size_t id : ids) batch.push_back(in.examples[id]);

    Graph g;
    const auto nodes = model::bind(g, params, true);
    MetricsRecord m;
    m.step = step;
    m.method = alignment::to_string(method);
    StepAudit audit;
    audit.step = step;
    NodeId align_loss{};
    // Per-example (per-trajectory for ppo) focal-target log-prob nodes.
    std::vector<std::optional<NodeId>> focal_lp;

    if (method == Method::kSft) {
      align_loss = alignment::build_sft_loss(g, cfg, nodes, batch).loss;
    } else if (method == Method::kRm) {
      const auto terms = alignment::build_rm_pair_loss(g, cfg, nodes, nodes, batch);
      align_loss = terms.loss;
      double gap = 0.0;
      for (double v : terms.gaps) gap += v;
      m.mean_reward = gap / static_cast<double>(terms.gaps.size());
    } else if (method == Method::kDpo) {
      std::vector<alignment::ReferenceLogProbs> ref;
      for (std::size_t id : ids) {
        auto& slot = ref_cache[id];
        if (!slot) {
          const auto& ex = in.examples[id];
          Graph rg;
          const auto rn = model::bind(rg, pre.params(), false);
          const auto w = model::build_response_log_prob(rg, cfg, rn, ex.prompt, ex.chosen);
          const double l = model::sequence_log_prob(pre, ex.prompt, ex.rejected).total;
          slot = detail::ReferenceCache{{rg.value(w.total).item(), l}, rg.value(w.log_probs)};
        }
        ref.push_back(slot->totals);
      }
      const auto terms = alignment::build_dpo_loss(g, cfg, nodes, batch, ref, align.beta);
      align_loss = terms.loss;
      double kl = 0.0, margin = 0.0;
      std::size_t rows = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        FlipTrigger t;
        t.example_id = ids[i];
        t.delta = -terms.delta_w[i];  // log pi_0(y_w|x) - log pi(y_w|x)
        t.triggered = constraint::flip_indicator(t.delta, guard.epsilon);
        t.focal_target = constraint::select_focal_target(t.triggered, method, batch[i].chosen, nullptr, {});
        audit.triggers.push_back(std::move(t));
        focal_lp.push_back(terms.chosen[i].per_token);
        const auto [s, r] = eval::token_kl_sum(g.value(terms.chosen[i].log_probs), ref_cache[ids[i]]->chosen_distributions);
        kl += s;
        rows += r;
        margin += align.beta * (terms.delta_w[i] - terms.delta_l[i]);
      }
      m.mean_token_kl = kl / static_cast<double>(rows);
      m.mean_reward = margin / static_cast<double>(batch.size());
    } else {
      const PolicySnapshot sampling(cfg, params);
      std::vector<TokenSequence> prompts;
      for (const auto& ex : batch) prompts.push_back(ex.prompt);
      const auto trajectories = alignment::ppo_rollout(sampling, pre, scorer, prompts, ids, align, sample_rng);
      const auto terms = alignment::build_ppo_surrogate(g, cfg, nodes, trajectories, align.clip_ratio);
      align_loss = terms.loss;
      const bool penalize = guard.mode != Mode::kOff && guard.gamma != 0.0;
      std::map<std::size_t, NodeId> ref_lp;
      double kl = 0.0, reward = 0.0;
      std::size_t rows = 0;
      for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const auto& tr = trajectories[i];
        auto it = y_ref_cache.find(tr.prompt_id);
        if (it == y_ref_cache.end()) {
          const std::size_t room = cfg.max_seq_len - tr.prompt.size();
          TokenSequence y_ref = model::greedy_decode(pre, tr.prompt, std::min(align.max_response_len, room));
          const double r = scorer(tr.prompt, y_ref);
          it = y_ref_cache.emplace(tr.prompt_id, std::pair{std::move(y_ref), r}).first;
        }
        FlipTrigger t;
        t.example_id = tr.prompt_id;
        t.delta = it->second.second - tr.terminal_reward;  // R(x, y_ref) - R(x, y_pol)
        t.triggered = constraint::flip_indicator(t.delta, guard.epsilon);
        const bool gated = guard.mode == Mode::kKd || t.triggered;
        t.focal_target = constraint::select_focal_target(gated, method, {}, &it->second.first, tr.response);
        std::optional<NodeId> lp;
        if (penalize && gated) {
          auto node = ref_lp.find(tr.prompt_id);
          if (node == ref_lp.end())
            node = ref_lp.emplace(tr.prompt_id,
                                  model::build_response_log_prob(g, cfg, nodes, tr.prompt, t.focal_target).per_token)
                       .first;
          lp = node->second;
        }
        focal_lp.push_back(lp);
        audit.triggers.push_back(std::move(t));
        const auto [s, r] = eval::token_kl_sum(g.value(terms.log_probs[i].log_probs), tr.reference_distributions);
        kl += s;
        rows += r;
        reward += tr.terminal_reward;
      }
      m.mean_token_kl = kl / static_cast<double>(rows);
      m.mean_reward = reward / static_cast<double>(trajectories.size());
    }

    std::optional<NodeId> penalty;
    if (guard.mode != Mode::kOff)
      penalty = constraint::build_focal_penalty(g, focal_lp, audit.triggers, guard.gamma, guard.normalization,
                                                guard.mode == Mode::kKd);
    const NodeId loss = penalty ? g.add(align_loss, *penalty) : align_loss;

    m.align_loss = g.value(align_loss).item();
    m.focal_term = penalty ? g.value(*penalty).item() : 0.0;
    m.loss = g.value(loss).item();
    if (!std::isfinite(m.loss))
      throw Error("non-finite loss at step " + std::to_string(step) + "; config: " + describe(align, guard));
    if (!audit.triggers.empty()) {
      std::size_t fired = 0;
      for (const auto& t : audit.triggers) fired += t.triggered ? 1 : 0;
      m.trigger_rate = static_cast<double>(fired) / static_cast<double>(audit.triggers.size());
    }

    const ParameterMap grads = g.gradients(loss);
    m.grad_norm = alignment::global_norm(grads);
    if (!std::isfinite(m.grad_norm))
      throw Error("non-finite gradient at step " + std::to_string(step) + "; config: " + describe(align, guard));

    if (options.observer || trigger_out.is_open()) {
      for (std::size_t i = 0; i < audit.triggers.size(); ++i)
        audit.focal_nll.push_back(focal_lp[i] ? detail::nll(g.value(*focal_lp[i]), guard.normalization) : 0.0);
      audit.metrics = m;
      if (trigger_out.is_open())
        for (std::size_t i = 0; i < audit.triggers.size(); ++i)
          trigger_out << constraint::trigger_json_line(step, audit.triggers[i], audit.focal_nll[i]) << '\n';
      if (options.observer) options.observer(audit);
    }
    if (metrics_out.is_open()) metrics_out << to_json_line(m) << '\n';
    result.metrics.push_back(std::move(m));
    adam.step(params, grads);
  }

  if (method == Method::kRm) {
    auto take = [&](const std::string& name) {
      auto node = params.extract(name);
      return std::move(node.mapped());
    };
    Tensor projection = take(model::kHeadProjection);
    const double bias = take(model::kHeadBias).item();
    result.head = model::RewardHead{std::move(projection), bias};
  }
  result.policy = PolicySnapshot(cfg, std::move(params));

  if (!options.out_dir.empty()) {
    metrics_out.close();
    if (method == Method::kRm) {
      result.checkpoint = options.out_dir / "reward_model.fgck";
      model::save_reward_model(result.checkpoint, {result.policy, *result.head});
    } else {
      result.checkpoint = options.out_dir / "policy.fgck";
      model::save_checkpoint(result.checkpoint, result.policy);
    }
  }
  return result;
}

}  // namespace flipguard::training
