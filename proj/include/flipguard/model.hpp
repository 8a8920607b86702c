#pragma once

#include <cmath>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flipguard/checkpoint.hpp"
#include "flipguard/graph.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/tokens.hpp"

namespace flipguard::model {

using numerics::Graph;
using numerics::NodeId;
using numerics::ParameterMap;
using numerics::ParameterNodes;
using numerics::Shape;
using numerics::Tensor;

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq_len = 24;

  void validate() const {
    if (vocab_size < 2 || d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len < 3)
      throw Error("model config has a zero or too-small dimension");
    if (d_model % n_heads != 0)
      throw Error("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                  std::to_string(n_heads) + ")");
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t mlp_width() const { return 4 * d_model; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kInitStd = 0.02;
inline const std::string kConfigEntry = "__config__";

/// Names and shapes of every trainable tensor, in initialization order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out{
      {"tok_emb", {c.vocab_size, c.d_model}},
      {"pos_emb", {c.max_seq_len, c.d_model}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", {c.d_model}});
    out.push_back({p + "ln1.bias", {c.d_model}});
    out.push_back({p + "attn.wq", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wk", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wv", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wo", {c.d_model, c.d_model}});
    out.push_back({p + "ln2.gain", {c.d_model}});
    out.push_back({p + "ln2.bias", {c.d_model}});
    out.push_back({p + "mlp.w_in", {c.d_model, c.mlp_width()}});
    out.push_back({p + "mlp.w_out", {c.mlp_width(), c.d_model}});
  }
  out.push_back({"final_ln.gain", {c.d_model}});
  out.push_back({"final_ln.bias", {c.d_model}});
  out.push_back({"lm_head", {c.d_model, c.vocab_size}});
  return out;
}

inline Tensor config_tensor(const ModelConfig& c) {
  return Tensor::vector({static_cast<double>(c.vocab_size), static_cast<double>(c.d_model),
                         static_cast<double>(c.n_layers), static_cast<double>(c.n_heads),
                         static_cast<double>(c.max_seq_len)});
}

inline ModelConfig config_from_tensor(const Tensor& t) {
  if (t.shape() != Shape{5}) throw Error("malformed model config entry in checkpoint");
  auto dim = [&](std::size_t i) {
    const double v = t[i];
    if (!(v >= 1.0 && v < 1e6 && v == std::floor(v))) throw Error("malformed model config entry in checkpoint");
    return static_cast<std::size_t>(v);
  };
  ModelConfig c{dim(0), dim(1), dim(2), dim(3), dim(4)};
  c.validate();
  return c;
}

/// Immutable parameter set of the causal LM. Copies share storage.
class PolicySnapshot {
 public:
  PolicySnapshot(ModelConfig config, ParameterMap params) {
    config.validate();
    for (const auto& [name, shape] : parameter_layout(config)) {
      auto it = params.find(name);
      if (it == params.end()) throw Error("snapshot is missing parameter '" + name + "'");
      if (it->second.shape() != shape)
        throw Error("parameter '" + name + "' has shape " + numerics::to_string(it->second.shape()) + ", expected " +
                    numerics::to_string(shape));
      if (!it->second.all_finite()) throw Error("parameter '" + name + "' is not finite");
    }
    if (params.size() != parameter_layout(config).size())
      throw Error("snapshot has unexpected parameters beyond the model layout");
    auto state = std::make_shared<State>();
    state->config = config;
    state->params = std::move(params);
    state->fingerprint = fnv1a(checkpoint::encode_payload(with_config(state->params, config)));
    state_ = std::move(state);
  }

  const ModelConfig& config() const noexcept { return state_->config; }
  const ParameterMap& params() const noexcept { return state_->params; }
  const Tensor& param(std::string_view name) const {
    auto it = state_->params.find(name);
    if (it == state_->params.end()) throw Error("no parameter '" + std::string(name) + "'");
    return it->second;
  }
  /// FNV-1a of the checkpoint payload; equals the file's trailing checksum.
  std::uint64_t fingerprint() const noexcept { return state_->fingerprint; }

  static ParameterMap with_config(const ParameterMap& params, const ModelConfig& config) {
    ParameterMap out = params;
    out.emplace(kConfigEntry, config_tensor(config));
    return out;
  }

 private:
  struct State {
    ModelConfig config;
    ParameterMap params;
    std::uint64_t fingerprint = 0;
  };
  std::shared_ptr<const State> state_;
};

inline bool same_snapshot(const PolicySnapshot& a, const PolicySnapshot& b) {
  return a.fingerprint() == b.fingerprint() && a.config() == b.config() && a.params() == b.params();
}

/// Scaled-normal initialization; layer-norm gains start at 1 and the output
/// projection at 0, so every next-token distribution is uniform at init.
inline PolicySnapshot init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, Stream::kInit);
  ParameterMap params;
  for (const auto& [name, shape] : parameter_layout(config)) {
    Tensor t(shape);
    if (name.ends_with(".gain")) t.fill(1.0);
    else if (name.ends_with(".bias") || name == "lm_head") t.fill(0.0);
    else
      for (double& v : t.values()) v = kInitStd * rng.normal();
    params.emplace(name, std::move(t));
  }
  return PolicySnapshot(config, std::move(params));
}

/// Scalar reward head over mean-pooled final hidden states.
struct RewardHead {
  Tensor projection;  // [d_model, 1]
  double bias = 0.0;

  static RewardHead zeros(std::size_t d_model) { return {Tensor(Shape{d_model, 1}), 0.0}; }
};

inline const std::string kHeadProjection = "reward.projection";
inline const std::string kHeadBias = "reward.bias";

// Graph construction ---------------------------------------------------------

/// Adds every tensor of `params` to the graph, as trainable parameters or as constants.
inline ParameterNodes bind(Graph& g, const ParameterMap& params, bool trainable) {
  ParameterNodes nodes;
  for (const auto& [name, t] : params) nodes.emplace(name, trainable ? g.parameter(name, t) : g.constant(t));
  return nodes;
}

inline ParameterNodes bind_head(Graph& g, const RewardHead& head, bool trainable) {
  ParameterNodes nodes;
  const Tensor bias = Tensor::scalar(head.bias);
  nodes.emplace(kHeadProjection, trainable ? g.parameter(kHeadProjection, head.projection) : g.constant(head.projection));
  nodes.emplace(kHeadBias, trainable ? g.parameter(kHeadBias, bias) : g.constant(bias));
  return nodes;
}

inline void check_tokens(const ModelConfig& c, std::span<const Token> tokens) {
  for (Token t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw Error("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab_size));
}

/// Pre-norm transformer trunk. Returns final-layer-normed hidden states [T, d_model].
inline NodeId build_hidden(Graph& g, const ModelConfig& c, const ParameterNodes& p, std::span<const Token> input) {
  const std::size_t len = input.size();
  if (len == 0) throw Error("empty model input");
  if (len > c.max_seq_len)
    throw Error("sequence of " + std::to_string(len) + " tokens exceeds max_seq_len " + std::to_string(c.max_seq_len));
  check_tokens(c, input);

  std::vector<std::size_t> ids(input.begin(), input.end());
  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  NodeId h = g.add(g.embedding(p.at("tok_emb"), ids), g.embedding(p.at("pos_emb"), positions));

  const std::size_t dh = c.head_dim();
  std::vector<std::vector<std::size_t>> head_columns(c.n_heads);
  for (std::size_t head = 0; head < c.n_heads; ++head)
    for (std::size_t r = 0; r < len; ++r)
      for (std::size_t j = 0; j < dh; ++j) head_columns[head].push_back(r * c.d_model + head * dh + j);
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const NodeId a = g.layer_norm(h, p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"));
    const NodeId q = g.matmul(a, p.at(pre + "attn.wq"));
    const NodeId k = g.matmul(a, p.at(pre + "attn.wk"));
    const NodeId v = g.matmul(a, p.at(pre + "attn.wv"));
    std::vector<NodeId> heads;
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const Shape hs{len, dh};
      const NodeId qh = g.reshape(g.index_select(q, head_columns[head]), hs);
      const NodeId kh = g.reshape(g.index_select(k, head_columns[head]), hs);
      const NodeId vh = g.reshape(g.index_select(v, head_columns[head]), hs);
      const NodeId scores = g.causal_mask_fill(g.scale(g.matmul(qh, g.transpose(kh)), score_scale));
      heads.push_back(g.matmul(g.softmax(scores), vh));
    }
    const NodeId attn = heads.size() == 1 ? heads[0] : g.concat(heads, 1);
    h = g.add(h, g.matmul(attn, p.at(pre + "attn.wo")));
    const NodeId m = g.layer_norm(h, p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias"));
    h = g.add(h, g.matmul(g.relu(g.matmul(m, p.at(pre + "mlp.w_in"))), p.at(pre + "mlp.w_out")));
  }
  return g.layer_norm(h, p.at("final_ln.gain"), p.at("final_ln.bias"));
}

inline NodeId build_logits(Graph& g, const ModelConfig& c, const ParameterNodes& p, std::span<const Token> input) {
  return g.matmul(build_hidden(g, c, p, input), p.at("lm_head"));
}

/// Nodes describing log pi(response | prompt).
struct ResponseLogProb {
  NodeId per_token;    // [n]
  NodeId total;        // scalar, sum of per_token
  NodeId log_probs;    // [n, vocab], full next-token log-distribution at each response step
};

inline void check_response(const ModelConfig& c, std::span<const Token> prompt, std::span<const Token> response) {
  if (response.empty()) throw Error("empty response");
  if (response.back() != kEos) throw Error("response must end with EOS");
  if (prompt.size() + response.size() > c.max_seq_len)
    throw Error("prompt (" + std::to_string(prompt.size()) + ") + response (" + std::to_string(response.size()) +
                ") exceeds max_seq_len " + std::to_string(c.max_seq_len));
}

/// Model input for scoring a response: BOS, prompt, then every response token but the last.
inline TokenSequence teacher_forcing_input(std::span<const Token> prompt, std::span<const Token> response) {
  TokenSequence input;
  input.reserve(prompt.size() + response.size());
  input.push_back(kBos);
  input.insert(input.end(), prompt.begin(), prompt.end());
  input.insert(input.end(), response.begin(), response.end() - 1);
  return input;
}

inline ResponseLogProb build_response_log_prob(Graph& g, const ModelConfig& c, const ParameterNodes& p,
                                               std::span<const Token> prompt, std::span<const Token> response) {
  check_response(c, prompt, response);
  check_tokens(c, response);
  const TokenSequence input = teacher_forcing_input(prompt, response);
  const NodeId logits = build_logits(g, c, p, input);
  const std::size_t start = prompt.size();  // row predicting response[0]
  const std::size_t n = response.size();
  const std::size_t vocab = c.vocab_size;
  std::vector<std::size_t> rows, picks;
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t v = 0; v < vocab; ++v) rows.push_back((start + j) * vocab + v);
    picks.push_back((start + j) * vocab + static_cast<std::size_t>(response[j]));
  }
  const NodeId all = g.log_softmax(logits);
  const NodeId per_token = g.index_select(all, picks);
  const NodeId dist = g.reshape(g.index_select(all, rows), Shape{n, vocab});
  return {per_token, g.sum(per_token), dist};
}

/// Scalar reward node: head applied to the mean of final hidden states over response positions.
inline NodeId build_reward(Graph& g, const ModelConfig& c, const ParameterNodes& trunk, const ParameterNodes& head,
                           std::span<const Token> prompt, std::span<const Token> response) {
  if (response.empty()) throw Error("empty response");
  TokenSequence input;
  input.push_back(kBos);
  input.insert(input.end(), prompt.begin(), prompt.end());
  input.insert(input.end(), response.begin(), response.end());
  const NodeId hidden = build_hidden(g, c, trunk, input);
  const std::size_t start = 1 + prompt.size();
  const std::size_t n = response.size();
  std::vector<std::size_t> rows;
  for (std::size_t r = start; r < start + n; ++r)
    for (std::size_t j = 0; j < c.d_model; ++j) rows.push_back(r * c.d_model + j);
  const NodeId selected = g.reshape(g.index_select(hidden, rows), Shape{n, c.d_model});
  const NodeId weights = g.constant(Tensor(Shape{1, n}, std::vector<double>(n, 1.0 / static_cast<double>(n))));
  const NodeId pooled = g.matmul(weights, selected);
  const NodeId score = g.reshape(g.matmul(pooled, head.at(kHeadProjection)), Shape{});
  return g.add(score, head.at(kHeadBias));
}

// Evaluation -----------------------------------------------------------------

struct SequenceLogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

inline SequenceLogProb sequence_log_prob(const PolicySnapshot& policy, std::span<const Token> prompt,
                                         std::span<const Token> response) {
  Graph g;
  const auto nodes = bind(g, policy.params(), false);
  const auto lp = build_response_log_prob(g, policy.config(), nodes, prompt, response);
  const Tensor& per = g.value(lp.per_token);
  return {g.value(lp.total).item(), std::vector<double>(per.values().begin(), per.values().end())};
}

/// Full next-token log-distributions at each response step, [n, vocab].
inline Tensor response_distributions(const PolicySnapshot& policy, std::span<const Token> prompt,
                                     std::span<const Token> response) {
  Graph g;
  const auto nodes = bind(g, policy.params(), false);
  return g.value(build_response_log_prob(g, policy.config(), nodes, prompt, response).log_probs);
}

/// Logits for the token following `context` (which already starts with BOS).
inline std::vector<double> next_token_logits(const PolicySnapshot& policy, std::span<const Token> context) {
  Graph g;
  const auto nodes = bind(g, policy.params(), false);
  const ModelConfig& c = policy.config();
  const NodeId hidden = build_hidden(g, c, nodes, context);
  std::vector<std::size_t> last;
  for (std::size_t j = 0; j < c.d_model; ++j) last.push_back((context.size() - 1) * c.d_model + j);
  const NodeId row = g.reshape(g.index_select(hidden, last), Shape{1, c.d_model});
  const Tensor& logits = g.value(g.matmul(row, nodes.at("lm_head")));
  return {logits.values().begin(), logits.values().end()};
}

inline double rm_score(const PolicySnapshot& trunk, const RewardHead& head, std::span<const Token> prompt,
                       std::span<const Token> response) {
  Graph g;
  const auto t = bind(g, trunk.params(), false);
  const auto h = bind_head(g, head, false);
  return g.value(build_reward(g, trunk.config(), t, h, prompt, response)).item();
}

// Persistence ----------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const PolicySnapshot& snapshot) {
  checkpoint::write_file(path, checkpoint::encode(PolicySnapshot::with_config(snapshot.params(), snapshot.config())));
}

inline PolicySnapshot load_checkpoint(const std::filesystem::path& path) {
  ParameterMap params = checkpoint::decode(checkpoint::read_file(path));
  auto it = params.find(kConfigEntry);
  if (it == params.end()) throw Error("checkpoint '" + path.string() + "' has no model config entry");
  const ModelConfig config = config_from_tensor(it->second);
  params.erase(it);
  return PolicySnapshot(config, std::move(params));
}

/// Reward model = LM trunk plus scalar head, stored in one checkpoint.
struct RewardModel {
  PolicySnapshot trunk;
  RewardHead head;

  double score(std::span<const Token> prompt, std::span<const Token> response) const {
    return rm_score(trunk, head, prompt, response);
  }
};

inline void save_reward_model(const std::filesystem::path& path, const RewardModel& rm) {
  ParameterMap all = PolicySnapshot::with_config(rm.trunk.params(), rm.trunk.config());
  all.emplace(kHeadProjection, rm.head.projection);
  all.emplace(kHeadBias, Tensor::scalar(rm.head.bias));
  checkpoint::write_file(path, checkpoint::encode(all));
}

inline RewardModel load_reward_model(const std::filesystem::path& path) {
  ParameterMap params = checkpoint::decode(checkpoint::read_file(path));
  auto take = [&](const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("reward checkpoint '" + path.string() + "' lacks '" + name + "'");
    Tensor t = it->second;
    params.erase(it);
    return t;
  };
  const ModelConfig config = config_from_tensor(take(kConfigEntry));
  Tensor projection = take(kHeadProjection);
  const double bias = take(kHeadBias).item();
  if (projection.shape() != Shape{config.d_model, 1}) throw Error("reward projection has the wrong shape");
  return {PolicySnapshot(config, std::move(params)), RewardHead{std::move(projection), bias}};
}

}  // namespace flipguard::model
