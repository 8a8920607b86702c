#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "flipguard/model.hpp"
#include "flipguard/rng.hpp"

namespace flipguard::model {

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Inverse-CDF draw from softmax(logits / temperature).
inline std::size_t sample_categorical(std::span<const double> logits, double temperature, Rng& rng) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += weights[i] = std::exp((logits[i] - mx) / temperature);
  const double u = rng.uniform() * total;
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    cumulative += weights[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;
}

/// Incremental forward pass with per-layer key/value caches. Produces the same
/// logits, bit for bit, as the graph model evaluated on the full prefix.
class Decoder {
 public:
  explicit Decoder(const PolicySnapshot& policy) : policy_(policy), c_(policy.config()) {
    layers_.resize(c_.n_layers);
    for (std::size_t l = 0; l < c_.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      Layer& L = layers_[l];
      L.ln1_gain = &policy.param(pre + "ln1.gain");
      L.ln1_bias = &policy.param(pre + "ln1.bias");
      L.wq = &policy.param(pre + "attn.wq");
      L.wk = &policy.param(pre + "attn.wk");
      L.wv = &policy.param(pre + "attn.wv");
      L.wo = &policy.param(pre + "attn.wo");
      L.ln2_gain = &policy.param(pre + "ln2.gain");
      L.ln2_bias = &policy.param(pre + "ln2.bias");
      L.w_in = &policy.param(pre + "mlp.w_in");
      L.w_out = &policy.param(pre + "mlp.w_out");
    }
  }

  std::size_t length() const noexcept { return length_; }

  /// Appends one token and returns the logits for the token after it.
  std::vector<double> push(Token token) {
    const std::size_t d = c_.d_model, dh = c_.head_dim(), pos = length_;
    if (pos >= c_.max_seq_len)
      throw Error("sequence of " + std::to_string(pos + 1) + " tokens exceeds max_seq_len " +
                  std::to_string(c_.max_seq_len));
    const Token one[1]{token};
    check_tokens(c_, one);
    const double* tok = policy_.param("tok_emb").data() + static_cast<std::size_t>(token) * d;
    const double* pe = policy_.param("pos_emb").data() + pos * d;
    std::vector<double> h(d), a(d), q(d), attn(d), tmp(d), mid(c_.mlp_width());
    for (std::size_t j = 0; j < d; ++j) h[j] = tok[j] + pe[j];
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(pos + 1);
    for (auto& L : layers_) {
      layer_norm(h.data(), *L.ln1_gain, *L.ln1_bias, a.data());
      row_matmul(a.data(), *L.wq, q.data());
      L.keys.resize((pos + 1) * d);
      L.values.resize((pos + 1) * d);
      row_matmul(a.data(), *L.wk, L.keys.data() + pos * d);
      row_matmul(a.data(), *L.wv, L.values.data() + pos * d);
      for (std::size_t head = 0; head < c_.n_heads; ++head) {
        const std::size_t off = head * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= pos; ++j) {
          double dot = 0.0;
          for (std::size_t p = 0; p < dh; ++p) dot += q[off + p] * L.keys[j * d + off + p];
          scores[j] = score_scale * dot;
          mx = std::max(mx, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) total += std::exp(scores[j] - mx);
        for (std::size_t p = 0; p < dh; ++p) attn[off + p] = 0.0;
        for (std::size_t j = 0; j <= pos; ++j) {
          const double w = std::exp(scores[j] - mx) / total;
          for (std::size_t p = 0; p < dh; ++p) attn[off + p] += w * L.values[j * d + off + p];
        }
      }
      row_matmul(attn.data(), *L.wo, tmp.data());
      for (std::size_t j = 0; j < d; ++j) h[j] = h[j] + tmp[j];
      layer_norm(h.data(), *L.ln2_gain, *L.ln2_bias, a.data());
      row_matmul(a.data(), *L.w_in, mid.data());
      for (double& v : mid) v = v > 0.0 ? v : 0.0;
      row_matmul(mid.data(), *L.w_out, tmp.data());
      for (std::size_t j = 0; j < d; ++j) h[j] = h[j] + tmp[j];
    }
    layer_norm(h.data(), policy_.param("final_ln.gain"), policy_.param("final_ln.bias"), a.data());
    std::vector<double> logits(c_.vocab_size);
    row_matmul(a.data(), policy_.param("lm_head"), logits.data());
    ++length_;
    return logits;
  }

 private:
  struct Layer {
    const Tensor *ln1_gain, *ln1_bias, *wq, *wk, *wv, *wo, *ln2_gain, *ln2_bias, *w_in, *w_out;
    std::vector<double> keys, values;  // [length, d_model]
  };

  static void row_matmul(const double* x, const Tensor& w, double* out) {
    const std::size_t k = w.rows(), cols = w.cols();
    std::fill(out, out + cols, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[p];
      const double* wrow = w.data() + p * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += s * wrow[j];
    }
  }

  static void layer_norm(const double* x, const Tensor& gain, const Tensor& bias, double* out) {
    const std::size_t d = gain.size();
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + numerics::kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mu) * inv * gain[j] + bias[j];
  }

  PolicySnapshot policy_;
  ModelConfig c_;
  std::vector<Layer> layers_;
  std::size_t length_ = 0;
};

inline void check_decode_request(const PolicySnapshot& policy, std::span<const Token> prompt, std::size_t max_len,
                                 double temperature) {
  if (!(temperature >= 0.0)) throw Error("temperature must be >= 0");
  if (max_len == 0) throw Error("max_len must be positive");
  if (prompt.size() + max_len > policy.config().max_seq_len)
    throw Error("max_len " + std::to_string(max_len) + " exceeds max_seq_len - prompt length (" +
                std::to_string(policy.config().max_seq_len - std::min(prompt.size(), policy.config().max_seq_len)) +
                ")");
  check_tokens(policy.config(), prompt);
}

/// Samples a response of at most `max_len` tokens including the terminal EOS.
/// Temperature 0 takes the argmax at every step.
inline TokenSequence sample_response(const PolicySnapshot& policy, std::span<const Token> prompt,
                                     std::size_t max_len, double temperature, Rng& rng) {
  check_decode_request(policy, prompt, max_len, temperature);
  Decoder decoder(policy);
  std::vector<double> logits = decoder.push(kBos);
  for (Token t : prompt) logits = decoder.push(t);
  TokenSequence response;
  while (response.size() + 1 < max_len) {
    const auto next = static_cast<Token>(temperature == 0.0 ? argmax(logits)
                                                            : sample_categorical(logits, temperature, rng));
    response.push_back(next);
    if (next == kEos) return response;
    logits = decoder.push(next);
  }
  response.push_back(kEos);
  return response;
}

inline TokenSequence sample_response(const PolicySnapshot& policy, std::span<const Token> prompt,
                                     std::size_t max_len, double temperature, std::uint64_t seed) {
  Rng rng(seed, Stream::kSampling);
  return sample_response(policy, prompt, max_len, temperature, rng);
}

inline TokenSequence greedy_decode(const PolicySnapshot& policy, std::span<const Token> prompt, std::size_t max_len) {
  Rng unused(0);
  return sample_response(policy, prompt, max_len, 0.0, unused);
}

}  // namespace flipguard::model
