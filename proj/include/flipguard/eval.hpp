#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flipguard/alignment.hpp"
#include "flipguard/decode.hpp"
#include "flipguard/model.hpp"

namespace flipguard::eval {

using alignment::Scorer;
using model::PolicySnapshot;
using numerics::Tensor;

enum class Verdict { kPreBetter, kPostBetter, kTie };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::kPreBetter: return "PRE_BETTER";
    case Verdict::kPostBetter: return "POST_BETTER";
    case Verdict::kTie: return "TIE";
  }
  return "?";
}

inline Verdict parse_verdict(std::string_view s) {
  if (s == "PRE_BETTER") return Verdict::kPreBetter;
  if (s == "POST_BETTER") return Verdict::kPostBetter;
  if (s == "TIE") return Verdict::kTie;
  throw Error("unknown verdict '" + std::string(s) + "'");
}

/// Score changes no larger than `dead_zone` in either direction are ties.
inline Verdict judge_pair(double score_pre, double score_post, double dead_zone) {
  if (!(dead_zone >= 0.0)) throw Error("dead_zone must be >= 0");
  if (score_pre - score_post > dead_zone) return Verdict::kPreBetter;
  if (score_post - score_pre > dead_zone) return Verdict::kPostBetter;
  return Verdict::kTie;
}

struct EvalRecord {
  std::size_t prompt_id = 0;
  TokenSequence prompt;
  TokenSequence pre_response, post_response;
  double pre_score = 0.0, post_score = 0.0;
  Verdict verdict = Verdict::kTie;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

/// Greedy-decodes both policies on every prompt and judges the pair.
inline std::vector<EvalRecord> evaluate_policy_pair(const PolicySnapshot& pre, const PolicySnapshot& post,
                                                    std::span<const TokenSequence> prompts, const Scorer& judge,
                                                    double dead_zone, std::size_t max_len = 13) {
  std::vector<EvalRecord> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    EvalRecord r;
    r.prompt_id = i;
    r.prompt = prompts[i];
    try {
      r.pre_response = model::greedy_decode(pre, r.prompt, max_len);
      r.post_response = model::greedy_decode(post, r.prompt, max_len);
      r.pre_score = judge(r.prompt, r.pre_response);
      r.post_score = judge(r.prompt, r.post_response);
    } catch (const std::exception& e) {
      throw Error("evaluation of prompt " + std::to_string(i) + " failed: " + e.what());
    }
    r.verdict = judge_pair(r.pre_score, r.post_score, dead_zone);
    out.push_back(std::move(r));
  }
  return out;
}

struct FlipStats {
  std::size_t n = 0, pre_better = 0, post_better = 0, ties = 0;
  double nfr = 0.0, win_rate = 0.0, tie_rate = 0.0;
};

inline FlipStats flip_stats(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error("flip_stats: no records");
  FlipStats s;
  s.n = records.size();
  for (const auto& r : records) {
    if (r.verdict == Verdict::kPreBetter) ++s.pre_better;
    else if (r.verdict == Verdict::kPostBetter) ++s.post_better;
    else ++s.ties;
  }
  // Ties take the remainder, so (nfr + win_rate) + tie_rate is exactly 1 in
  // floating point as well as in the counts.
  const auto n = static_cast<double>(s.n);
  s.nfr = static_cast<double>(s.pre_better) / n;
  s.win_rate = static_cast<double>(s.post_better) / n;
  s.tie_rate = 1.0 - (s.nfr + s.win_rate);
  return s;
}

// KL -------------------------------------------------------------------------

/// Sum over rows of KL(p || q) between rows of log-probability matrices, and the row count.
inline std::pair<double, std::size_t> token_kl_sum(const Tensor& log_p, const Tensor& log_q) {
  if (log_p.shape() != log_q.shape() || log_p.rank() != 2) throw Error("token_kl: shape mismatch");
  double total = 0.0;
  for (std::size_t r = 0; r < log_p.rows(); ++r)
    for (std::size_t v = 0; v < log_p.cols(); ++v) {
      const double lp = log_p.at(r, v);
      total += std::exp(lp) * (lp - log_q.at(r, v));
    }
  return {total, log_p.rows()};
}

struct Completion {
  TokenSequence prompt, response;
};

/// Mean over all response positions of KL(current || reference) over the full vocabulary.
inline double mean_token_kl(const PolicySnapshot& current, const PolicySnapshot& reference,
                            std::span<const Completion> samples) {
  if (samples.empty()) throw Error("mean_token_kl: no samples");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    const auto [sum, rows] = token_kl_sum(model::response_distributions(current, s.prompt, s.response),
                                          model::response_distributions(reference, s.prompt, s.response));
    total += sum;
    count += rows;
  }
  return total / static_cast<double>(count);
}

inline std::vector<Completion> post_completions(std::span<const EvalRecord> records) {
  std::vector<Completion> out;
  for (const auto& r : records) out.push_back({r.prompt, r.post_response});
  return out;
}

inline double mean_post_score(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error("mean_post_score: no records");
  double total = 0.0;
  for (const auto& r : records) total += r.post_score;
  return total / static_cast<double>(records.size());
}

// Files ----------------------------------------------------------------------

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline std::string to_json_line(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["prompt_id"] = r.prompt_id;
  j["prompt"] = r.prompt;
  j["pre_response"] = r.pre_response;
  j["post_response"] = r.post_response;
  j["pre_score"] = r.pre_score;
  j["post_score"] = r.post_score;
  j["verdict"] = to_string(r.verdict);
  return j.dump();
}

inline void save_records(const std::filesystem::path& path, std::span<const EvalRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline std::vector<EvalRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<EvalRecord> out;
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EvalRecord r;
      r.prompt_id = j.at("prompt_id").get<std::size_t>();
      r.prompt = j.at("prompt").get<TokenSequence>();
      r.pre_response = j.at("pre_response").get<TokenSequence>();
      r.post_response = j.at("post_response").get<TokenSequence>();
      r.pre_score = j.at("pre_score").get<double>();
      r.post_score = j.at("post_score").get<double>();
      r.verdict = parse_verdict(j.at("verdict").get<std::string>());
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

/// One row of the summary table.
struct SummaryRow {
  std::string run_id, method, constraint;
  double gamma = 0.0, epsilon = 0.0;
  std::uint64_t seed = 0;
  double nfr = 0.0, win_rate = 0.0, tie_rate = 0.0, mean_token_kl = 0.0, mean_gold_reward = 0.0;
};

inline const char* kSummaryHeader =
    "run_id,method,constraint,gamma,epsilon,seed,nfr,win_rate,tie_rate,mean_token_kl,mean_gold_reward";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string to_csv_row(const SummaryRow& r) {
  return csv_field(r.run_id) + "," + csv_field(r.method) + "," + csv_field(r.constraint) + "," +
         format_double(r.gamma) + "," + format_double(r.epsilon) + "," + std::to_string(r.seed) + "," +
         format_double(r.nfr) + "," + format_double(r.win_rate) + "," + format_double(r.tie_rate) + "," +
         format_double(r.mean_token_kl) + "," + format_double(r.mean_gold_reward);
}

/// Everything `emit_report` needs about one evaluated run.
struct ReportInput {
  SummaryRow row;
  std::vector<EvalRecord> records;
  std::filesystem::path metrics_log;  // optional per-step log of the aligned run
};

inline const std::vector<std::string> kCurveColumns{"loss",          "align_loss",  "focal_term", "trigger_rate",
                                                    "mean_token_kl", "mean_reward", "grad_norm"};

/// Writes summary.csv, scatter/<run_id>.json and curves.csv under `out_dir`.
inline void emit_report(std::span<const ReportInput> runs, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "scatter", ec);
  if (ec) throw Error("cannot create report directory '" + out_dir.string() + "': " + ec.message());
  auto open = [](const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + p.string() + "' for writing");
    return out;
  };

  auto summary = open(out_dir / "summary.csv");
  summary << kSummaryHeader << '\n';
  for (const auto& run : runs) summary << to_csv_row(run.row) << '\n';

  for (const auto& run : runs) {
    nlohmann::ordered_json points = nlohmann::ordered_json::array();
    for (const auto& r : run.records)
      points.push_back({{"prompt_id", r.prompt_id}, {"pre", r.pre_score}, {"post", r.post_score}});
    auto scatter = open(out_dir / "scatter" / (run.row.run_id + ".json"));
    scatter << points.dump() << '\n';
  }

  auto curves = open(out_dir / "curves.csv");
  curves << "run_id,step";
  for (const auto& c : kCurveColumns) curves << ',' << c;
  curves << '\n';
  for (const auto& run : runs) {
    if (run.metrics_log.empty()) continue;
    std::ifstream in(run.metrics_log, std::ios::binary);
    if (!in) throw Error("cannot open metrics log '" + run.metrics_log.string() + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      curves << csv_field(run.row.run_id) << ',' << j.at("step").get<std::size_t>();
      for (const auto& c : kCurveColumns) curves << ',' << format_double(j.at(c).get<double>());
      curves << '\n';
    }
  }
  if (!summary || !curves) throw Error("writing report files under '" + out_dir.string() + "' failed");
}

}  // namespace flipguard::eval
