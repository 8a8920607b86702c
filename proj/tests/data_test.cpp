#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "flipguard/data.hpp"
#include "test_support.hpp"

namespace {

using namespace flipguard;
using namespace flipguard::data;

const SplitSizes kSmall{50, 80, 80, 40};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(GoldReward, Examples) {
  EXPECT_NEAR(gold_reward({}, TokenSequence{2, 3, 16, kEos}), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(gold_reward({}, TokenSequence{24, 24, kEos}), -2.0);
  EXPECT_EQ(gold_reward({}, TokenSequence{kEos}), 0.0);
  EXPECT_EQ(gold_reward({}, TokenSequence{kBos, kBos, kEos}), 0.0);
  EXPECT_THROW(gold_reward({}, TokenSequence{2, 3}), Error);
  EXPECT_THROW(gold_reward({}, TokenSequence{}), Error);
  EXPECT_THROW(gold_reward({}, TokenSequence{2, kEos, 3, kEos}), Error);
}

TEST(GoldReward, RangeOverRandomResponses) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    TokenSequence r(static_cast<std::size_t>(rng.uniform_range(0, 12)));
    for (auto& t : r) t = static_cast<Token>(rng.uniform_range(2, 31));
    r.push_back(kEos);
    const double g = gold_reward({}, r);
    EXPECT_GE(g, -2.0);
    EXPECT_LE(g, 1.0);
  }
}

TEST(WorldSpec, Validation) {
  WorldSpec w;
  EXPECT_NO_THROW(w.validate());
  w.min_margin = 0.0;
  EXPECT_THROW(w.validate(), Error);
  w = {};
  w.harmful_weight = std::numeric_limits<double>::infinity();
  EXPECT_THROW(w.validate(), Error);
  w = {};
  w.chosen_mix = {0.5, 0.5, 0.5};
  EXPECT_THROW(w.validate(), Error);
  w = {};
  w.class_persistence = 1.0;
  EXPECT_THROW(w.validate(), Error);
}

TEST(Generate, DeterministicBytes) {
  const auto a = flipguard::testing::scratch_dir("gen-a"), b = flipguard::testing::scratch_dir("gen-b");
  save_splits(a, generate_dataset({}, kSmall, 7));
  save_splits(b, generate_dataset({}, kSmall, 7));
  for (const auto& name : kSplitNames)
    EXPECT_EQ(slurp(a / (name + ".jsonl")), slurp(b / (name + ".jsonl"))) << name;
  EXPECT_NE(generate_dataset({}, kSmall, 7), generate_dataset({}, kSmall, 8));
}

TEST(Generate, StructuralInvariants) {
  const WorldSpec world;
  const Dataset d = generate_dataset(world, kSmall, 11);
  EXPECT_EQ(d.sft.size(), kSmall.sft);
  EXPECT_EQ(d.rm.size(), kSmall.rm);
  EXPECT_EQ(d.align.size(), kSmall.align);
  EXPECT_EQ(d.test.size(), kSmall.test);
  std::set<TokenSequence> prompts;
  std::size_t total = 0;
  for (const auto* split : {&d.sft, &d.rm, &d.align, &d.test}) {
    for (const auto& ex : *split) {
      ++total;
      prompts.insert(ex.prompt);
      EXPECT_GE(ex.prompt.size(), 4u);
      EXPECT_LE(ex.prompt.size(), 8u);
      for (Token t : ex.prompt) EXPECT_EQ(token_class(t) == TokenClass::kSpecial, false);
      EXPECT_NO_THROW(check_response(ex.chosen));
      EXPECT_GE(ex.chosen.size(), 4u);
      EXPECT_LE(ex.chosen.size(), 13u);
      if (split == &d.sft) {
        EXPECT_TRUE(ex.rejected.empty());
        continue;
      }
      EXPECT_NO_THROW(check_response(ex.rejected));
      const double margin = gold_reward(ex.prompt, ex.chosen) - gold_reward(ex.prompt, ex.rejected);
      EXPECT_EQ(margin, ex.gold_margin);
      EXPECT_GE(margin, world.min_margin);
    }
  }
  EXPECT_EQ(prompts.size(), total);  // disjoint splits, no repeated prompt
}

TEST(Generate, Errors) {
  WorldSpec w;
  w.min_margin = 2.5;  // neutral-only chosen caps the margin at 2
  w.chosen_mix = {0.0, 1.0, 0.0};
  EXPECT_THROW(generate_dataset(w, kSmall, 1), Error);
  EXPECT_THROW(generate_dataset({}, SplitSizes{0, 1, 1, 1}, 1), Error);
}

// Independent oracle: parse the written JSONL with a regex instead of the JSON
// library and score responses with a separately written weight table.
TEST(Generate, ChosenOutscoresRejectedFromFiles) {
  const auto dir = flipguard::testing::scratch_dir("gen-oracle");
  save_splits(dir, generate_dataset({}, SplitSizes{20, 300, 300, 200}, 5));
  auto score = [](const std::string& csv) {
    std::vector<int> ids;
    std::stringstream ss(csv);
    for (std::string tok; std::getline(ss, tok, ',');) ids.push_back(std::stoi(tok));
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) s += ids[i] <= 15 ? 1.0 : ids[i] <= 23 ? 0.0 : -2.0;
    return ids.size() > 1 ? s / static_cast<double>(ids.size() - 1) : 0.0;
  };
  const std::regex re(R"re("chosen":\[([0-9,]*)\],"rejected":\[([0-9,]*)\])re");
  for (const char* split : {"rm", "align", "test"}) {
    std::ifstream in(dir / (std::string(split) + ".jsonl"));
    double chosen = 0.0, rejected = 0.0;
    int n = 0;
    for (std::string line; std::getline(in, line); ++n) {
      std::smatch m;
      ASSERT_TRUE(std::regex_search(line, m, re)) << line;
      chosen += score(m[1]);
      rejected += score(m[2]);
    }
    EXPECT_GT(n, 0);
    EXPECT_GT(chosen / n, rejected / n) << split;
  }
}

TEST(DatasetIo, RoundTrip) {
  const auto dir = flipguard::testing::scratch_dir("io");
  const Dataset d = generate_dataset({}, kSmall, 21);
  save_splits(dir, d);
  EXPECT_EQ(load_splits(dir), d);
  const std::string line = slurp(dir / "rm.jsonl").substr(0, slurp(dir / "rm.jsonl").find('\n'));
  EXPECT_TRUE(line.starts_with(R"({"prompt":[)")) << line;
  EXPECT_NE(line.find(R"(,"gold_margin":)"), std::string::npos);
}

TEST(DatasetIo, RejectsOutOfVocabWithLineNumber) {
  const auto dir = flipguard::testing::scratch_dir("io-bad");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"prompt":[2,3,4,5],"chosen":[2,1],"rejected":[24,1],"gold_margin":3.0})" << '\n';
    out << R"({"prompt":[2,99,4,5],"chosen":[2,1],"rejected":[24,1],"gold_margin":3.0})" << '\n';
  }
  try {
    load_dataset(dir / "bad.jsonl");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos) << e.what();
  }
}

TEST(DatasetIo, MalformedLines) {
  const auto dir = flipguard::testing::scratch_dir("io-malformed");
  const std::vector<std::string> bad{
      R"({"prompt":[2,3],"chosen":[2,1],"rejected":[24,1]})",
      R"({"prompt":[2,3],"chosen":[2],"rejected":[24,1],"gold_margin":1})",
      R"({"prompt":[2,1],"chosen":[2,1]})",
      R"({"prompt":[2,3],"chosen":[2.5,1]})",
      R"({"prompt":[2,3],)",
      R"([1,2,3])",
  };
  for (const auto& text : bad) {
    {
      std::ofstream out(dir / "x.jsonl");
      out << "\n" << text << "\n";
    }
    try {
      load_dataset(dir / "x.jsonl");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find("x.jsonl:2:"), std::string::npos) << e.what();
    }
  }
}

TEST(DatasetIo, CrlfParsesLikeLf) {
  const auto dir = flipguard::testing::scratch_dir("io-crlf");
  const Dataset d = generate_dataset({}, kSmall, 4);
  save_dataset(dir / "lf.jsonl", d.rm);
  std::string text = slurp(dir / "lf.jsonl");
  std::string crlf;
  for (char c : text) crlf += c == '\n' ? std::string("\r\n") : std::string(1, c);
  {
    std::ofstream out(dir / "crlf.jsonl", std::ios::binary);
    out << crlf;
  }
  EXPECT_EQ(load_dataset(dir / "crlf.jsonl"), load_dataset(dir / "lf.jsonl"));
  EXPECT_EQ(load_dataset(dir / "crlf.jsonl"), d.rm);
}

}  // namespace
