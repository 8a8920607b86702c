#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flipguard/cli.hpp"
#include "test_support.hpp"

namespace {

using namespace flipguard;
using flipguard::testing::scratch_dir;
namespace fs = std::filesystem;

struct Outcome {
  int code;
  std::string out, err;
  std::vector<std::string> lines() const {
    std::vector<std::string> v;
    std::stringstream s(out);
    for (std::string l; std::getline(s, l);) v.push_back(l);
    return v;
  }
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "flipguard");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::execute(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Config ---------------------------------------------------------------------

TEST(LoadConfig, EmptyFileGivesDefaults) {
  const auto dir = scratch_dir("cfg-empty");
  write(dir / "empty.txt", "");
  const auto c = config::load_config(dir / "empty.txt");
  EXPECT_EQ(c.real("gamma"), 0.01);
  EXPECT_EQ(c.real("epsilon"), 0.1);
  EXPECT_EQ(c.real("beta"), 0.1);
  EXPECT_EQ(c.real("dead_zone"), 0.1);
  EXPECT_EQ(c.integer("steps"), 2000u);
  EXPECT_EQ(c, config::Config{});
}

TEST(LoadConfig, OverridesWin) {
  const auto dir = scratch_dir("cfg-override");
  write(dir / "c.txt", "# a comment\ngamma = 0.005   # trailing\n\n  epsilon=0.05\r\n");
  const std::vector<std::string> overrides{"gamma=0.01"};
  const auto c = config::load_config(dir / "c.txt", overrides);
  EXPECT_EQ(c.real("gamma"), 0.01);
  EXPECT_EQ(c.real("epsilon"), 0.05);
  EXPECT_EQ(config::load_config(dir / "c.txt").real("gamma"), 0.005);
}

TEST(LoadConfig, UnknownKeySuggestsNearest) {
  const auto dir = scratch_dir("cfg-unknown");
  write(dir / "c.txt", "steps = 10\ngama = 0.01\n");
  try {
    config::load_config(dir / "c.txt");
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'gama'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'gamma'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("c.txt:2"), std::string::npos) << msg;
  }
  const std::vector<std::string> o{"learning_rat=1"};
  EXPECT_THROW(config::load_config({}, o), Error);
}

TEST(LoadConfig, TypeMismatchNamesExpectedType) {
  auto expect = [](std::string assignment, std::string fragment) {
    const std::vector<std::string> o{assignment};
    try {
      config::load_config({}, o);
      ADD_FAILURE() << assignment;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect("gamma=abc", "real number");
  expect("steps=1.5", "integer");
  expect("steps=-3", "integer");
  expect("dump_triggers=maybe", "true or false");
  expect("method=rlhf", "sft|rm|dpo|ppo");
  expect("gamma", "key=value");
}

TEST(LoadConfig, CanonicalTextRoundTrips) {
  config::Config c;
  c.set("gamma", "0.0050");
  c.set("method", "ppo");
  EXPECT_EQ(c.text("gamma"), "0.005");
  const auto dir = scratch_dir("cfg-roundtrip");
  write(dir / "c.txt", c.to_text());
  EXPECT_EQ(config::load_config(dir / "c.txt"), c);
}

// Commands -------------------------------------------------------------------

const std::vector<std::string> kSmallData{"--n-sft", "40", "--n-rm", "40", "--n-align", "40", "--n-test", "20"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct Pipeline {
  fs::path root, data, sft;
};

const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline out;
    out.root = scratch_dir("cli-pipeline");
    const auto d = run(with({"gen-data", "--seed", "7", "--out", out.root.string()}, kSmallData));
    EXPECT_EQ(d.code, 0) << d.err;
    out.data = d.lines().at(0);
    const auto s = run({"sft", "--data", out.data.string(), "--steps", "20", "--out", out.root.string()});
    EXPECT_EQ(s.code, 0) << s.err;
    out.sft = s.lines().at(0);
    return out;
  }();
  return p;
}

TEST(Cli, GenDataIsByteIdentical) {
  const auto a = scratch_dir("cli-gen-a"), b = scratch_dir("cli-gen-b");
  const auto ra = run(with({"gen-data", "--seed", "7", "--out", a.string()}, kSmallData));
  const auto rb = run(with({"gen-data", "--seed", "7", "--out", b.string()}, kSmallData));
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(fs::path(ra.lines()[0]).filename(), fs::path(rb.lines()[0]).filename());
  EXPECT_TRUE(fs::path(ra.lines()[0]).filename().string().starts_with("gen-data-7-"));
  for (const char* split : {"sft.jsonl", "rm.jsonl", "align.jsonl", "test.jsonl"})
    EXPECT_EQ(slurp(fs::path(ra.lines()[0]) / split), slurp(fs::path(rb.lines()[0]) / split)) << split;
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto root = scratch_dir("cli-env");
  ::setenv("FLIPGUARD_OUT", root.string().c_str(), 1);
  const auto r = run(with({"gen-data", "--seed", "3"}, kSmallData));
  ::unsetenv("FLIPGUARD_OUT");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(fs::path(r.lines()[0]).parent_path(), root);
  EXPECT_TRUE(fs::is_regular_file(fs::path(r.lines()[0]) / "manifest.json"));
}

TEST(Cli, GammaZeroMatchesConstraintOff) {
  const auto& p = pipeline();
  const std::vector<std::string> base{"align", "--data", p.data.string(), "--sft", p.sft.string(), "--method",
                                      "dpo",   "--steps", "6", "--out", p.root.string()};
  const auto off = run(with(base, {"--constraint", "none"}));
  const auto zero = run(with(base, {"--constraint", "flipguard", "--gamma", "0"}));
  ASSERT_EQ(off.code, 0) << off.err;
  ASSERT_EQ(zero.code, 0) << zero.err;
  EXPECT_NE(off.lines()[0], zero.lines()[0]);
  EXPECT_EQ(slurp(fs::path(off.lines()[0]) / "metrics.jsonl"), slurp(fs::path(zero.lines()[0]) / "metrics.jsonl"));
}

TEST(Cli, AlignRefusesWithoutSftCheckpoint) {
  const auto& p = pipeline();
  const auto missing = run({"align", "--data", p.data.string(), "--out", p.root.string()});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("Usage"), std::string::npos);
  const auto bogus = run({"align", "--data", p.data.string(), "--sft", (p.root / "nowhere").string(), "--out",
                          p.root.string()});
  EXPECT_EQ(bogus.code, 1);
  EXPECT_EQ(std::count(bogus.err.begin(), bogus.err.end(), '\n'), 1);
  const auto j = nlohmann::json::parse(bogus.err);
  EXPECT_EQ(j.at("command"), "align");
  EXPECT_NE(j.at("error").get<std::string>().find("--sft"), std::string::npos);
  const auto before = std::distance(fs::directory_iterator(p.root), fs::directory_iterator{});
  const auto wrong = run({"align", "--data", p.data.string(), "--sft", p.data.string(), "--out", p.root.string()});
  EXPECT_EQ(wrong.code, 1);
  EXPECT_NE(wrong.err.find("policy.fgck"), std::string::npos) << wrong.err;
  EXPECT_EQ(std::distance(fs::directory_iterator(p.root), fs::directory_iterator{}), before);
}

TEST(Cli, BadConfigIsAnError) {
  const auto& p = pipeline();
  const auto r = run({"align", "--data", p.data.string(), "--sft", p.sft.string(), "--set", "gama=0.1", "--out",
                      p.root.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("did you mean 'gamma'"), std::string::npos) << r.err;
  const auto flag = run({"align", "--data", p.data.string(), "--sft", p.sft.string(), "--gama", "0.1"});
  EXPECT_EQ(flag.code, 2);
  EXPECT_NE(flag.err.find("did you mean 'gamma'"), std::string::npos) << flag.err;
  EXPECT_EQ(run({"align", "--data", p.data.string(), "--sft", p.sft.string(), "--method", "sft", "--out",
                 p.root.string()})
                .code,
            1);
}

TEST(Cli, RerunFromManifestIsByteIdentical) {
  const auto& p = pipeline();
  const auto a = run({"align", "--data", p.data.string(), "--sft", p.sft.string(), "--method", "ppo", "--constraint",
                      "flipguard", "--steps", "3", "--dump-triggers", "true", "--out", p.root.string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const fs::path aligned = a.lines()[0];
  const auto e = run({"eval", "--data", p.data.string(), "--sft", p.sft.string(), "--policy", aligned.string(),
                      "--out", p.root.string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const fs::path evaluated = e.lines()[0];
  const auto r = run({"report", "--runs", evaluated.string(), "--out", p.root.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path report = r.lines()[0];

  const auto other = scratch_dir("cli-rerun");
  for (const auto& [dir, files] : std::vector<std::pair<fs::path, std::vector<std::string>>>{
           {aligned, {"metrics.jsonl", "policy.fgck", "triggers.jsonl", "config.txt"}},
           {evaluated, {"records.jsonl", "stats.json"}},
           {report, {"summary.csv", "curves.csv"}}}) {
    const auto again = run({"rerun", "--manifest", (dir / "manifest.json").string(), "--out", other.string()});
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(fs::path(again.lines()[0]).filename(), dir.filename());
    for (const auto& f : files) EXPECT_EQ(slurp(dir / f), slurp(fs::path(again.lines()[0]) / f)) << dir << " " << f;
  }
  const auto manifest = cli::load_manifest(aligned / "manifest.json");
  EXPECT_EQ(manifest.command, "align");
  EXPECT_EQ(manifest.config.text("constraint"), "flipguard");
  EXPECT_EQ(manifest.inputs.at("sft").front(), p.sft.string());
}

TEST(Cli, SweepWritesOneRunPerGridPointAndAReport) {
  const auto& p = pipeline();
  const auto root = scratch_dir("cli-sweep");
  const auto r = run({"sweep", "--data", p.data.string(), "--sft", p.sft.string(), "--method", "dpo", "--constraint",
                      "flipguard", "--steps", "1", "--gamma", "0,0.005,0.01,0.02,0.05", "--seeds", "0..4", "--out",
                      root.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = r.lines();
  ASSERT_EQ(lines.size(), 26u);
  std::size_t manifests = 0;
  for (const auto& e : fs::directory_iterator(root))
    if (e.path().filename().string().starts_with("sweep-")) manifests += fs::is_regular_file(e.path() / "manifest.json");
  EXPECT_EQ(manifests, 25u);
  const fs::path report = lines.back();
  std::ifstream summary(report / "summary.csv");
  std::size_t rows = 0;
  for (std::string l; std::getline(summary, l);) ++rows;
  EXPECT_EQ(rows, 26u);
  EXPECT_EQ(std::distance(fs::directory_iterator(report / "scatter"), fs::directory_iterator{}), 25);
}

TEST(Cli, SeedLists) {
  EXPECT_EQ(cli::parse_seeds("0..4"), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(cli::parse_seeds("3,1"), (std::vector<std::uint64_t>{3, 1}));
  EXPECT_THROW(cli::parse_seeds("4..0"), Error);
  EXPECT_THROW(cli::parse_seeds("a"), Error);
}

}  // namespace
