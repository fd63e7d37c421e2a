#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rtrace/cli.hpp"

using namespace rtrace;
namespace fs = std::filesystem;

namespace {

const fs::path kGolden = fs::path(RTRACE_SOURCE_DIR) / "tests" / "golden";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string run_ok(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_command(std::move(args), out, err);
  EXPECT_EQ(code, cli::kExitOk) << err.str();
  return out.str();
}

const std::string kCorpus = (kGolden / "corpus.jsonl").string();

}  // namespace

TEST(Golden, Bursts) {
  EXPECT_EQ(run_ok({"bursts", "--in", kCorpus, "--tau", "20", "--gap", "500"}), slurp(kGolden / "expected/bursts.csv"));
}

TEST(Golden, Timing) { EXPECT_EQ(run_ok({"timing", "--in", kCorpus}), slurp(kGolden / "expected/timing.csv")); }

TEST(Golden, Profiles) {
  EXPECT_EQ(run_ok({"profiles", "--in", kCorpus, "--taus", "20,50", "--min-support-correct", "35",
                    "--min-support-wrong", "42"}),
            slurp(kGolden / "expected/profiles.csv"));
}

TEST(Golden, HybridFeatures) {
  const auto path = fs::temp_directory_path() / "rtrace_golden_features.csv";
  run_ok({"profiles", "--in", kCorpus, "--features", path.string(), "--out", "-"});
  EXPECT_EQ(slurp(path), slurp(kGolden / "expected/features.csv"));
  fs::remove(path);
}

TEST(Golden, HardCutoffReport) {
  EXPECT_EQ(run_ok({"filter-eval", "--in", kCorpus, "--methods", "hard:3000,hard:4500,hard:none"}),
            slurp(kGolden / "expected/eval.csv"));
}

TEST(Golden, RepeatedRunsAreIdentical) {
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(run_ok({"bursts", "--in", kCorpus}), slurp(kGolden / "expected/bursts.csv"));
    EXPECT_EQ(run_ok({"timing", "--in", kCorpus}), slurp(kGolden / "expected/timing.csv"));
  }
}
