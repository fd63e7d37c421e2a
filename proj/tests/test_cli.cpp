#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rtrace/cli.hpp"

using namespace rtrace;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_command(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string first_line(const std::string& s) { return s.substr(0, s.find('\n')); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rtrace_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    corpus_ = (dir_ / "corpus.jsonl").string();
    ASSERT_EQ(run({"synth", "--out", corpus_, "--seed", "3", "--questions", "4", "--traces-per-question", "8",
                   "--splits", "2"})
                  .code,
              cli::kExitOk);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string corpus_;
};

}  // namespace

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, cli::kExitValidation);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"bursts", "--in", corpus_, "--bogus"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"bursts"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"bursts", "--in", path("missing.jsonl")}).code, cli::kExitIo);
  EXPECT_EQ(run({"bursts", "--in", corpus_, "--out", path("no/such/dir/x.csv")}).code, cli::kExitIo);
  EXPECT_EQ(run({"bursts", "--in", corpus_, "--gap", "0"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"profiles", "--in", corpus_, "--bins", "10"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"bursts", "--in", corpus_, "--tau", "120"}).code, cli::kExitValidation);
  EXPECT_EQ(run({"filter-eval", "--in", corpus_, "--methods", "online:2000"}).code, cli::kExitValidation);

  const auto help = run({"--help"});
  EXPECT_EQ(help.code, cli::kExitOk);
  EXPECT_NE(help.out.find("sweep-gap"), std::string::npos);
  EXPECT_EQ(run({"bursts", "--help"}).code, cli::kExitOk);
}

TEST_F(Cli, InvalidCorpusIsValidationError) {
  spit(path("bad.jsonl"), "{\"question_id\": \"q\"}\n");
  const auto r = run({"summary", "--in", path("bad.jsonl")});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("error"), std::string::npos);
  spit(path("garbage.jsonl"), "not json\n");
  EXPECT_EQ(run({"summary", "--in", path("garbage.jsonl")}).code, cli::kExitValidation);
}

TEST_F(Cli, BurstsToStdoutAndFile) {
  const auto r = run({"bursts", "--tau", "20", "--gap", "500", "--in", corpus_});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_EQ(first_line(r.out), "trace_id,question_id,correct,tau,gap,n,J,K2,K3,S2,S3,rho,m_max");
  std::size_t lines = 0;
  for (char c : r.out) lines += c == '\n' ? 1 : 0;
  EXPECT_EQ(lines, 33u);
  ASSERT_EQ(run({"bursts", "--tau", "20", "--gap", "500", "--in", corpus_, "--out", path("stats.csv")}).code, 0);
  EXPECT_EQ(slurp(path("stats.csv")), r.out);
}

TEST_F(Cli, ConfigFileAndPrecedence) {
  spit(path("run.conf"), "# analysis defaults\ntau = 50\ngap=1000\nseed=7\n\n");
  const auto from_config = run({"bursts", "--config", path("run.conf"), "--in", corpus_});
  ASSERT_EQ(from_config.code, 0) << from_config.err;
  const auto second = from_config.out.substr(from_config.out.find('\n') + 1);
  EXPECT_NE(second.find(",50,1000,"), std::string::npos);

  const auto overridden = run({"bursts", "--config", path("run.conf"), "--in", corpus_, "--tau", "20"});
  ASSERT_EQ(overridden.code, 0) << overridden.err;
  const auto row = overridden.out.substr(overridden.out.find('\n') + 1);
  EXPECT_NE(row.find(",20,1000,"), std::string::npos);

  spit(path("typo.conf"), "tua=20\n");
  EXPECT_EQ(run({"bursts", "--config", path("typo.conf"), "--in", corpus_}).code, cli::kExitValidation);
  EXPECT_EQ(run({"bursts", "--config", path("absent.conf"), "--in", corpus_}).code, cli::kExitIo);
}

TEST_F(Cli, EverySubcommandWritesOutput) {
  struct Case {
    std::vector<std::string> args;
    std::string header_prefix;
  };
  const std::vector<Case> cases{
      {{"ingest", "--in", corpus_}, "{"},
      {{"summary", "--in", corpus_, "--severity", path("sev.csv")}, "split,questions,traces"},
      {{"bursts", "--in", corpus_}, "trace_id,question_id"},
      {{"timing", "--in", corpus_}, "split,"},
      {{"profiles", "--in", corpus_, "--burst-starts", path("starts.csv"), "--features", path("feat.csv")},
       "class,tau,bin,C,M,p,reported"},
      {{"filter-eval", "--in", corpus_, "--json", path("eval.json"), "--threads", "2"},
       "method,split,depth_or_limit,retained_acc_pooled,retained_acc_perq,drop_rate,word_save"},
      {{"prefix-eval", "--in", corpus_, "--depths", "2000,5000", "--sequential", "--json", path("prefix.json")},
       "method,split,depth_or_limit"},
      {{"lr-test", "--in", corpus_, "--depths", "2000,5000", "--taus", "20"}, "depth,tau,traces,lr_stat,df,p_value"},
      {{"sweep-gap", "--in", corpus_, "--class-means", path("means.csv")}, "split,tau,gap,K2_correct"},
  };
  for (const auto& c : cases) {
    const auto a = run(c.args);
    ASSERT_EQ(a.code, 0) << c.args[0] << ": " << a.err;
    EXPECT_EQ(a.out.rfind(c.header_prefix, 0), 0u) << c.args[0] << ": " << first_line(a.out);
    const auto b = run(c.args);
    EXPECT_EQ(a.out, b.out) << c.args[0] << " is not deterministic";
  }
  for (const char* f : {"sev.csv", "starts.csv", "feat.csv", "eval.json", "prefix.json", "means.csv"}) {
    EXPECT_GT(fs::file_size(path(f)), 0u) << f;
  }
  EXPECT_EQ(first_line(slurp(path("feat.csv"))).rfind("trace_id,question_id,split,correct,total_words", 0), 0u);
  const auto eval = nlohmann::json::parse(slurp(path("eval.json")));
  EXPECT_TRUE(eval.is_array() || eval.is_object());
}

TEST_F(Cli, IngestRoundTrips) {
  ASSERT_EQ(run({"ingest", "--in", corpus_, "--out", path("again.jsonl")}).code, 0);
  EXPECT_EQ(slurp(path("again.jsonl")), slurp(corpus_));
}

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run({"synth", "--out", path("a.jsonl"), "--seed", "11", "--questions", "3"}).code, 0);
  ASSERT_EQ(run({"synth", "--out", path("b.jsonl"), "--seed", "11", "--questions", "3"}).code, 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  EXPECT_EQ(run({"synth", "--questions", "0"}).code, cli::kExitValidation);
}

TEST_F(Cli, AnnotateReplaysAuditLog) {
  spit(path("raw.jsonl"),
       "{\"question_id\":\"q1\",\"trace_id\":\"a\",\"gold_answer\":\"4\",\"raw_text\":\"one two\\nthree\"}\n");
  const std::string reply = R"({"choices":[{"message":{"content":"{\"move\":\"backtrack\",\"score\":61}"}}]})";
  nlohmann::json rec0{{"trace_id", "a"}, {"segment_index", 0}, {"attempt", 1}, {"status", 200}, {"payload", reply}};
  nlohmann::json rec1 = rec0;
  rec1["segment_index"] = 1;
  spit(path("audit.jsonl"), rec0.dump() + "\n" + rec1.dump() + "\n");
  const auto r = run({"annotate", "--in", path("raw.jsonl"), "--replay", path("audit.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  const auto corpus = read_corpus_jsonl(in);
  ASSERT_EQ(corpus.traces.size(), 1u);
  for (const auto& s : corpus.traces[0].segments) EXPECT_EQ(s.backtrack_score, 61.0);
}
