#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"

namespace {

namespace fs = std::filesystem;

int cli(const std::string& args, const fs::path& dir) {
  const std::string cmd = std::string(HETSERVE_CLI) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                          (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A shrunken copy of the shipped scenario: fewer cards, a short window, the
// first 400 queries.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fixtures::temp_dir("cli");
    auto spec = nlohmann::json::parse(slurp(fs::path(HETSERVE_SCENARIO_DIR) / "cluster.json"));
    for (auto& g : spec["gpus"]) g["count"] = 2;
    spec["simulation"]["duration_s"] = 10;
    std::ofstream(dir_ / "cluster.json") << spec.dump(2);
    std::ifstream in(fs::path(HETSERVE_SCENARIO_DIR) / "trace.jsonl");
    std::ofstream out(dir_ / "trace.jsonl");
    std::string line;
    for (int i = 0; i < 400 && std::getline(in, line); ++i) out << line << "\n";
  }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  static inline fs::path dir_;
};

}  // namespace

TEST_F(CliPipeline, EndToEndExitCodes) {
  ASSERT_EQ(cli("perfdb build --spec " + path("cluster.json") + " --trace " + path("trace.jsonl") +
                    " --loads 2:8:2 --threads 1 --out " + path("db.bin"),
                dir_),
            0)
      << slurp(dir_ / "stderr.txt");
  ASSERT_EQ(cli("candidates gen --db " + path("db.bin") + " --budget 10 --qps 8 --out " + path("cands.json"), dir_), 0)
      << slurp(dir_ / "stderr.txt");
  const std::string optimize = "optimize --db " + path("db.bin") + " --cands " + path("cands.json") + " --trace " +
                               path("trace.jsonl") + " --qps 8 --budget 10 --iters 3 --seed 1 --fit-starts 2 --out ";
  ASSERT_EQ(cli(optimize + path("pareto.json"), dir_), 0) << slurp(dir_ / "stderr.txt");
  ASSERT_EQ(cli(optimize + path("pareto2.json"), dir_), 0);
  EXPECT_EQ(slurp(dir_ / "pareto.json"), slurp(dir_ / "pareto2.json"));

  const std::string select = "select --pareto " + path("pareto.json") + " --cands " + path("cands.json");
  ASSERT_EQ(cli(select + " --lmax 1000 --out " + path("plan.json"), dir_), 0) << slurp(dir_ / "stderr.txt");
  EXPECT_EQ(cli(select + " --qmin 1.01 --out " + path("x.json"), dir_), 3);
  EXPECT_EQ(cli(select + " --qmin 0.5 --lmax 3 --out " + path("x.json"), dir_), 64);
  EXPECT_EQ(cli(select + " --out " + path("x.json"), dir_), 64);

  ASSERT_EQ(cli("replay --plan " + path("plan.json") + " --trace " + path("trace.jsonl") + " --spec " +
                    path("cluster.json") + " --out " + path("replay.json"),
                dir_),
            0)
      << slurp(dir_ / "stderr.txt");
  const auto plan = nlohmann::json::parse(slurp(dir_ / "plan.json"));
  const auto rep = nlohmann::json::parse(slurp(dir_ / "replay.json"));
  EXPECT_EQ(rep["Q"], plan["Q"]);

  // the plan was made for the shrunken spec
  EXPECT_EQ(cli("replay --plan " + path("plan.json") + " --trace " + path("trace.jsonl") + " --spec " +
                    std::string(HETSERVE_SCENARIO_DIR) + "/cluster.json",
                dir_),
            2);
}

TEST_F(CliPipeline, ErrorExitCodes) {
  EXPECT_EQ(cli("", dir_), 64);
  EXPECT_EQ(cli("perfdb build --spec " + path("absent.json") + " --trace " + path("trace.jsonl") + " --out " +
                    path("x.bin"),
                dir_),
            2);
  EXPECT_EQ(cli("perfdb build --spec " + path("cluster.json") + " --trace " + path("trace.jsonl") +
                    " --loads 2-8 --out " + path("x.bin"),
                dir_),
            64);
  // the large model does not fit one 32 GB card
  EXPECT_EQ(cli("simulate --spec " + path("cluster.json") + " --model large --gpu rtx5090 --n 1 --tp 1 --pp 1 --trace " +
                    path("trace.jsonl") + " --qps 2",
                dir_),
            2);
  EXPECT_NE(slurp(dir_ / "stderr.txt").find("memory"), std::string::npos);
  EXPECT_EQ(cli("simulate --spec " + path("cluster.json") + " --model small --gpu h100 --n 1 --tp 1 --pp 1 --trace " +
                    path("trace.jsonl") + " --qps 2",
                dir_),
            0);
  EXPECT_NE(slurp(dir_ / "stdout.txt").find("p95"), std::string::npos);
}
