#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aegis/train/trainer.hpp"
#include "support/tiny.hpp"

namespace fs = std::filesystem;
using namespace aegis;

namespace {

struct Result {
  int code;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("aegis_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    ::setenv("AEGIS_RUN_ROOT", (root_ / "runs").c_str(), 1);
    fixtures::tiny_config().save(root_ / "tiny.ini");
  }
  void TearDown() override { fs::remove_all(root_); }

  Result run(const std::string& args) const {
    const auto log = root_ / "out.txt";
    const std::string cmd = std::string("\"") + AEGIS_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WEXITSTATUS(status), ss.str()};
  }

  std::string cfg() const { return "-c \"" + (root_ / "tiny.ini").string() + "\""; }
  fs::path world() const { return root_ / "runs" / "world-0"; }

  fs::path root_;
};

}  // namespace

TEST_F(Cli, EndToEndWorkflow) {
  auto r = run("pretrain " + cfg());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("holdout sha256"), std::string::npos);
  for (auto f : {"vlm.ckpt", "holdout.bin", "config.ini", "pretrain_curve.csv"})
    EXPECT_TRUE(fs::exists(world() / "pretrain" / f)) << f;

  r = run("anchor build " + cfg());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(world() / "anchor" / "anchor.bin"));

  for (auto c : {"naive", "aegis"}) {
    r = run(std::string("train --condition ") + c + " " + cfg());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(world() / "seed-0" / c / "summary.json")) << c;
  }
  const auto naive = world() / "seed-0" / "naive", aegis = world() / "seed-0" / "aegis";

  r = run("compare \"" + naive.string() + "\" \"" + aegis.string() + "\" -o \"" + (root_ / "cmp.csv").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("aegis"), std::string::npos);
  EXPECT_TRUE(fs::exists(root_ / "cmp.csv"));

  r = run("diag summarize \"" + (aegis / "metrics.csv").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("throttle"), std::string::npos);

  r = run("diag spectrum " + cfg() + " --samples 4 -k 3 -o \"" + (root_ / "spec.csv").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("kappa_3"), std::string::npos);

  r = run("diag conflict " + cfg() + " --param llm.layers.0.mlp.down_proj.weight --samples 4");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("mean |cos|"), std::string::npos);

  r = run("diag drift " + cfg() + " --samples 16");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("naive mean"), std::string::npos);
}

TEST_F(Cli, SeedOverridesAndRunLayout) {
  ASSERT_EQ(run("pretrain " + cfg() + " --world-seed 3").code, 0);
  EXPECT_TRUE(fs::exists(root_ / "runs" / "world-3" / "pretrain" / "vlm.ckpt"));
  auto r = run("train --condition ewc " + cfg() + " --world-seed 3 --seed 2 -s run.steps=4 -s run.eval_every=2");
  ASSERT_EQ(r.code, 0) << r.out;
  auto s = train::compare_runs({root_ / "runs" / "world-3" / "seed-2" / "ewc"}).summaries.at(0);
  EXPECT_EQ(s.seed, 2u);
  EXPECT_EQ(s.world_seed, 3u);
  EXPECT_EQ(s.steps, 4u);
}

TEST_F(Cli, ErrorsExitNonZero) {
  EXPECT_NE(run("train --condition naive " + cfg()).code, 0);
  EXPECT_NE(run("train --condition frozen " + cfg()).code, 0);
  EXPECT_NE(run("train " + cfg() + " -s optim.nope=1").code, 0);
  EXPECT_NE(run("compare \"" + (root_ / "missing").string() + "\"").code, 0);
  EXPECT_NE(run("").code, 0);
}
