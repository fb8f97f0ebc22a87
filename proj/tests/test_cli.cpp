#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "test_support.hpp"

using namespace clipin::test;
namespace fs = std::filesystem;

namespace {

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

const std::string kTiny = "--dims tiny --n-samples 48 --batch-size 8 ";

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  const auto help = run_cli("--help");
  EXPECT_EQ(help.exit_code, 0);
  EXPECT_NE(help.output.find("gen-data"), std::string::npos);
  EXPECT_EQ(run_cli("train --help").exit_code, 0);
  EXPECT_EQ(run_cli("train --no-such-flag").exit_code, 1);
  EXPECT_EQ(run_cli("").exit_code, 1);
  EXPECT_EQ(run_cli("train").exit_code, 1);  // --out is required
}

TEST(Cli, InvalidValuesExitWithTwo) {
  const fs::path dir = scratch_dir("cli_bad");
  const auto r = run_cli("gen-data --out " + quoted(dir) + " --noise-sigma -1");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find("InvalidConfig"), std::string::npos);
  EXPECT_EQ(run_cli("inspect-ckpt " + quoted(dir / "none.clpn")).exit_code, 2);
}

TEST(Cli, GenDataIsDeterministic) {
  const fs::path a = scratch_dir("cli_gen_a"), b = scratch_dir("cli_gen_b"), c = scratch_dir("cli_gen_c");
  const auto ra = run_cli("gen-data --seed 3 --n 20 --out " + quoted(a));
  const auto rb = run_cli("gen-data --seed 3 --n 20 --out " + quoted(b));
  const auto rc = run_cli("gen-data --seed 4 --n 20 --out " + quoted(c));
  ASSERT_EQ(ra.exit_code, 0) << ra.output;
  EXPECT_EQ(ra.output, rb.output);
  EXPECT_NE(ra.output, rc.output);
  EXPECT_NE(ra.output.find("samples\t20"), std::string::npos);
  EXPECT_EQ(read_file(a / "pairs.tsv"), read_file(b / "pairs.tsv"));
  EXPECT_EQ(read_file(a / "images" / "s000019.ppm"), read_file(b / "images" / "s000019.ppm"));
  const auto manifest = nlohmann::json::parse(read_file(a / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "gen-data");
  EXPECT_TRUE(manifest.contains("digest"));
}

TEST(Cli, TrainInspectAndEvaluate) {
  const fs::path dir = scratch_dir("cli_train");
  std::ofstream(dir / "run.cfg") << "total_steps = 3\nlr = 1e-3\n";
  const auto train = run_cli("train --quiet " + kTiny + "--config " + quoted(dir / "run.cfg") +
                             " --lr 2e-3 --out " + quoted(dir / "run"));
  ASSERT_EQ(train.exit_code, 0) << train.output;
  EXPECT_NE(train.output.find("steps\t3"), std::string::npos);
  const std::string config = read_file(dir / "run" / "config.txt");
  EXPECT_NE(config.find("lr = 0.002\n"), std::string::npos);  // flag beats file
  EXPECT_NE(config.find("total_steps = 3\n"), std::string::npos);
  const std::string log = read_file(dir / "run" / "train_log.tsv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);

  const auto inspect = run_cli("inspect-ckpt " + quoted(dir / "run" / "final.clpn"));
  ASSERT_EQ(inspect.exit_code, 0) << inspect.output;
  EXPECT_NE(inspect.output.find("step\t3"), std::string::npos);
  EXPECT_NE(inspect.output.find("online.image_encoder.fc1.weight\t[768, 6]"), std::string::npos) << inspect.output;
  EXPECT_NE(inspect.output.find("[config]\n"), std::string::npos);
  EXPECT_NE(inspect.output.find("lr = 0.002"), std::string::npos);

  const auto probe = run_cli("eval-probe --ckpt " + quoted(dir / "run" / "final.clpn") + " --branch pre --out " +
                             quoted(dir / "probe"));
  ASSERT_EQ(probe.exit_code, 0) << probe.output;
  EXPECT_EQ(probe.output.rfind("mean_auc\t", 0), 0u);
  EXPECT_TRUE(fs::exists(dir / "probe" / "eval_report.jsonl"));
  const auto zsc = run_cli("eval-zsc --random-init " + kTiny + "--out " + quoted(dir / "zsc"));
  ASSERT_EQ(zsc.exit_code, 0) << zsc.output;
  EXPECT_TRUE(fs::exists(dir / "zsc" / "zsc_report.tsv"));
}

TEST(Cli, ResumeMatchesStraightRun) {
  const fs::path dir = scratch_dir("cli_resume");
  ASSERT_EQ(run_cli("train --quiet " + kTiny + "--total-steps 6 --out " + quoted(dir / "full")).exit_code, 0);
  ASSERT_EQ(run_cli("train --quiet " + kTiny + "--total-steps 3 --out " + quoted(dir / "part")).exit_code, 0);
  const auto resumed = run_cli("train --quiet " + kTiny + "--total-steps 6 --resume " +
                               quoted(dir / "part" / "final.clpn") + " --out " + quoted(dir / "part"));
  ASSERT_EQ(resumed.exit_code, 0) << resumed.output;
  EXPECT_EQ(read_file(dir / "full" / "train_log.tsv"), read_file(dir / "part" / "train_log.tsv"));
  EXPECT_EQ(read_file(dir / "full" / "final.clpn"), read_file(dir / "part" / "final.clpn"));
}

TEST(Cli, GradCheckAndAblate) {
  const fs::path dir = scratch_dir("cli_gc");
  const auto gc = run_cli("grad-check --dims tiny --trials 1 --out " + quoted(dir / "gc"));
  ASSERT_EQ(gc.exit_code, 0) << gc.output;
  for (const char* kind : {"contrastive", "inter", "intra", "total_fixed", "total_learnable"}) {
    EXPECT_NE(gc.output.find(kind), std::string::npos) << kind;
  }
  const auto ab = run_cli("ablate " + kTiny + "--total-steps 2 --out " + quoted(dir / "ab"));
  ASSERT_EQ(ab.exit_code, 0) << ab.output;
  const std::string tsv = read_file(dir / "ab" / "ablation.tsv");
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 5);
  EXPECT_TRUE(fs::exists(dir / "ab" / "row0_cl" / "final.clpn"));
}
