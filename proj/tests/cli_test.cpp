#include "zeg/experiment.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

namespace zeg {
namespace {

namespace fs = std::filesystem;

struct Result {
  int status = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(ZEG_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.output += buf.data();
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "zeg_cli_test"; }
  static std::string world() { return (root() / "world").string(); }
  static std::string out(const std::string& name) { return (root() / name).string(); }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    const Result r = run("gen-data --out " + world() + " --train 12 --test 6 --pretrain-iters 10 --pretrain-samples 32");
    ASSERT_EQ(r.status, 0) << r.output;
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static KeyValues report(const std::string& dir) { return parse_text(read_file(dir + "/report.txt"), "report"); }
};

TEST_F(Cli, GenDataWritesWorldDirectory) {
  for (const char* f : {"world.txt", "train-inductive.zegd", "train-transductive.zegd", "train-supervised.zegd",
                        "test.zegd", "embeddings.zege", "encoder.zegw"}) {
    EXPECT_TRUE(fs::exists(fs::path(world()) / f)) << f;
  }
  const KeyValues kv = parse_text(read_file(world() + "/world.txt"), "world");
  EXPECT_EQ(kv.at("pretrain.iters"), "10");
  EXPECT_EQ(kv.at("data.train_samples"), "12");
  const WorldBundle w = load_world(world());
  EXPECT_EQ(w.test.size(), 6);
  EXPECT_EQ(w.bank.unseen_classes().size(), 3u);
}

TEST_F(Cli, InductiveTrainEmitsReport) {
  const Result r = run("train --world " + world() + " --out " + out("ind") + " --iters 4 --batch 2 --mode inductive");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("mIoU(U)"), std::string::npos);
  const KeyValues kv = report(out("ind"));
  for (const char* k : {"eval.pacc", "eval.miou.seen", "eval.miou.unseen", "eval.hiou", "run.status"}) {
    EXPECT_TRUE(kv.count(k)) << k;
  }
  EXPECT_EQ(kv.at("run.status"), "ok");
  EXPECT_EQ(kv.at("config.mode"), "inductive");
  EXPECT_TRUE(fs::exists(out("ind") + "/checkpoint.zegw"));
  EXPECT_TRUE(fs::exists(out("ind") + "/iou.csv"));
  EXPECT_EQ(read_history(out("ind") + "/history.txt").back().iter, 4);
}

TEST_F(Cli, UnseenOnlyModeSelfTrains) {
  const Result r = run("train --world " + world() + " --out " + out("dd") +
                       " --iters 4 --batch 2 --log-every 1 --mode transductive-unseen-only");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(report(out("dd")).at("config.mode"), "transductive-unseen-only");
  const History h = read_history(out("dd") + "/history.txt");
  ASSERT_EQ(h.size(), 4u);
  EXPECT_EQ(h[1].phase, "seen");
  EXPECT_EQ(h[2].phase, "self-train");
}

TEST_F(Cli, ZeroLearningRateReportsInitialWeights) {
  const Result r = run("train --world " + world() + " --out " + out("lr0") + " --iters 3 --batch 2 --lr 0 --wd 0 --seed 4");
  ASSERT_EQ(r.status, 0) << r.output;
  const RunReport got = load_report(out("lr0") + "/report.txt");

  const WorldBundle w = load_world(world());
  TrainConfig cfg;
  cfg.seed = 4;
  Encoder<float> encoder(w.encoder, 0);
  assign_weights(w.encoder_weights, encoder.parameters());
  SegModel<float> model(model_config(cfg, w.encoder, w.bank.dim()), std::move(encoder), cfg.seed);
  const Evaluation initial = evaluate(model, w.test, w.bank);
  ASSERT_TRUE(got.eval);
  EXPECT_NEAR(got.eval->pixel_accuracy, initial.report.pixel_accuracy, 1e-12);
  EXPECT_NEAR(got.eval->miou_seen, initial.report.miou_seen, 1e-12);
  EXPECT_NEAR(got.eval->miou_unseen, initial.report.miou_unseen, 1e-12);
  EXPECT_NEAR(got.eval->hiou, initial.report.hiou, 1e-12);
}

TEST_F(Cli, EvalReproducesTrainReport) {
  ASSERT_EQ(run("train --world " + world() + " --out " + out("ev") + " --iters 3 --batch 2").status, 0);
  const Result r = run("eval --checkpoint " + out("ev") + "/checkpoint.zegw --world " + world() + " --out " +
                       out("ev") + "/eval.txt");
  ASSERT_EQ(r.status, 0) << r.output;
  const RunReport trained = load_report(out("ev") + "/report.txt");
  const RunReport evaluated = load_report(out("ev") + "/eval.txt");
  ASSERT_TRUE(trained.eval && evaluated.eval);
  EXPECT_EQ(*trained.eval, *evaluated.eval);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  const std::string cfg = out("cfg.txt");
  write_file_atomic(cfg, "iters=5\nregime=fix\nloss=el\n");
  const Result r = run("train --world " + world() + " --out " + out("cfg") + " --config " + cfg + " --iters 2 --batch 2");
  ASSERT_EQ(r.status, 0) << r.output;
  const KeyValues kv = report(out("cfg"));
  EXPECT_EQ(kv.at("config.iters"), "2");
  EXPECT_EQ(kv.at("config.regime"), "fix");
  EXPECT_EQ(kv.at("config.loss"), "el");
}

TEST_F(Cli, BadInputsFailWithMessage) {
  Result r = run("train --world " + world() + " --out " + out("bad") + " --regime frozen");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("frozen"), std::string::npos) << r.output;
  r = run("train --world " + world() + " --out " + out("bad") + " --iters -1");
  EXPECT_NE(r.status, 0);
  r = run("train --world " + out("missing") + " --out " + out("bad"));
  EXPECT_NE(r.status, 0);
  r = run("plan table9");
  EXPECT_NE(r.status, 0);
}

TEST_F(Cli, PlanAndAblate) {
  const Result p = run("plan table4");
  ASSERT_EQ(p.status, 0) << p.output;
  const ExperimentPlan table4 = parse_plan(p.output);
  EXPECT_EQ(table4.runs.size(), 12u);
  EXPECT_EQ(table4.seeds, (std::vector<std::uint64_t>{0, 1, 2}));

  const std::string plan = out("plan.txt");
  write_file_atomic(plan, "seeds=0\ndefault.iters=2\ndefault.batch=2\nrun fix: regime=fix loss=el query-format=t\n"
                          "run full: regime=dpt loss=nel-plus query-format=cat-tg-t\n");
  const Result a = run("ablate --plan " + plan + " --world " + world() + " --out " + out("abl"));
  ASSERT_EQ(a.status, 0) << a.output;
  const std::string table = read_file(out("abl") + "/table.txt");
  EXPECT_NE(table.find("fix"), std::string::npos);
  EXPECT_NE(table.find("full"), std::string::npos);
  EXPECT_TRUE(fs::exists(out("abl") + "/table.csv"));
}

}  // namespace
}  // namespace zeg
