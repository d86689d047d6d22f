#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s2diff/clbf.hpp"
#include "s2diff/cli.hpp"
#include "s2diff/run_config.hpp"
#include "s2diff/training.hpp"

using namespace s2diff;
namespace fs = std::filesystem;

namespace
{

struct Result
{
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args)
{
  args.insert(args.begin(), "s2diff");
  std::vector<const char *> argv;
  for (const auto & a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

const std::vector<std::string> kTiny{"--set", "train.epochs=1",
                                     "--set", "train.batch_initial_states=2",
                                     "--set", "train.grad_steps_per_epoch=3",
                                     "--set", "train.minibatch_size=8",
                                     "--set", "train.hidden_layers=8,8",
                                     "--set", "train.metrics_violation_states=20",
                                     "--set", "sampler.num_candidates=8",
                                     "--set", "sampler.diffusion_steps=3",
                                     "--set", "eval.num_rollouts=2",
                                     "--set", "eval.episode_steps=5",
                                     "--set", "eval.violation_states=50"};

class Cli : public ::testing::Test
{
protected:
  fs::path root;

  void SetUp() override
  {
    root = fs::temp_directory_path() /
           ("s2diff_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    unsetenv("S2DIFF_OUT");
  }

  void TearDown() override
  {
    unsetenv("S2DIFF_OUT");
    fs::remove_all(root);
  }

  Result train(const fs::path & out, std::vector<std::string> extra = {})
  {
    std::vector<std::string> args{"--out", out.string(), "train", "-s", "pendulum"};
    args.insert(args.end(), kTiny.begin(), kTiny.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }
};

} // namespace

TEST_F(Cli, ConfigErrorsExitWithTwo)
{
  EXPECT_EQ(run({"train"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "-s", "no_such_system"}).code, kExitConfig);
  const auto unknown = run({"--out", root.string(), "train", "-s", "pendulum", "--set", "train.epochz=3"});
  EXPECT_EQ(unknown.code, kExitConfig);
  EXPECT_NE(unknown.err.find("train.epochz"), std::string::npos);
  EXPECT_EQ(run({"train", "-s", "pendulum", "--set", "novalue"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "-s", "pendulum", "--set", "guidance.gamma=-1"}).code, kExitConfig);
  EXPECT_EQ(run({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"eval", (root / "missing").string(), "-s", "pendulum"}).code, kExitConfig);
  EXPECT_FALSE(fs::exists(root / "epoch_1"));
}

TEST_F(Cli, HelpAndDefaults)
{
  const auto help = run({"--help"});
  EXPECT_EQ(help.code, kExitOk);
  EXPECT_NE(help.out.find("train"), std::string::npos);
  const auto d = run({"defaults", "-s", "quad2d"});
  EXPECT_EQ(d.code, kExitOk);
  EXPECT_NE(d.out.find("system = quad2d"), std::string::npos);
  EXPECT_EQ(KeyValueFile::parse(d.out).to_string(), RunConfig::defaults("quad2d").to_keyvalue().to_string());
}

TEST_F(Cli, ZeroEpochTrainSavesInitialisation)
{
  const auto r = train(root, {"--set", "train.epochs=0", "--seed", "5"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto ckpt = load_checkpoint(root / "checkpoint");
  TrainConfig cfg = RunConfig::defaults("pendulum").train;
  cfg.hidden_layers = {8, 8};
  cfg.seed = 5;
  EXPECT_EQ(ckpt.certificate.params().flatten(),
            initial_certificate(*load_system("pendulum"), cfg).params().flatten());
  EXPECT_EQ(ckpt.seed, 5u);
  EXPECT_TRUE(fs::exists(root / "config.snapshot"));
  EXPECT_FALSE(fs::exists(root / "epoch_1"));
}

TEST_F(Cli, TrainEvalViolationContour)
{
  const auto t = train(root / "run");
  ASSERT_EQ(t.code, kExitOk) << t.err;
  EXPECT_NE(t.out.find("epoch 1  loss"), std::string::npos);
  for (const char * f : {"config.snapshot", "checkpoint", "epoch_1/checkpoint", "epoch_1/metrics.json",
                         "epoch_1/trajectories.csv"}) {
    EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
  }
  // The snapshot reloads to the same configuration.
  const auto snap = RunConfig::from_keyvalue(KeyValueFile::load(root / "run" / "config.snapshot"));
  EXPECT_EQ(snap.train.hidden_layers, (std::vector<int>{8, 8}));

  const std::string ckpt = (root / "run" / "checkpoint").string();
  std::vector<std::string> eval{"--out", (root / "ev").string(), "eval", ckpt, "-s", "pendulum"};
  eval.insert(eval.end(), kTiny.begin(), kTiny.end());
  const auto e = run(eval);
  ASSERT_EQ(e.code, kExitOk) << e.err;
  EXPECT_NE(e.out.find("safety rate"), std::string::npos);
  const auto metrics = nlohmann::json::parse(std::ifstream(root / "ev" / "eval" / "metrics.json"));
  EXPECT_EQ(metrics.at("num_rollouts").get<int>(), 2);
  EXPECT_TRUE(fs::exists(root / "ev" / "eval" / "rollout_0.csv"));
  EXPECT_TRUE(fs::exists(root / "ev" / "eval" / "rollout_1.csv"));

  const auto v = run({"--out", (root / "vi").string(), "violation", ckpt, "-s", "pendulum", "--states", "40"});
  ASSERT_EQ(v.code, kExitOk) << v.err;
  const auto viol = nlohmann::json::parse(std::ifstream(root / "vi" / "violation.json"));
  EXPECT_EQ(viol.at("num_states").get<int>(), 40);
  EXPECT_EQ(run({"violation", ckpt, "-s", "pendulum", "--states", "0"}).code, kExitConfig);

  const auto c = run({"--out", (root / "co").string(), "contour", ckpt, "-s", "pendulum", "--axes", "1,0",
                      "--resolution", "3"});
  ASSERT_EQ(c.code, kExitOk) << c.err;
  std::ifstream csv(root / "co" / "contour_1_0.csv");
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 1 + 9);
  EXPECT_TRUE(fs::exists(root / "co" / "contour_1_0.py"));
  EXPECT_EQ(run({"contour", ckpt, "-s", "pendulum", "--axes", "0,2"}).code, kExitConfig);
  EXPECT_EQ(run({"contour", ckpt, "-s", "pendulum", "--axes", "1,1"}).code, kExitConfig);

  // A pendulum certificate has the wrong input size for the segway.
  const auto mismatch = run({"--out", (root / "seg").string(), "eval", ckpt, "-s", "segway"});
  EXPECT_EQ(mismatch.code, kExitConfig);
  EXPECT_NE(mismatch.err.find("checkpoint"), std::string::npos);
}

TEST_F(Cli, OutputDirectoryPrecedence)
{
  setenv("S2DIFF_OUT", (root / "env").c_str(), 1);
  ASSERT_EQ(train(root / "flag", {"--set", "train.epochs=0"}).code, kExitOk);
  EXPECT_TRUE(fs::exists(root / "flag" / "checkpoint"));
  EXPECT_FALSE(fs::exists(root / "env"));

  std::vector<std::string> args{"train", "-s", "pendulum"};
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  args.insert(args.end(), {"--set", "train.epochs=0", "--set", "output.dir=" + (root / "key").string()});
  ASSERT_EQ(run(args).code, kExitOk);
  EXPECT_TRUE(fs::exists(root / "env" / "checkpoint"));
  EXPECT_FALSE(fs::exists(root / "key"));

  unsetenv("S2DIFF_OUT");
  ASSERT_EQ(run(args).code, kExitOk);
  EXPECT_TRUE(fs::exists(root / "key" / "checkpoint"));
}

TEST_F(Cli, ConfigFileWithOverrides)
{
  fs::create_directories(root);
  {
    std::ofstream f(root / "run.conf");
    f << "# tiny pendulum run\nsystem = pendulum\ntrain.epochs = 0\ntrain.hidden_layers = 4\nseed = 9\n";
  }
  const auto r = run({"--out", (root / "o").string(), "train", "-c", (root / "run.conf").string(), "--set",
                      "train.hidden_layers=6"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto ckpt = load_checkpoint(root / "o" / "checkpoint");
  EXPECT_EQ(ckpt.certificate.layer_sizes(), (std::vector<int>{2, 6, 1}));
  EXPECT_EQ(ckpt.seed, 9u);
}
