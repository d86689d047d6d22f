#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "s2diff/errors.hpp"
#include "s2diff/training.hpp"

using namespace s2diff;

namespace
{

struct SmallRun
{
  SystemPtr sys = load_system("pendulum");
  CertificateConfig ccfg;
  GuidanceConfig gcfg;
  SamplerConfig scfg;
  TrainConfig tcfg;

  SmallRun()
  {
    scfg.num_candidates = 16;
    scfg.schedule = NoiseSchedule::sigmoid(5);
    tcfg.epochs = 2;
    tcfg.batch_initial_states = 3;
    tcfg.grad_steps_per_epoch = 5;
    tcfg.minibatch_size = 8;
    tcfg.hidden_layers = {16, 16};
    tcfg.metrics_violation_states = 50;
    tcfg.seed = 4;
  }
};

LabeledState interior(double x)
{
  LabeledState s;
  s.x = Eigen::VectorXd::Constant(1, x);
  s.control = Eigen::VectorXd::Zero(1);
  s.successor = s.x;
  return s;
}

std::string slurp(const std::filesystem::path & p)
{
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST(Replay, EvictsOldestEpoch)
{
  ReplayDataset data(2);
  data.add_epoch(1, {interior(1.0)});
  data.add_epoch(2, {interior(2.0), interior(2.5)});
  data.add_epoch(3, {interior(3.0)});
  EXPECT_EQ(data.epochs(), (std::vector<int>{2, 3}));
  ASSERT_EQ(data.size(), 3u);
  EXPECT_EQ(data.at(0).x(0), 2.0);
  EXPECT_EQ(data.at(1).x(0), 2.5);
  EXPECT_EQ(data.at(2).x(0), 3.0);
  EXPECT_THROW(data.at(3), ContractError);
  LabeledState bare;
  bare.x = Eigen::VectorXd::Zero(1);
  EXPECT_THROW(data.add_epoch(4, {bare}), ContractError);
  bare.label = StateLabel::goal;
  EXPECT_NO_THROW(data.add_epoch(4, {bare}));
  EXPECT_THROW(ReplayDataset(0), ContractError);
}

TEST(Adam, MatchesScalarRecursion)
{
  MlpParams p;
  p.weights.push_back(Eigen::MatrixXd::Constant(1, 1, 0.5));
  p.biases.push_back(Eigen::VectorXd::Constant(1, 0.25));
  MlpCertificate cert(p);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  OptimizerState opt = OptimizerState::for_certificate(cert);
  const double grads[] = {1.0, -2.0, 0.5};
  double w = 0.5, b = 0.25, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    MlpParams grad = MlpParams::zeros_like(p);
    grad.weights[0](0, 0) = g;
    grad.biases[0](0) = g;
    adam_step(cert, grad, opt, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double step = 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    w -= step;
    b -= step;
    EXPECT_NEAR(cert.params().weights[0](0, 0), w, 1e-15);
    EXPECT_NEAR(cert.params().biases[0](0), b, 1e-15);
  }
  EXPECT_EQ(opt.step, 3);

  cert.set_biases_enabled(false);
  MlpParams grad = MlpParams::zeros_like(p);
  grad.biases[0](0) = 1.0;
  adam_step(cert, grad, opt, cfg);
  EXPECT_EQ(cert.params().biases[0](0), 0.0);
}

TEST(Training, LabelsFollowClassification)
{
  const auto sys = load_system("pendulum");
  const Eigen::MatrixXd U = Eigen::MatrixXd::Constant(5, 1, 8.0);
  const auto traj = TrajectorySample::make(*sys, Eigen::Vector2d(0.4, 1.5), U, {});
  const auto labels = label_trajectory(*sys, traj, 0.1);
  ASSERT_EQ(labels.size(), 5u);
  Eigen::VectorXd x = traj.x0;
  for (int t = 0; t < 5; ++t) {
    EXPECT_EQ(labels[t].x, x);
    EXPECT_EQ(labels[t].label, label_from_region(sys->classify(x)));
    EXPECT_EQ(*labels[t].successor, traj.states.row(t).transpose());
    EXPECT_DOUBLE_EQ(labels[t].time, 0.1 * t);
    x = *labels[t].successor;
  }
  EXPECT_EQ(labels[0].label, StateLabel::safe);
  bool left_safe = false;
  for (const auto & s : labels) left_safe = left_safe || s.label != StateLabel::safe;
  EXPECT_TRUE(left_safe);
  EXPECT_EQ(goal_anchor(*sys).label, StateLabel::goal);
}

TEST(Training, CollectPhaseIsSeededPerEpochAndIndex)
{
  SmallRun r;
  const auto cert = initial_certificate(*r.sys, r.tcfg);
  const auto a = collect_phase(*r.sys, cert, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), 1);
  const auto b = collect_phase(*r.sys, cert, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), 1);
  const auto c = collect_phase(*r.sys, cert, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), 2);
  ASSERT_EQ(a.trajectories.size(), 3u);
  EXPECT_EQ(a.states.size(), 3u * 5 + 1);
  EXPECT_EQ(a.states.back().label, StateLabel::goal);
  EXPECT_EQ(a.failures, 0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.trajectories[i].controls, b.trajectories[i].controls);
    EXPECT_NE(a.trajectories[i].x0, c.trajectories[i].x0);
    EXPECT_TRUE((a.trajectories[i].x0.array() >= r.sys->init_lo().array()).all());
    EXPECT_TRUE((a.trajectories[i].x0.array() <= r.sys->init_hi().array()).all());
  }
}

TEST(Training, EpochErrorWhenEverythingBlowsUp)
{
  const auto sys = load_system("linear_scalar", KeyValueFile::parse("a = 1e300\n"));
  SmallRun r;
  r.tcfg.init_lo = Eigen::VectorXd::Constant(1, 1e10);
  r.tcfg.init_hi = Eigen::VectorXd::Constant(1, 2e10);
  const auto cert = initial_certificate(*sys, r.tcfg);
  try {
    collect_phase(*sys, cert, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*sys), 7);
    FAIL() << "expected EpochError";
  } catch (const EpochError & e) {
    EXPECT_EQ(e.epoch(), 7);
  }
}

TEST(Training, UpdatePhaseReducesLoss)
{
  SmallRun r;
  r.tcfg.grad_steps_per_epoch = 150;
  r.tcfg.minibatch_size = 64;
  r.tcfg.learning_rate = 3e-3;
  auto cert = initial_certificate(*r.sys, r.tcfg);
  const auto collected = collect_phase(*r.sys, cert, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), 1);
  ReplayDataset data(5);
  data.add_epoch(1, collected.states);
  OptimizerState opt = OptimizerState::for_certificate(cert);
  std::vector<LabeledState> all;
  for (std::size_t i = 0; i < data.size(); ++i) all.push_back(data.at(i));
  const double before = clbf_loss(cert, r.ccfg, *r.sys, all);
  const auto losses = update_phase(cert, r.ccfg, *r.sys, data, r.tcfg, opt, 1);
  EXPECT_EQ(losses.size(), 150u);
  EXPECT_LT(clbf_loss(cert, r.ccfg, *r.sys, all), 0.5 * before);
  EXPECT_EQ(cert.value(r.sys->goal()), 0.0);
  EXPECT_THROW(update_phase(cert, r.ccfg, *r.sys, ReplayDataset(1), r.tcfg, opt, 1), ContractError);
}

TEST(Training, DivergenceOnNonFiniteLoss)
{
  SmallRun r;
  auto cert = initial_certificate(*r.sys, r.tcfg);
  LabeledState s;
  s.x = Eigen::Vector2d(0.1, 0.1);
  s.control = Eigen::VectorXd::Zero(1);
  s.successor = Eigen::Vector2d::Constant(std::numeric_limits<double>::max());
  ReplayDataset data(1);
  data.add_epoch(1, {s});
  OptimizerState opt = OptimizerState::for_certificate(cert);
  try {
    update_phase(cert, r.ccfg, *r.sys, data, r.tcfg, opt, 1);
    FAIL() << "expected TrainingDivergence";
  } catch (const TrainingDivergence & e) {
    EXPECT_EQ(e.minibatch_index(), 0u);
  }
}

TEST(Training, ZeroEpochsReturnsInitialisation)
{
  SmallRun r;
  r.tcfg.epochs = 0;
  const auto result = train(*r.sys, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys));
  EXPECT_TRUE(result.history.empty());
  EXPECT_EQ(result.certificate.params().flatten(), initial_certificate(*r.sys, r.tcfg).params().flatten());
  EXPECT_EQ(result.certificate.value(r.sys->goal()), 0.0);
}

TEST(Training, RunWritesEpochArtifactsDeterministically)
{
  SmallRun r;
  const auto root = std::filesystem::temp_directory_path() / "s2diff_test_train";
  std::filesystem::remove_all(root);
  const auto a = train(*r.sys, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), root / "a");
  const auto b = train(*r.sys, r.ccfg, r.gcfg, r.scfg, r.tcfg, default_cost(*r.sys), root / "b");
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history[1].epoch, 2);
  EXPECT_EQ(a.history[0].losses.size(), 5u);
  for (const char * epoch : {"epoch_1", "epoch_2"}) {
    for (const char * file : {"checkpoint", "trajectories.csv", "metrics.json"}) {
      EXPECT_TRUE(std::filesystem::exists(root / "a" / epoch / file)) << epoch << "/" << file;
    }
    EXPECT_EQ(slurp(root / "a" / epoch / "checkpoint"), slurp(root / "b" / epoch / "checkpoint"));
    EXPECT_EQ(slurp(root / "a" / epoch / "trajectories.csv"), slurp(root / "b" / epoch / "trajectories.csv"));
  }
  const std::string csv = slurp(root / "a" / "epoch_1" / "trajectories.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 5);
  EXPECT_EQ(a.certificate.params().flatten(), b.certificate.params().flatten());
  std::filesystem::remove_all(root);
}

TEST(Training, ConfigValidation)
{
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.layer_sizes(3), (std::vector<int>{3, 64, 64, 64, 1}));
  cfg.hidden_layers.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.init_lo = Eigen::VectorXd::Zero(2);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.init_hi = -Eigen::VectorXd::Ones(2);
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.beta2 = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
