#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/clbf.hpp"
#include "s2diff/diffusion.hpp"
#include "s2diff/dynamics.hpp"
#include "s2diff/eval.hpp"
#include "s2diff/mlp.hpp"

namespace s2diff {

struct TrainConfig {
  int epochs = 30;                 // K
  int batch_initial_states = 16;   // B
  int grad_steps_per_epoch = 200;
  int minibatch_size = 256;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int replay_epochs = 5;
  std::vector<int> hidden_layers{64, 64, 64};
  bool biases = false;          // bias-free layers keep V(goal) = 0
  bool center_on_goal = true;   // network input is x - x_goal
  std::uint64_t seed = 0;
  /// Initial-state box; the system's init box when unset.
  std::optional<Eigen::VectorXd> init_lo, init_hi;
  /// Per-epoch metrics: domain states for the violation estimate.
  int metrics_violation_states = 2000;
  int metrics_violation_controls = 64;

  void validate() const;
  std::vector<int> layer_sizes(int state_dim) const;
};

/// Labelled states grouped by the epoch that produced them. Adding an
/// epoch beyond the capacity evicts the oldest one.
class ReplayDataset {
 public:
  explicit ReplayDataset(int capacity_epochs = 5);

  void add_epoch(int epoch, std::vector<LabeledState> states);
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  int capacity_epochs() const { return capacity_; }
  std::vector<int> epochs() const;
  /// Entry `index` counted across epochs, oldest first.
  const LabeledState& at(std::size_t index) const;

 private:
  struct Block {
    int epoch;
    std::vector<LabeledState> states;
  };
  int capacity_;
  std::deque<Block> blocks_;
  std::size_t size_ = 0;
};

/// Adam moments, shaped like the certificate parameters.
struct OptimizerState {
  MlpParams m;
  MlpParams v;
  long step = 0;

  static OptimizerState for_certificate(const MlpCertificate& cert);
};

/// One bias-corrected Adam update of `cert` along `grad`.
void adam_step(MlpCertificate& cert, const MlpParams& grad, OptimizerState& opt,
               const TrainConfig& tcfg);

/// Labels each (x_{t-1}, u_t, x_t) of a trajectory via the system's
/// classification. Terminal states carry no successor and are not stored.
std::vector<LabeledState> label_trajectory(const System& sys, const TrajectorySample& traj,
                                           double dt);
/// The equilibrium anchor for the goal term.
LabeledState goal_anchor(const System& sys);

struct CollectResult {
  std::vector<TrajectorySample> trajectories;  // successful ones, in draw order
  std::vector<LabeledState> states;            // labelled states plus one goal anchor
  int failures = 0;
};

/// Draws B initial states from the configured box and samples a guided
/// trajectory from each. Trajectory b of epoch k uses the substreams
/// (seed, k, b). Throws EpochError if every trajectory blows up.
CollectResult collect_phase(const System& sys, const MlpCertificate& cert,
                            const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                            const SamplerConfig& scfg, const TrainConfig& tcfg,
                            const CostFunction& cost, int epoch);

/// grad_steps_per_epoch Adam steps on minibatches drawn with replacement
/// from `data`, each extended by the goal anchor. Returns the loss of every
/// minibatch before its update. Throws TrainingDivergence on a non-finite
/// loss or gradient.
std::vector<double> update_phase(MlpCertificate& cert, const CertificateConfig& ccfg,
                                 const System& sys, const ReplayDataset& data,
                                 const TrainConfig& tcfg, OptimizerState& opt, int epoch);

struct EpochRecord {
  int epoch = 0;
  MetricsReport metrics;
  std::vector<double> losses;
  int failures = 0;
};

struct TrainResult {
  MlpCertificate certificate;
  std::vector<EpochRecord> history;  // one per epoch
};

/// Network initialisation used by run().
MlpCertificate initial_certificate(const System& sys, const TrainConfig& tcfg);

/// Alternates collect_phase with the previous certificate and update_phase
/// for K epochs. Per-epoch metrics are computed from the collected
/// trajectories plus a violation estimate over the domain. With `run_dir`
/// set, each epoch writes epoch_{k}/checkpoint, trajectories.csv and
/// metrics.json below it.
TrainResult train(const System& sys, const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                  const SamplerConfig& scfg, const TrainConfig& tcfg, const CostFunction& cost,
                  const std::optional<std::filesystem::path>& run_dir = std::nullopt);

}  // namespace s2diff
