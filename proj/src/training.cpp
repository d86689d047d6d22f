#include "s2diff/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <string>

#include "s2diff/errors.hpp"
#include "s2diff/random.hpp"

namespace s2diff {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
  if (batch_initial_states < 1) throw ConfigError("train.batch_initial_states", "must be >= 1");
  if (grad_steps_per_epoch < 0) throw ConfigError("train.grad_steps_per_epoch", "must be >= 0");
  if (minibatch_size < 1) throw ConfigError("train.minibatch_size", "must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be > 0");
  if (replay_epochs < 1) throw ConfigError("train.replay_epochs", "must be >= 1");
  if (hidden_layers.empty()) throw ConfigError("train.hidden_layers", "need at least one hidden layer");
  for (const int h : hidden_layers) {
    if (h < 1) throw ConfigError("train.hidden_layers", "widths must be >= 1");
  }
  if (init_lo.has_value() != init_hi.has_value()) {
    throw ConfigError("train.init_lo", "init_lo and init_hi must be given together");
  }
  if (init_lo && (init_lo->size() != init_hi->size() || (init_lo->array() > init_hi->array()).any())) {
    throw ConfigError("train.init_lo", "must not exceed train.init_hi");
  }
  if (metrics_violation_states < 1) throw ConfigError("train.metrics_violation_states", "must be >= 1");
  if (metrics_violation_controls < 0) {
    throw ConfigError("train.metrics_violation_controls", "must be >= 0");
  }
}

std::vector<int> TrainConfig::layer_sizes(int state_dim) const {
  std::vector<int> sizes{state_dim};
  sizes.insert(sizes.end(), hidden_layers.begin(), hidden_layers.end());
  sizes.push_back(1);
  return sizes;
}

ReplayDataset::ReplayDataset(int capacity_epochs) : capacity_(capacity_epochs) {
  if (capacity_ < 1) throw ContractError("ReplayDataset: capacity must be >= 1 epoch");
}

void ReplayDataset::add_epoch(int epoch, std::vector<LabeledState> states) {
  for (const LabeledState& s : states) {
    if (s.label != StateLabel::goal && (!s.successor || !s.control)) {
      throw ContractError("ReplayDataset: non-goal entries need a control and a successor");
    }
  }
  size_ += states.size();
  blocks_.push_back(Block{epoch, std::move(states)});
  while (static_cast<int>(blocks_.size()) > capacity_) {
    size_ -= blocks_.front().states.size();
    blocks_.pop_front();
  }
}

std::vector<int> ReplayDataset::epochs() const {
  std::vector<int> out;
  for (const Block& b : blocks_) out.push_back(b.epoch);
  return out;
}

const LabeledState& ReplayDataset::at(std::size_t index) const {
  for (const Block& b : blocks_) {
    if (index < b.states.size()) return b.states[index];
    index -= b.states.size();
  }
  throw ContractError("ReplayDataset: index out of range");
}

OptimizerState OptimizerState::for_certificate(const MlpCertificate& cert) {
  return OptimizerState{MlpParams::zeros_like(cert.params()), MlpParams::zeros_like(cert.params()), 0};
}

void adam_step(MlpCertificate& cert, const MlpParams& grad, OptimizerState& opt,
               const TrainConfig& tcfg) {
  MlpParams p = cert.params();
  ++opt.step;
  const double c1 = 1.0 - std::pow(tcfg.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(tcfg.beta2, static_cast<double>(opt.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = tcfg.beta1 * m + (1.0 - tcfg.beta1) * g;
    v = tcfg.beta2 * v + (1.0 - tcfg.beta2) * g.cwiseProduct(g);
    param.array() -= tcfg.learning_rate * (m.array() / c1) /
                     ((v.array() / c2).sqrt() + tcfg.adam_eps);
  };
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    update(p.weights[k], opt.m.weights[k], opt.v.weights[k], grad.weights[k]);
    if (cert.biases_enabled()) update(p.biases[k], opt.m.biases[k], opt.v.biases[k], grad.biases[k]);
  }
  cert.set_params(std::move(p));
}

std::vector<LabeledState> label_trajectory(const System& sys, const TrajectorySample& traj,
                                           double dt) {
  std::vector<LabeledState> out;
  out.reserve(static_cast<std::size_t>(traj.horizon()));
  StateVector x = traj.x0;
  for (int t = 0; t < traj.horizon(); ++t) {
    LabeledState s;
    s.x = x;
    s.label = label_from_region(sys.classify(x));
    s.control = traj.controls.row(t).transpose();
    s.successor = traj.states.row(t).transpose();
    s.time = traj.t0 + t * dt;
    x = *s.successor;
    out.push_back(std::move(s));
  }
  return out;
}

LabeledState goal_anchor(const System& sys) {
  LabeledState s;
  s.x = sys.goal();
  s.label = StateLabel::goal;
  return s;
}

CollectResult collect_phase(const System& sys, const MlpCertificate& cert,
                            const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                            const SamplerConfig& scfg, const TrainConfig& tcfg,
                            const CostFunction& cost, int epoch) {
  if (tcfg.batch_initial_states < 1) throw ContractError("collect_phase: need B >= 1");
  const Eigen::VectorXd lo = tcfg.init_lo.value_or(sys.init_lo());
  const Eigen::VectorXd hi = tcfg.init_hi.value_or(sys.init_hi());
  if (lo.size() != sys.state_dim() || hi.size() != sys.state_dim()) {
    throw ContractError("collect_phase: initial-state box has wrong dimension");
  }
  const auto ek = static_cast<std::uint64_t>(epoch);
  CollectResult out;
  for (int b = 0; b < tcfg.batch_initial_states; ++b) {
    const auto bk = static_cast<std::uint64_t>(b);
    Rng rng = substream(tcfg.seed, {stream::initial_states, ek, bk});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    StateVector x0(sys.state_dim());
    for (Eigen::Index k = 0; k < x0.size(); ++k) x0(k) = lo(k) + (hi(k) - lo(k)) * unit(rng);
    try {
      SampleResult res = sample_trajectory(sys, cert, ccfg, gcfg, scfg, x0, cost,
                                           substream_seed(tcfg.seed, {stream::trajectory, ek, bk}));
      std::vector<LabeledState> labeled = label_trajectory(sys, res.trajectory, scfg.integrator.dt);
      out.states.insert(out.states.end(), std::make_move_iterator(labeled.begin()),
                        std::make_move_iterator(labeled.end()));
      out.trajectories.push_back(std::move(res.trajectory));
    } catch (const IntegrationBlowup&) {
      ++out.failures;
    }
  }
  if (out.trajectories.empty()) {
    throw EpochError("epoch " + std::to_string(epoch) + ": every sampled trajectory blew up", epoch);
  }
  out.states.push_back(goal_anchor(sys));
  return out;
}

std::vector<double> update_phase(MlpCertificate& cert, const CertificateConfig& ccfg,
                                 const System& sys, const ReplayDataset& data,
                                 const TrainConfig& tcfg, OptimizerState& opt, int epoch) {
  if (data.empty()) throw ContractError("update_phase: empty dataset");
  Rng rng = substream(tcfg.seed, {stream::minibatch, static_cast<std::uint64_t>(epoch)});
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const LabeledState anchor = goal_anchor(sys);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(tcfg.grad_steps_per_epoch));
  std::vector<LabeledState> batch;
  for (int s = 0; s < tcfg.grad_steps_per_epoch; ++s) {
    batch.clear();
    for (int i = 0; i < tcfg.minibatch_size; ++i) batch.push_back(data.at(pick(rng)));
    batch.push_back(anchor);
    double loss = 0.0;
    const MlpParams grad = clbf_loss_grad(cert, ccfg, sys, batch, &loss);
    if (!std::isfinite(loss) || !grad.all_finite()) {
      throw TrainingDivergence("non-finite loss on minibatch " + std::to_string(s),
                               static_cast<std::size_t>(s));
    }
    losses.push_back(loss);
    adam_step(cert, grad, opt, tcfg);
  }
  return losses;
}

MlpCertificate initial_certificate(const System& sys, const TrainConfig& tcfg) {
  MlpCertificate cert = MlpCertificate::kaiming(tcfg.layer_sizes(sys.state_dim()), tcfg.seed);
  cert.set_biases_enabled(tcfg.biases);
  if (tcfg.center_on_goal) cert.set_center(sys.goal());
  return cert;
}

namespace {

MetricsReport collection_metrics(const System& sys, const MlpCertificate& cert,
                                 const CertificateConfig& ccfg, const TrainConfig& tcfg,
                                 const CollectResult& collected, int epoch) {
  MetricsReport rep;
  const auto count = static_cast<double>(collected.trajectories.size());
  rep.num_rollouts = static_cast<int>(collected.trajectories.size());
  double safe = 0.0, err_sum = 0.0, err_sq = 0.0, mono = 0.0;
  for (const TrajectorySample& traj : collected.trajectories) {
    const Eigen::MatrixXd states = traj.all_states();
    bool ok = true;
    for (Eigen::Index r = 0; r < states.rows(); ++r) ok = ok && !sys.in_unsafe_set(states.row(r).transpose());
    safe += ok ? 1.0 : 0.0;
    const double e = (states.bottomRows(1).transpose() - sys.goal()).norm();
    err_sum += e;
    err_sq += e * e;
    mono += monotonicity_fraction(cert, traj);
  }
  rep.safety_rate = safe / count;
  rep.terminal_error_mean = err_sum / count;
  rep.terminal_error_std = std::sqrt(std::max(0.0, err_sq / count - rep.terminal_error_mean * rep.terminal_error_mean));
  rep.monotonicity_fraction = mono / count;
  const ViolationEstimate viol = violation_rate_estimate(
      sys, cert, ccfg, tcfg.metrics_violation_states, tcfg.metrics_violation_controls,
      substream_seed(tcfg.seed, {stream::epoch, static_cast<std::uint64_t>(epoch)}));
  rep.violation_rate = viol.rate;
  rep.violation_half_width = viol.half_width;
  return rep;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

TrainResult train(const System& sys, const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                  const SamplerConfig& scfg, const TrainConfig& tcfg, const CostFunction& cost,
                  const std::optional<std::filesystem::path>& run_dir) {
  ccfg.validate();
  gcfg.validate();
  scfg.validate();
  tcfg.validate();
  TrainResult result;
  result.certificate = initial_certificate(sys, tcfg);
  OptimizerState opt = OptimizerState::for_certificate(result.certificate);
  ReplayDataset data(tcfg.replay_epochs);
  for (int k = 1; k <= tcfg.epochs; ++k) {
    const auto start = std::chrono::steady_clock::now();
    CollectResult collected = collect_phase(sys, result.certificate, ccfg, gcfg, scfg, tcfg, cost, k);
    data.add_epoch(k, collected.states);
    EpochRecord rec;
    rec.epoch = k;
    rec.failures = collected.failures;
    try {
      rec.losses = update_phase(result.certificate, ccfg, sys, data, tcfg, opt, k);
    } catch (const TrainingDivergence& e) {
      throw TrainingDivergence("epoch " + std::to_string(k) + ": " + e.what(), e.minibatch_index());
    }
    rec.metrics = collection_metrics(sys, result.certificate, ccfg, tcfg, collected, k);
    rec.metrics.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (run_dir) {
      const std::filesystem::path dir = *run_dir / ("epoch_" + std::to_string(k));
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / "checkpoint", Checkpoint{result.certificate, ccfg, tcfg.seed});
      std::ofstream csv(dir / "trajectories.csv", std::ios::binary);
      bool header = true;
      for (const TrajectorySample& traj : collected.trajectories) {
        TrajectoryRecord record;
        record.append(traj, scfg.integrator.dt);
        write_trajectory_csv(csv, sys, result.certificate, ccfg, record, header);
        header = false;
      }
      write_text(dir / "metrics.json", metrics_to_json(rec.metrics));
    }
    result.history.push_back(std::move(rec));
  }
  return result;
}

}  // namespace s2diff
