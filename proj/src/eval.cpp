#include "s2diff/eval.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "s2diff/errors.hpp"

namespace s2diff {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double var = 0.0;
  for (const double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

void EvalConfig::validate() const {
  if (num_rollouts < 1) throw ConfigError("eval.num_rollouts", "must be >= 1");
  if (episode_steps < 1) throw ConfigError("eval.episode_steps", "must be >= 1");
  if (violation_states < 1) throw ConfigError("eval.violation_states", "must be >= 1");
  if (violation_controls < 0) throw ConfigError("eval.violation_controls", "must be >= 0");
}

Episode run_episode(const System& sys, const MlpCertificate& cert, const CertificateConfig& ccfg,
                    const GuidanceConfig& gcfg, const SamplerConfig& scfg, const StateVector& x0,
                    int steps, const CostFunction& cost, std::uint64_t seed) {
  if (steps < 1) throw ContractError("run_episode: need at least one step");
  const auto start = Clock::now();
  const double dt = scfg.integrator.dt;
  Episode ep;
  ep.x0 = x0;
  ep.safe = !sys.in_unsafe_set(x0);
  StateVector x = x0;
  int applied = 0;
  for (std::uint64_t plan = 0; applied < steps; ++plan) {
    const double t0 = applied * dt;
    const SampleResult res =
        sample_trajectory(sys, cert, ccfg, gcfg, scfg, x, cost, substream_seed(seed, {plan}), t0);
    ep.fallback_steps += res.diagnostics.fallback_count();
    const TrajectorySample& traj = res.trajectory;
    const int take = std::min(traj.horizon(), steps - applied);
    for (int t = 0; t < take; ++t) {
      ep.record.times.push_back(t0 + t * dt);
      ep.record.states.push_back(x);
      ep.record.controls.push_back(traj.controls.row(t).transpose());
      x = traj.states.row(t).transpose();
      ep.safe = ep.safe && !sys.in_unsafe_set(x);
    }
    applied += take;
  }
  ep.final_state = x;
  ep.terminal_error = (x - sys.goal()).norm();

  const auto count = static_cast<Eigen::Index>(ep.record.states.size());
  Eigen::MatrixXd X(sys.state_dim(), count + 1);
  Eigen::MatrixXd F(sys.state_dim(), count);
  for (Eigen::Index k = 0; k < count; ++k) {
    X.col(k) = ep.record.states[k];
    F.col(k) = sys.dynamics(ep.record.states[k], ep.record.controls[k], ep.record.times[k]);
  }
  X.col(count) = x;
  Eigen::RowVectorXd V;
  Eigen::MatrixXd G;
  cert.values_and_gradients(X, V, G);
  ep.values.assign(V.data(), V.data() + V.size());
  for (Eigen::Index k = 0; k < count; ++k) {
    ep.hinge_energy += std::max(0.0, G.col(k).dot(F.col(k)) + ccfg.lambda * V(k));
  }
  ep.wall_ms = elapsed_ms(start);
  return ep;
}

MetricsReport evaluate_policy(const System& sys, const MlpCertificate& cert,
                              const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                              const SamplerConfig& scfg, const EvalConfig& ecfg,
                              const CostFunction& cost, std::uint64_t seed,
                              std::vector<Episode>* episodes) {
  ecfg.validate();
  const auto start = Clock::now();
  const Eigen::VectorXd lo = sys.eval_lo(), hi = sys.eval_hi();
  std::vector<double> errors, times, mono, energy;
  int safe = 0;
  for (int r = 0; r < ecfg.num_rollouts; ++r) {
    const auto rid = static_cast<std::uint64_t>(r);
    Rng rng = substream(seed, {stream::evaluation, rid, 0});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    StateVector x0(sys.state_dim());
    for (Eigen::Index k = 0; k < x0.size(); ++k) x0(k) = lo(k) + (hi(k) - lo(k)) * unit(rng);
    Episode ep = run_episode(sys, cert, ccfg, gcfg, scfg, x0, ecfg.episode_steps, cost,
                             substream_seed(seed, {stream::evaluation, rid, 1}));
    safe += ep.safe ? 1 : 0;
    errors.push_back(ep.terminal_error);
    times.push_back(ep.wall_ms);
    mono.push_back(monotonicity_fraction(ep.values));
    energy.push_back(ep.hinge_energy);
    if (episodes) episodes->push_back(std::move(ep));
  }
  MetricsReport rep;
  rep.num_rollouts = ecfg.num_rollouts;
  rep.safety_rate = static_cast<double>(safe) / ecfg.num_rollouts;
  std::tie(rep.terminal_error_mean, rep.terminal_error_std) = mean_std(errors);
  std::tie(rep.eval_time_ms_mean, rep.eval_time_ms_std) = mean_std(times);
  rep.monotonicity_fraction = mean_std(mono).first;
  rep.hinge_energy_mean = mean_std(energy).first;
  const ViolationEstimate viol = violation_rate_estimate(
      sys, cert, ccfg, ecfg.violation_states, ecfg.violation_controls, seed);
  rep.violation_rate = viol.rate;
  rep.violation_half_width = viol.half_width;
  rep.wall_ms = elapsed_ms(start);
  return rep;
}

std::vector<ControlVector> violation_controls(const System& sys, int count, Rng& rng) {
  const Eigen::VectorXd lo = sys.control_lo(), hi = sys.control_hi();
  const int m = sys.control_dim();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ControlVector> out;
  out.reserve(static_cast<std::size_t>(count) + (std::size_t{1} << m));
  for (int c = 0; c < count; ++c) {
    ControlVector u(m);
    for (int k = 0; k < m; ++k) u(k) = lo(k) + (hi(k) - lo(k)) * unit(rng);
    out.push_back(std::move(u));
  }
  for (unsigned corner = 0; corner < (1u << m); ++corner) {
    ControlVector u(m);
    for (int k = 0; k < m; ++k) u(k) = (corner >> k) & 1u ? hi(k) : lo(k);
    out.push_back(std::move(u));
  }
  return out;
}

double monotonicity_fraction(std::span<const double> values) {
  if (values.size() < 2) throw ContractError("monotonicity_fraction: need at least two values");
  std::size_t up = 0;
  for (std::size_t t = 0; t + 1 < values.size(); ++t) {
    if (values[t + 1] > values[t] + 1e-9) ++up;
  }
  return static_cast<double>(up) / static_cast<double>(values.size() - 1);
}

double monotonicity_fraction(const MlpCertificate& cert, const TrajectorySample& trajectory) {
  const Eigen::RowVectorXd v = cert.values(trajectory.all_states().transpose());
  return monotonicity_fraction(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

ContourSlice contour_slice(const MlpCertificate& cert, const System& sys, std::pair<int, int> axes,
                           std::pair<double, double> x_range, std::pair<double, double> y_range,
                           int resolution, const StateVector& fixed) {
  const int n = sys.state_dim();
  if (axes.first == axes.second || axes.first < 0 || axes.second < 0 || axes.first >= n ||
      axes.second >= n) {
    throw ContractError("contour_slice: axes must be distinct state indices");
  }
  if (resolution < 2) throw ContractError("contour_slice: resolution must be >= 2");
  if (fixed.size() != n) throw ContractError("contour_slice: fixed point has wrong dimension");
  ContourSlice s;
  s.axis_x = axes.first;
  s.axis_y = axes.second;
  std::tie(s.x_lo, s.x_hi) = x_range;
  std::tie(s.y_lo, s.y_hi) = y_range;
  s.nx = s.ny = resolution;
  s.fixed = fixed;
  Eigen::MatrixXd X(n, resolution * resolution);
  for (int j = 0; j < resolution; ++j) {
    for (int i = 0; i < resolution; ++i) {
      StateVector x = fixed;
      x(s.axis_x) = s.x_at(i);
      x(s.axis_y) = s.y_at(j);
      X.col(j * resolution + i) = x;
    }
  }
  const Eigen::RowVectorXd v = cert.values(X);
  s.values.resize(resolution, resolution);
  for (int j = 0; j < resolution; ++j) {
    for (int i = 0; i < resolution; ++i) s.values(j, i) = v(j * resolution + i);
  }
  return s;
}

void write_contour_csv(std::ostream& out, const ContourSlice& slice) {
  const auto old_precision = out.precision();
  out << "x,y,V\n" << std::setprecision(17);
  for (int j = 0; j < slice.ny; ++j) {
    for (int i = 0; i < slice.nx; ++i) {
      out << slice.x_at(i) << ',' << slice.y_at(j) << ',' << slice.values(j, i) << '\n';
    }
  }
  out.precision(old_precision);
}

std::string contour_plot_script(const std::string& csv_name, const std::string& x_label,
                                const std::string& y_label) {
  std::ostringstream s;
  s << "import csv\n"
       "import pathlib\n"
       "import matplotlib.pyplot as plt\n"
       "\n"
       "here = pathlib.Path(__file__).resolve().parent\n"
       "rows = list(csv.DictReader(open(here / \"" << csv_name << "\")))\n"
       "xs = sorted({float(r[\"x\"]) for r in rows})\n"
       "ys = sorted({float(r[\"y\"]) for r in rows})\n"
       "grid = [[0.0] * len(xs) for _ in ys]\n"
       "for r in rows:\n"
       "    grid[ys.index(float(r[\"y\"]))][xs.index(float(r[\"x\"]))] = float(r[\"V\"])\n"
       "fig, ax = plt.subplots()\n"
       "cs = ax.contourf(xs, ys, grid, levels=30)\n"
       "fig.colorbar(cs, label=\"V\")\n"
       "ax.set_xlabel(\"" << x_label << "\")\n"
       "ax.set_ylabel(\"" << y_label << "\")\n"
       "fig.savefig(here / \"" << csv_name << ".png\", dpi=150)\n";
  return s.str();
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["safety_rate"] = r.safety_rate;
  j["terminal_error_mean"] = r.terminal_error_mean;
  j["terminal_error_std"] = r.terminal_error_std;
  j["violation_rate"] = r.violation_rate;
  j["violation_half_width"] = r.violation_half_width;
  j["monotonicity_fraction"] = r.monotonicity_fraction;
  j["hinge_energy_mean"] = r.hinge_energy_mean;
  j["num_rollouts"] = r.num_rollouts;
  j["eval_time_ms_mean"] = r.eval_time_ms_mean;
  j["eval_time_ms_std"] = r.eval_time_ms_std;
  j["wall_ms"] = r.wall_ms;
  return j.dump(2) + "\n";
}

std::string violation_to_json(const ViolationEstimate& e, double lambda) {
  nlohmann::ordered_json j;
  j["violation_rate"] = e.rate;
  j["half_width_95"] = e.half_width;
  j["num_states"] = e.num_states;
  j["violating_states"] = e.violating;
  j["lambda"] = lambda;
  return j.dump(2) + "\n";
}

void print_report(std::ostream& out, const MetricsReport& r) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::fixed << std::setprecision(4);
  out << "rollouts            " << r.num_rollouts << '\n'
      << "safety rate         " << r.safety_rate << '\n'
      << "terminal error      " << r.terminal_error_mean << " +/- " << r.terminal_error_std << '\n'
      << "violation rate      " << r.violation_rate << " +/- " << r.violation_half_width << '\n'
      << "monotonicity frac   " << r.monotonicity_fraction << '\n'
      << "hinge energy        " << r.hinge_energy_mean << '\n'
      << "time per rollout ms " << std::setprecision(1) << r.eval_time_ms_mean << " +/- "
      << r.eval_time_ms_std << '\n';
  out.flags(flags);
  out.precision(precision);
}

}  // namespace s2diff
