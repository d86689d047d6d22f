#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/clbf.hpp"
#include "s2diff/diffusion.hpp"
#include "s2diff/dynamics.hpp"
#include "s2diff/mlp.hpp"
#include "s2diff/random.hpp"

namespace s2diff {

struct MetricsReport {
  int num_rollouts = 0;
  double safety_rate = 0.0;
  double terminal_error_mean = 0.0;
  double terminal_error_std = 0.0;
  double violation_rate = 0.0;
  double violation_half_width = 0.0;
  double monotonicity_fraction = 0.0;
  double hinge_energy_mean = 0.0;  // mean over rollouts of sum_t [L_f V + lambda V]^+
  double eval_time_ms_mean = 0.0;
  double eval_time_ms_std = 0.0;
  double wall_ms = 0.0;
};

struct EvalConfig {
  int num_rollouts = 20;
  int episode_steps = 50;
  int violation_states = 10000;
  int violation_controls = 64;

  void validate() const;
};

/// One receding-horizon closed-loop episode.
struct Episode {
  StateVector x0;
  TrajectoryRecord record;    // executed (state, control) pairs
  StateVector final_state;
  std::vector<double> values;  // V along all executed states, x0 first
  bool safe = true;            // never entered the unsafe set
  double terminal_error = 0.0;
  double hinge_energy = 0.0;
  int fallback_steps = 0;      // reverse steps that had no feasible candidate
  double wall_ms = 0.0;
};

/// Plans a horizon-T trajectory, executes all T steps, and replans until
/// `steps` controls have been applied. Plan j draws from the substream
/// (seed, j).
Episode run_episode(const System& sys, const MlpCertificate& cert, const CertificateConfig& ccfg,
                    const GuidanceConfig& gcfg, const SamplerConfig& scfg, const StateVector& x0,
                    int steps, const CostFunction& cost, std::uint64_t seed);

/// Runs `ecfg.num_rollouts` episodes from uniform initial states in the
/// system's evaluation box and estimates the violation rate over its domain.
/// Passing `episodes` collects the individual runs.
MetricsReport evaluate_policy(const System& sys, const MlpCertificate& cert,
                              const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                              const SamplerConfig& scfg, const EvalConfig& ecfg,
                              const CostFunction& cost, std::uint64_t seed,
                              std::vector<Episode>* episodes = nullptr);

struct ViolationEstimate {
  double rate = 0.0;
  double half_width = 0.0;  // 95% normal approximation
  int num_states = 0;
  int violating = 0;
};

/// Test controls for the decrease condition at one state: `count` uniform
/// draws from the control box followed by every vertex of the box.
std::vector<ControlVector> violation_controls(const System& sys, int count, Rng& rng);

/// Fraction of states drawn uniformly from the domain box at which
/// min_u L_f V(x, u) + lambda V(x) > 0, the minimum taken over
/// violation_controls. State s draws from the substream (seed, s).
template <ScalarPotential P>
ViolationEstimate violation_rate_estimate(const System& sys, const P& potential,
                                          const CertificateConfig& ccfg, int num_states,
                                          int num_controls_per_state, std::uint64_t seed) {
  if (num_states < 1) throw ContractError("violation_rate_estimate: need at least one state");
  if (num_controls_per_state < 0) throw ContractError("violation_rate_estimate: negative control count");
  const Eigen::VectorXd lo = sys.domain_lo(), hi = sys.domain_hi();
  ViolationEstimate est;
  est.num_states = num_states;
  int violating = 0;
#pragma omp parallel for schedule(static) reduction(+ : violating)
  for (int s = 0; s < num_states; ++s) {
    Rng rng = substream(seed, {stream::violation, static_cast<std::uint64_t>(s)});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    StateVector x(sys.state_dim());
    for (Eigen::Index k = 0; k < x.size(); ++k) x(k) = lo(k) + (hi(k) - lo(k)) * unit(rng);
    const double v = potential.value(x);
    const Eigen::VectorXd grad = potential.gradient(x);
    double best = std::numeric_limits<double>::infinity();
    for (const ControlVector& u : violation_controls(sys, num_controls_per_state, rng)) {
      best = std::min(best, grad.dot(sys.dynamics(x, u)) + ccfg.lambda * v);
    }
    if (best > 0.0) ++violating;
  }
  est.violating = violating;
  est.rate = static_cast<double>(est.violating) / num_states;
  est.half_width = 1.96 * std::sqrt(est.rate * (1.0 - est.rate) / num_states);
  return est;
}

/// Fraction of consecutive pairs with values[t + 1] > values[t] + 1e-9.
double monotonicity_fraction(std::span<const double> values);
/// Same, over V along x0 and every rolled-out state of `trajectory`.
double monotonicity_fraction(const MlpCertificate& cert, const TrajectorySample& trajectory);

struct ContourSlice {
  int axis_x = 0;
  int axis_y = 1;
  double x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
  int nx = 2, ny = 2;
  StateVector fixed;         // off-slice coordinates
  Eigen::MatrixXd values;    // ny x nx, values(j, i) at (x_i, y_j)

  double x_at(int i) const { return x_lo + (x_hi - x_lo) * i / (nx - 1); }
  double y_at(int j) const { return y_lo + (y_hi - y_lo) * j / (ny - 1); }
};

/// V on an nx x ny grid over the two axes, other coordinates from `fixed`.
ContourSlice contour_slice(const MlpCertificate& cert, const System& sys, std::pair<int, int> axes,
                           std::pair<double, double> x_range, std::pair<double, double> y_range,
                           int resolution, const StateVector& fixed);

/// Header `x,y,V`, one row per grid point, x varying fastest.
void write_contour_csv(std::ostream& out, const ContourSlice& slice);
/// Python/matplotlib script that renders `csv_name` next to itself.
std::string contour_plot_script(const std::string& csv_name, const std::string& x_label,
                                const std::string& y_label);

/// JSON object with the report fields, pretty-printed.
std::string metrics_to_json(const MetricsReport& report);
std::string violation_to_json(const ViolationEstimate& estimate, double lambda);
void print_report(std::ostream& out, const MetricsReport& report);

}  // namespace s2diff
