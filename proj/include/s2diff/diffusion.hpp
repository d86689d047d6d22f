#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/clbf.hpp"
#include "s2diff/dynamics.hpp"
#include "s2diff/mlp.hpp"

namespace s2diff {

/// alpha_bar[0] = 1 and alpha_bar[i] = prod_{k<=i} alpha[k] for i = 1..N.
struct NoiseSchedule {
  std::vector<double> alpha;      // size N + 1, alpha[0] = 1
  std::vector<double> alpha_bar;  // size N + 1

  int steps() const { return static_cast<int>(alpha_bar.size()) - 1; }

  /// alpha_bar falls from 1 to `final_alpha_bar` along a logistic curve of
  /// the given sharpness over `steps` steps.
  static NoiseSchedule sigmoid(int steps, double final_alpha_bar = 1e-2, double sharpness = 10.0);
  /// Builds alpha from a cumulative sequence that starts at 1.
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);

  void validate() const;
};

enum class SafetyMode { indicator, soft };

struct GuidanceConfig {
  double gamma = 0.05;   // cost temperature
  double gamma1 = 0.5;   // nominal-tracking temperature
  double gamma2 = 0.1;   // stability temperature
  SafetyMode safety_mode = SafetyMode::soft;
  std::optional<double> safety_temp;  // soft-safety temperature; gamma2 when unset
  std::optional<Eigen::MatrixXd> nominal;  // T x m nominal controls, physical units
  bool use_clbf_guidance = true;

  double effective_safety_temp() const { return safety_temp.value_or(gamma2); }
  void validate() const;
};

struct SamplerConfig {
  int horizon = 5;           // T
  int num_candidates = 256;  // Q
  std::uint64_t seed = 0;
  NoiseSchedule schedule = NoiseSchedule::sigmoid(50);
  IntegratorConfig integrator;

  void validate() const;
};

/// Running cost q(x_t, u_t).
using CostFunction = std::function<double(const StateVector&, const ControlVector&)>;

/// q(x, u) = ||x - x_goal||^2 + 0.01 ||u - u_eq||^2.
CostFunction default_cost(const System& sys);

/// A control sequence and the rollout it induces from x0. Construct via
/// make() so the states always match the controls.
struct TrajectorySample {
  StateVector x0;
  double t0 = 0.0;
  Eigen::MatrixXd controls;  // T x m, physical units, within bounds
  Eigen::MatrixXd states;    // T x n, row t is x_{t+1}

  static TrajectorySample make(const System& sys, const StateVector& x0,
                               const Eigen::MatrixXd& controls, const IntegratorConfig& integ,
                               double t0 = 0.0);
  int horizon() const { return static_cast<int>(controls.rows()); }
  /// x_0 followed by every rolled-out state, T + 1 rows.
  Eigen::MatrixXd all_states() const;
};

/// The sampler diffuses controls in normalised coordinates z in [-1, 1]
/// per entry, u = mid + half_range * z, so one noise scale suits every
/// system.
Eigen::MatrixXd to_normalized(const System& sys, const Eigen::MatrixXd& controls);
Eigen::MatrixXd to_physical(const System& sys, const Eigen::MatrixXd& normalized);

/// Unnormalised log target split into its factors.
struct DensityTerms {
  double log_safe = 0.0;
  double log_stable = 0.0;
  double log_cost = 0.0;
  double total() const { return log_safe + log_stable + log_cost; }
};

/// Factors of log p(U) for the controls in `sample`. States are re-derived
/// from the controls first. Stability pairs each control with the state it
/// is applied at, (x_{t-1}, u_t); safety and cost use the reached states.
///   log_cost   = -(1/gamma) sum_t q(x_t, u_t), or -(1/gamma1) ||u - u_nom||^2
///   log_stable = -(1/gamma2) sum_t ([L_f V(x_{t-1}, u_t) + lambda V(x_{t-1})]^+)^2
///   log_safe   = 0 / -inf (indicator) or -(1/tau) sum_t ([V(x_t) - c]^+)^2 (soft)
/// Throws EvaluationError on rollout blowup or non-finite certificate output.
DensityTerms density_terms(const System& sys, const MlpCertificate& cert,
                           const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                           const TrajectorySample& sample, const CostFunction& cost,
                           const IntegratorConfig& integ);

double log_target_density(const System& sys, const MlpCertificate& cert,
                          const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                          const TrajectorySample& sample, const CostFunction& cost,
                          const IntegratorConfig& integ);

/// sqrt(alpha_bar_i) U0 + sqrt(1 - alpha_bar_i) zeta with zeta drawn from `noise`.
Eigen::MatrixXd forward_corrupt(const Eigen::MatrixXd& clean, int i, const NoiseSchedule& schedule,
                                const std::function<double()>& noise);
Eigen::MatrixXd forward_corrupt(const Eigen::MatrixXd& clean, int i, const NoiseSchedule& schedule,
                                std::mt19937_64& rng);

struct PosteriorEstimate {
  Eigen::MatrixXd mean;  // normalised coordinates
  double ess = 0.0;      // 1 / sum w^2
  bool fallback = false;  // no feasible candidate; unweighted mean returned
  std::vector<double> weights;
};

/// Monte-Carlo estimate of E[U0 | U_i]. Draws Q candidates from
/// N(U_i / sqrt(abar_i), (1 - abar_i) / abar_i) per entry, clamps them to
/// [-1, 1], weights them by the target density (log-sum-exp normalised),
/// and returns the weighted mean. Candidate q draws from the counter stream
/// (stream_seed, i, q), so the result does not depend on thread count.
PosteriorEstimate estimate_posterior_mean(const System& sys, const MlpCertificate& cert,
                                          const CertificateConfig& ccfg,
                                          const GuidanceConfig& gcfg, const SamplerConfig& scfg,
                                          const StateVector& x0, double t0,
                                          const Eigen::MatrixXd& corrupted, int i,
                                          const CostFunction& cost, std::uint64_t stream_seed);

/// score = -(U_i - sqrt(abar_i) mean) / (1 - abar_i);
/// U_{i-1} = (U_i + (1 - alpha_i) score) / sqrt(alpha_i).
Eigen::MatrixXd reverse_step(const Eigen::MatrixXd& corrupted, int i,
                             const Eigen::MatrixXd& posterior_mean, const NoiseSchedule& schedule);

struct SamplerDiagnostics {
  std::vector<double> ess;     // per reverse step, index 0 is step N
  std::vector<bool> fallback;  // per reverse step
  int fallback_count() const;
};

struct SampleResult {
  TrajectorySample trajectory;
  SamplerDiagnostics diagnostics;
};

/// Reverse diffusion from U^N ~ N(0, I) down to U^0, re-estimating the
/// posterior mean at every step; the final controls are clamped to bounds
/// and the states re-derived.
SampleResult sample_trajectory(const System& sys, const MlpCertificate& cert,
                               const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                               const SamplerConfig& scfg, const StateVector& x0,
                               const CostFunction& cost, std::uint64_t stream_seed,
                               double t0 = 0.0);

/// Executed or planned trajectory in the CSV export layout: row k holds the
/// state a control is applied at, the control, and certificate diagnostics.
struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<StateVector> states;
  std::vector<ControlVector> controls;
  /// Adds the T rows of a planned sample.
  void append(const TrajectorySample& sample, double dt);
};

/// Header `t,x0..x{n-1},u0..u{m-1},V,lie,violation_hinge`; 17 significant digits.
void write_trajectory_csv(std::ostream& out, const System& sys, const MlpCertificate& cert,
                          const CertificateConfig& ccfg, const TrajectoryRecord& record,
                          bool header = true);

}  // namespace s2diff
