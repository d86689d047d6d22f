#include "s2diff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

#include <omp.h>

#include "s2diff/errors.hpp"
#include "s2diff/random.hpp"

namespace s2diff {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Candidates are evaluated in fixed-size chunks so the floating-point work
// per candidate does not depend on the worker count.
constexpr int kChunk = 32;

double relu(double z) { return z > 0.0 ? z : 0.0; }

enum class CandidateStatus : char { ok, blowup, bad_certificate };

/// Log densities of a batch of control sequences (physical units, already
/// within bounds) rolled out from x0.
void batch_log_density(const System& sys, const MlpCertificate& cert,
                       const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                       const StateVector& x0, double t0, const std::vector<Eigen::MatrixXd>& controls,
                       std::size_t first, std::size_t count, const CostFunction& cost,
                       const IntegratorConfig& integ, std::vector<DensityTerms>& terms,
                       std::vector<CandidateStatus>& status) {
  const int n = sys.state_dim();
  const int T = static_cast<int>(controls[first].rows());
  const auto cols = static_cast<Eigen::Index>(count) * (T + 1);
  const bool guided = gcfg.use_clbf_guidance;
  Eigen::MatrixXd X(n, cols);
  Eigen::MatrixXd F(n, cols);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t q = first + c;
    const Eigen::MatrixXd& U = controls[q];
    const Eigen::Index base = static_cast<Eigen::Index>(c) * (T + 1);
    DensityTerms& out = terms[q];
    out = DensityTerms{};
    status[q] = CandidateStatus::ok;
    StateVector x = x0;
    X.col(base) = x;
    double running = 0.0;
    try {
      for (int t = 0; t < T; ++t) {
        const ControlVector u = U.row(t).transpose();
        const double time = t0 + t * integ.dt;
        if (guided) F.col(base + t) = sys.dynamics(x, u, time);
        x = step(sys, x, u, integ, time);
        X.col(base + t + 1) = x;
        if (!gcfg.nominal) running += cost(x, u);
      }
    } catch (const IntegrationBlowup&) {
      status[q] = CandidateStatus::blowup;
      X.middleCols(base, T + 1).setZero();
      F.middleCols(base, T + 1).setZero();
      continue;
    } catch (const DomainError&) {
      status[q] = CandidateStatus::blowup;
      X.middleCols(base, T + 1).setZero();
      F.middleCols(base, T + 1).setZero();
      continue;
    }
    F.col(base + T).setZero();
    if (gcfg.nominal) {
      out.log_cost = -(U - *gcfg.nominal).squaredNorm() / gcfg.gamma1;
    } else {
      out.log_cost = -running / gcfg.gamma;
    }
  }
  if (!guided) return;

  Eigen::RowVectorXd V;
  Eigen::MatrixXd G;
  cert.values_and_gradients(X, V, G);
  const double tau = gcfg.effective_safety_temp();
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t q = first + c;
    if (status[q] != CandidateStatus::ok) continue;
    const Eigen::Index base = static_cast<Eigen::Index>(c) * (T + 1);
    double stable = 0.0;
    double unsafe_energy = 0.0;
    bool violates = false;
    bool finite = true;
    for (int t = 0; t < T; ++t) {
      const double v_here = V(base + t);
      const double lie = G.col(base + t).dot(F.col(base + t));
      const double hinge = relu(lie + ccfg.lambda * v_here);
      stable += hinge * hinge;
      const double v_next = V(base + t + 1);
      const double excess = relu(v_next - ccfg.c);
      unsafe_energy += excess * excess;
      violates = violates || v_next > ccfg.c;
      finite = finite && std::isfinite(v_here) && std::isfinite(v_next) && std::isfinite(lie);
    }
    if (!finite) {
      status[q] = CandidateStatus::bad_certificate;
      continue;
    }
    DensityTerms& out = terms[q];
    out.log_stable = -stable / gcfg.gamma2;
    if (gcfg.safety_mode == SafetyMode::indicator) {
      out.log_safe = violates ? kNegInf : 0.0;
    } else {
      out.log_safe = -unsafe_energy / tau;
    }
  }
}

void check_guidance_shapes(const System& sys, const MlpCertificate& cert,
                           const GuidanceConfig& gcfg, int horizon) {
  if (gcfg.use_clbf_guidance && cert.input_dim() != sys.state_dim()) {
    throw ContractError("certificate input dimension does not match " + sys.name());
  }
  if (gcfg.nominal && (gcfg.nominal->rows() != horizon || gcfg.nominal->cols() != sys.control_dim())) {
    throw ContractError("nominal controls must be T x m");
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::sigmoid(int steps, double final_alpha_bar, double sharpness) {
  if (steps < 1) throw ConfigError("sampler.diffusion_steps", "must be >= 1");
  if (!(final_alpha_bar > 0.0 && final_alpha_bar < 1.0)) {
    throw ConfigError("sampler.final_alpha_bar", "must lie in (0, 1)");
  }
  if (!(sharpness > 0.0)) throw ConfigError("sampler.schedule_sharpness", "must be > 0");
  auto logistic = [sharpness](double s) { return 1.0 / (1.0 + std::exp(-sharpness * (s - 0.5))); };
  const double lo = logistic(0.0), hi = logistic(1.0);
  std::vector<double> abar(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    const double r = (logistic(static_cast<double>(i) / steps) - lo) / (hi - lo);
    abar[i] = 1.0 - (1.0 - final_alpha_bar) * r;
  }
  abar.front() = 1.0;
  abar.back() = final_alpha_bar;
  return from_alpha_bar(std::move(abar));
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
  NoiseSchedule s;
  s.alpha_bar = std::move(alpha_bar);
  s.alpha.assign(s.alpha_bar.size(), 1.0);
  for (std::size_t i = 1; i < s.alpha_bar.size(); ++i) {
    s.alpha[i] = s.alpha_bar[i] / s.alpha_bar[i - 1];
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (alpha_bar.size() < 2 || alpha.size() != alpha_bar.size()) {
    throw ConfigError("sampler.schedule", "need at least one diffusion step");
  }
  if (alpha_bar.front() != 1.0) throw ConfigError("sampler.schedule", "alpha_bar[0] must be 1");
  for (std::size_t i = 1; i < alpha_bar.size(); ++i) {
    if (!(alpha_bar[i] < alpha_bar[i - 1]) || !(alpha_bar[i] > 0.0)) {
      throw ConfigError("sampler.schedule", "alpha_bar must be positive and strictly decreasing");
    }
  }
}

void GuidanceConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("guidance.gamma", "must be > 0");
  if (!(gamma1 > 0.0)) throw ConfigError("guidance.gamma1", "must be > 0");
  if (!(gamma2 > 0.0)) throw ConfigError("guidance.gamma2", "must be > 0");
  if (safety_temp && !(*safety_temp > 0.0)) throw ConfigError("guidance.safety_temp", "must be > 0");
}

void SamplerConfig::validate() const {
  if (horizon < 1) throw ConfigError("sampler.horizon", "must be >= 1");
  if (num_candidates < 1) throw ConfigError("sampler.num_candidates", "must be >= 1");
  schedule.validate();
  integrator.validate();
}

CostFunction default_cost(const System& sys) {
  const StateVector goal = sys.goal();
  const ControlVector u_eq = sys.equilibrium_control();
  return [goal, u_eq](const StateVector& x, const ControlVector& u) {
    return (x - goal).squaredNorm() + 0.01 * (u - u_eq).squaredNorm();
  };
}

TrajectorySample TrajectorySample::make(const System& sys, const StateVector& x0,
                                        const Eigen::MatrixXd& controls,
                                        const IntegratorConfig& integ, double t0) {
  if (controls.cols() != sys.control_dim()) throw ContractError("controls must be T x m");
  std::vector<ControlVector> seq;
  seq.reserve(static_cast<std::size_t>(controls.rows()));
  for (Eigen::Index t = 0; t < controls.rows(); ++t) seq.push_back(controls.row(t).transpose());
  const Rollout r = rollout(sys, x0, seq, integ, t0);
  TrajectorySample s;
  s.x0 = x0;
  s.t0 = t0;
  s.controls.resize(controls.rows(), controls.cols());
  s.states.resize(controls.rows(), sys.state_dim());
  for (Eigen::Index t = 0; t < controls.rows(); ++t) {
    s.controls.row(t) = r.controls[t].transpose();
    s.states.row(t) = r.states[t].transpose();
  }
  return s;
}

Eigen::MatrixXd TrajectorySample::all_states() const {
  Eigen::MatrixXd out(states.rows() + 1, x0.size());
  out.row(0) = x0.transpose();
  out.bottomRows(states.rows()) = states;
  return out;
}

Eigen::MatrixXd to_normalized(const System& sys, const Eigen::MatrixXd& controls) {
  const Eigen::RowVectorXd mid = (0.5 * (sys.control_hi() + sys.control_lo())).transpose();
  const Eigen::RowVectorXd half = (0.5 * (sys.control_hi() - sys.control_lo())).transpose();
  return (controls.rowwise() - mid).array().rowwise() / half.array();
}

Eigen::MatrixXd to_physical(const System& sys, const Eigen::MatrixXd& normalized) {
  const Eigen::RowVectorXd mid = (0.5 * (sys.control_hi() + sys.control_lo())).transpose();
  const Eigen::RowVectorXd half = (0.5 * (sys.control_hi() - sys.control_lo())).transpose();
  Eigen::MatrixXd out = normalized.array().rowwise() * half.array();
  out.rowwise() += mid;
  return out;
}

DensityTerms density_terms(const System& sys, const MlpCertificate& cert,
                           const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                           const TrajectorySample& sample, const CostFunction& cost,
                           const IntegratorConfig& integ) {
  gcfg.validate();
  check_guidance_shapes(sys, cert, gcfg, sample.horizon());
  // Regenerate the rollout from the controls; a stale `states` is never read.
  TrajectorySample fresh;
  try {
    fresh = TrajectorySample::make(sys, sample.x0, sample.controls, integ, sample.t0);
  } catch (const IntegrationBlowup&) {
    throw EvaluationError("density evaluation: rollout blew up");
  }
  std::vector<Eigen::MatrixXd> controls{fresh.controls};
  std::vector<DensityTerms> terms(1);
  std::vector<CandidateStatus> status(1);
  batch_log_density(sys, cert, ccfg, gcfg, fresh.x0, fresh.t0, controls, 0, 1, cost, integ, terms,
                    status);
  if (status[0] == CandidateStatus::blowup) {
    throw EvaluationError("density evaluation: rollout blew up");
  }
  if (status[0] == CandidateStatus::bad_certificate) {
    throw EvaluationError("density evaluation: certificate returned a non-finite value");
  }
  return terms[0];
}

double log_target_density(const System& sys, const MlpCertificate& cert,
                          const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                          const TrajectorySample& sample, const CostFunction& cost,
                          const IntegratorConfig& integ) {
  return density_terms(sys, cert, ccfg, gcfg, sample, cost, integ).total();
}

Eigen::MatrixXd forward_corrupt(const Eigen::MatrixXd& clean, int i, const NoiseSchedule& schedule,
                                const std::function<double()>& noise) {
  if (i < 0 || i > schedule.steps()) throw ContractError("forward_corrupt: step out of range");
  const double abar = schedule.alpha_bar[i];
  Eigen::MatrixXd out(clean.rows(), clean.cols());
  const double signal = std::sqrt(abar), spread = std::sqrt(1.0 - abar);
  for (Eigen::Index r = 0; r < clean.rows(); ++r) {
    for (Eigen::Index c = 0; c < clean.cols(); ++c) out(r, c) = signal * clean(r, c) + spread * noise();
  }
  return out;
}

Eigen::MatrixXd forward_corrupt(const Eigen::MatrixXd& clean, int i, const NoiseSchedule& schedule,
                                std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  return forward_corrupt(clean, i, schedule, [&] { return normal(rng); });
}

PosteriorEstimate estimate_posterior_mean(const System& sys, const MlpCertificate& cert,
                                          const CertificateConfig& ccfg,
                                          const GuidanceConfig& gcfg, const SamplerConfig& scfg,
                                          const StateVector& x0, double t0,
                                          const Eigen::MatrixXd& corrupted, int i,
                                          const CostFunction& cost, std::uint64_t stream_seed) {
  if (scfg.num_candidates < 1) throw ContractError("estimate_posterior_mean: need Q >= 1");
  if (i < 1 || i > scfg.schedule.steps()) throw ContractError("estimate_posterior_mean: step out of range");
  const int T = static_cast<int>(corrupted.rows());
  const int m = sys.control_dim();
  if (corrupted.cols() != m) throw ContractError("estimate_posterior_mean: controls must be T x m");
  check_guidance_shapes(sys, cert, gcfg, T);

  const auto Q = static_cast<std::size_t>(scfg.num_candidates);
  const double abar = scfg.schedule.alpha_bar[i];
  const Eigen::MatrixXd center = corrupted / std::sqrt(abar);
  const double spread = std::sqrt((1.0 - abar) / abar);

  std::vector<Eigen::MatrixXd> normalized(Q);
  std::vector<Eigen::MatrixXd> physical(Q);
  std::vector<DensityTerms> terms(Q);
  std::vector<CandidateStatus> status(Q);
  const auto chunks = static_cast<long>((Q + kChunk - 1) / kChunk);

#pragma omp parallel for schedule(static)
  for (long chunk = 0; chunk < chunks; ++chunk) {
    const std::size_t first = static_cast<std::size_t>(chunk) * kChunk;
    const std::size_t count = std::min<std::size_t>(kChunk, Q - first);
    for (std::size_t q = first; q < first + count; ++q) {
      const std::uint64_t key =
          substream_seed(stream_seed, {stream::candidates, static_cast<std::uint64_t>(i), q});
      Eigen::MatrixXd z(T, m);
      for (int t = 0; t < T; ++t) {
        for (int k = 0; k < m; ++k) {
          const double eps = counter_normal(key, static_cast<std::uint64_t>(t * m + k));
          z(t, k) = std::clamp(center(t, k) + spread * eps, -1.0, 1.0);
        }
      }
      physical[q] = to_physical(sys, z);
      normalized[q] = std::move(z);
    }
    batch_log_density(sys, cert, ccfg, gcfg, x0, t0, physical, first, count, cost,
                      scfg.integrator, terms, status);
  }

  std::vector<double> logw(Q);
  double max_logw = kNegInf;
  for (std::size_t q = 0; q < Q; ++q) {
    logw[q] = status[q] == CandidateStatus::ok ? terms[q].total() : kNegInf;
    max_logw = std::max(max_logw, logw[q]);
  }
  PosteriorEstimate est;
  est.weights.assign(Q, 0.0);
  if (max_logw == kNegInf) {
    est.fallback = true;
    std::fill(est.weights.begin(), est.weights.end(), 1.0 / static_cast<double>(Q));
  } else {
    double total = 0.0;
    for (std::size_t q = 0; q < Q; ++q) {
      est.weights[q] = std::exp(logw[q] - max_logw);
      total += est.weights[q];
    }
    for (double& w : est.weights) w /= total;
  }
  est.mean = Eigen::MatrixXd::Zero(T, m);
  double sum_sq = 0.0;
  for (std::size_t q = 0; q < Q; ++q) {
    if (est.weights[q] == 0.0) continue;
    est.mean += est.weights[q] * normalized[q];
    sum_sq += est.weights[q] * est.weights[q];
  }
  est.ess = 1.0 / sum_sq;
  return est;
}

Eigen::MatrixXd reverse_step(const Eigen::MatrixXd& corrupted, int i,
                             const Eigen::MatrixXd& posterior_mean, const NoiseSchedule& schedule) {
  if (i < 1 || i > schedule.steps()) throw ContractError("reverse_step: step out of range");
  if (corrupted.rows() != posterior_mean.rows() || corrupted.cols() != posterior_mean.cols()) {
    throw ContractError("reverse_step: shape mismatch");
  }
  const double abar = schedule.alpha_bar[i];
  const double alpha = schedule.alpha[i];
  const Eigen::MatrixXd score = -(corrupted - std::sqrt(abar) * posterior_mean) / (1.0 - abar);
  return (corrupted + (1.0 - alpha) * score) / std::sqrt(alpha);
}

int SamplerDiagnostics::fallback_count() const {
  return static_cast<int>(std::count(fallback.begin(), fallback.end(), true));
}

SampleResult sample_trajectory(const System& sys, const MlpCertificate& cert,
                               const CertificateConfig& ccfg, const GuidanceConfig& gcfg,
                               const SamplerConfig& scfg, const StateVector& x0,
                               const CostFunction& cost, std::uint64_t stream_seed, double t0) {
  scfg.validate();
  gcfg.validate();
  const int T = scfg.horizon;
  const int m = sys.control_dim();
  const int N = scfg.schedule.steps();

  const std::uint64_t init_key = substream_seed(stream_seed, {stream::init_noise});
  Eigen::MatrixXd U(T, m);
  for (int t = 0; t < T; ++t) {
    for (int k = 0; k < m; ++k) U(t, k) = counter_normal(init_key, static_cast<std::uint64_t>(t * m + k));
  }
  SampleResult result;
  result.diagnostics.ess.reserve(static_cast<std::size_t>(N));
  result.diagnostics.fallback.reserve(static_cast<std::size_t>(N));
  for (int i = N; i >= 1; --i) {
    const PosteriorEstimate est =
        estimate_posterior_mean(sys, cert, ccfg, gcfg, scfg, x0, t0, U, i, cost, stream_seed);
    result.diagnostics.ess.push_back(est.ess);
    result.diagnostics.fallback.push_back(est.fallback);
    U = reverse_step(U, i, est.mean, scfg.schedule);
  }
  U = U.cwiseMax(-1.0).cwiseMin(1.0);
  result.trajectory = TrajectorySample::make(sys, x0, to_physical(sys, U), scfg.integrator, t0);
  return result;
}

void TrajectoryRecord::append(const TrajectorySample& sample, double dt) {
  StateVector x = sample.x0;
  for (int t = 0; t < sample.horizon(); ++t) {
    times.push_back(sample.t0 + t * dt);
    states.push_back(x);
    controls.push_back(sample.controls.row(t).transpose());
    x = sample.states.row(t).transpose();
  }
}

void write_trajectory_csv(std::ostream& out, const System& sys, const MlpCertificate& cert,
                          const CertificateConfig& ccfg, const TrajectoryRecord& record,
                          bool header) {
  const int n = sys.state_dim(), m = sys.control_dim();
  if (header) {
    out << 't';
    for (int i = 0; i < n; ++i) out << ",x" << i;
    for (int i = 0; i < m; ++i) out << ",u" << i;
    out << ",V,lie,violation_hinge\n";
  }
  const auto old_flags = out.flags();
  const auto old_precision = out.precision();
  out << std::setprecision(17);
  for (std::size_t k = 0; k < record.states.size(); ++k) {
    const StateVector& x = record.states[k];
    const ControlVector& u = record.controls[k];
    const double v = cert.value(x);
    const double lie = cert.gradient(x).dot(sys.dynamics(x, u, record.times[k]));
    out << record.times[k];
    for (int i = 0; i < n; ++i) out << ',' << x(i);
    for (int i = 0; i < m; ++i) out << ',' << u(i);
    out << ',' << v << ',' << lie << ',' << relu(lie + ccfg.lambda * v) << '\n';
  }
  out.flags(old_flags);
  out.precision(old_precision);
}

}  // namespace s2diff
