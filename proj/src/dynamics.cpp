#include "s2diff/dynamics.hpp"

#include <algorithm>
#include <map>

#include "s2diff/errors.hpp"

namespace s2diff {
namespace {

Eigen::VectorXd vector_key(const KeyValueFile& kv, const std::string& key, int dim) {
  const auto values = kv.get_reals(key);
  if (static_cast<int>(values.size()) != dim) {
    throw ConfigError(key, "expected " + std::to_string(dim) + " values, got " +
                               std::to_string(values.size()));
  }
  return Eigen::Map<const Eigen::VectorXd>(values.data(), dim);
}

Eigen::VectorXd vector_key_or(const KeyValueFile& kv, const std::string& key, int dim,
                              const Eigen::VectorXd& fallback) {
  return kv.contains(key) ? vector_key(kv, key, dim) : fallback;
}

void check_box(const std::string& key, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
               bool strict) {
  for (Eigen::Index i = 0; i < lo.size(); ++i) {
    if (strict ? !(lo(i) < hi(i)) : !(lo(i) <= hi(i))) {
      throw ConfigError(key, "lower bound must be below upper bound in every dimension");
    }
  }
}

}  // namespace

const char* to_string(Region r) {
  switch (r) {
    case Region::safe: return "safe";
    case Region::unsafe: return "unsafe";
    case Region::neither: return "neither";
  }
  return "?";
}

void IntegratorConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("integrator.dt", "must be > 0");
}

Scheme parse_scheme(const std::string& name) {
  if (name == "euler") return Scheme::euler;
  if (name == "rk4") return Scheme::rk4;
  throw ConfigError("integrator.scheme", "expected 'euler' or 'rk4', got '" + name + "'");
}

const char* to_string(Scheme s) { return s == Scheme::euler ? "euler" : "rk4"; }

System::System(const KeyValueFile& constants) : constants_(constants) {
  name_ = constants_.get_string("system");
  n_ = static_cast<int>(constants_.get_int("state_dim"));
  m_ = static_cast<int>(constants_.get_int("control_dim"));
  if (n_ < 1) throw ConfigError("state_dim", "must be >= 1");
  if (m_ < 1) throw ConfigError("control_dim", "must be >= 1");
  control_lo_ = vector_key(constants_, "control_lo", m_);
  control_hi_ = vector_key(constants_, "control_hi", m_);
  check_box("control_lo", control_lo_, control_hi_, true);
  goal_ = vector_key(constants_, "goal", n_);
  u_eq_ = vector_key_or(constants_, "u_eq", m_, Eigen::VectorXd::Zero(m_));
  init_lo_ = vector_key(constants_, "init_lo", n_);
  init_hi_ = vector_key(constants_, "init_hi", n_);
  check_box("init_lo", init_lo_, init_hi_, false);
  eval_lo_ = vector_key_or(constants_, "eval_lo", n_, init_lo_);
  eval_hi_ = vector_key_or(constants_, "eval_hi", n_, init_hi_);
  check_box("eval_lo", eval_lo_, eval_hi_, false);
  domain_lo_ = vector_key_or(constants_, "domain_lo", n_, init_lo_);
  domain_hi_ = vector_key_or(constants_, "domain_hi", n_, init_hi_);
  check_box("domain_lo", domain_lo_, domain_hi_, false);
  safe_level_ = constants_.get_real("safe_level", 1.0);
}

void System::check_state(const StateVector& x) const {
  if (x.size() != n_) {
    throw ContractError(name_ + ": state has dimension " + std::to_string(x.size()) +
                        ", expected " + std::to_string(n_));
  }
  if (!x.allFinite()) throw DomainError(name_ + ": non-finite state");
}

StateVector System::dynamics(const StateVector& x, const ControlVector& u, double t) const {
  check_state(x);
  if (u.size() != m_) {
    throw ContractError(name_ + ": control has dimension " + std::to_string(u.size()) +
                        ", expected " + std::to_string(m_));
  }
  if (!u.allFinite()) throw DomainError(name_ + ": non-finite control");
  return vector_field(x, u, t);
}

AffineParts System::affine_parts(const StateVector& x, double t) const {
  if (!control_affine()) {
    throw UnsupportedStructure(name_ + " is not control-affine");
  }
  check_state(x);
  return {drift(x, t), input_matrix(x, t)};
}

StateVector System::vector_field(const StateVector& x, const ControlVector& u, double t) const {
  return drift(x, t) + input_matrix(x, t) * u;
}

Eigen::VectorXd System::drift(const StateVector&, double) const {
  throw UnsupportedStructure(name_ + " has no drift term");
}

Eigen::MatrixXd System::input_matrix(const StateVector&, double) const {
  throw UnsupportedStructure(name_ + " has no input matrix");
}

bool System::in_safe_set(const StateVector& x) const {
  check_state(x);
  return safe_predicate(x);
}

bool System::in_unsafe_set(const StateVector& x) const {
  check_state(x);
  return unsafe_predicate(x);
}

Region System::classify(const StateVector& x) const {
  check_state(x);
  if (unsafe_predicate(x)) return Region::unsafe;
  if (safe_predicate(x)) return Region::safe;
  return Region::neither;
}

ControlVector System::clamp_control(const ControlVector& u) const {
  return u.cwiseMax(control_lo_).cwiseMin(control_hi_);
}

StateVector step(const System& sys, const StateVector& x, const ControlVector& u,
                 const IntegratorConfig& cfg, double t) {
  if (!(cfg.dt > 0.0)) throw ContractError("step: dt must be > 0");
  const double h = cfg.dt;
  StateVector next;
  if (cfg.scheme == Scheme::euler) {
    next = x + h * sys.dynamics(x, u, t);
  } else {
    // Intermediate stages may leave the finite range before the final
    // combination does; report those as a blowup too.
    try {
      const StateVector k1 = sys.dynamics(x, u, t);
      const StateVector k2 = sys.dynamics(x + 0.5 * h * k1, u, t + 0.5 * h);
      const StateVector k3 = sys.dynamics(x + 0.5 * h * k2, u, t + 0.5 * h);
      const StateVector k4 = sys.dynamics(x + h * k3, u, t + h);
      next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } catch (const DomainError&) {
      if (!x.allFinite() || !u.allFinite()) throw;
      throw IntegrationBlowup(sys.name() + ": RK4 stage left the finite range", x);
    }
  }
  if (!next.allFinite()) {
    throw IntegrationBlowup(sys.name() + ": integration produced a non-finite state", next);
  }
  return next;
}

Rollout rollout(const System& sys, const StateVector& x0, std::span<const ControlVector> controls,
                const IntegratorConfig& cfg, double t0) {
  Rollout out;
  out.states.reserve(controls.size());
  out.controls.reserve(controls.size());
  out.clamped.reserve(controls.size());
  StateVector x = x0;
  for (std::size_t k = 0; k < controls.size(); ++k) {
    ControlVector u = sys.clamp_control(controls[k]);
    out.clamped.push_back(!(u.array() == controls[k].array()).all());
    try {
      x = step(sys, x, u, cfg, t0 + static_cast<double>(k) * cfg.dt);
    } catch (const IntegrationBlowup& e) {
      throw IntegrationBlowup(e.what(), e.state(), static_cast<std::ptrdiff_t>(k));
    }
    out.states.push_back(x);
    out.controls.push_back(std::move(u));
  }
  return out;
}

}  // namespace s2diff
