#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/keyvalue.hpp"

namespace s2diff {

using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;

enum class Region { safe, unsafe, neither };

const char* to_string(Region r);

enum class Scheme { euler, rk4 };

struct IntegratorConfig {
  double dt = 0.1;
  Scheme scheme = Scheme::rk4;

  void validate() const;
};

Scheme parse_scheme(const std::string& name);
const char* to_string(Scheme s);

/// Split of a control-affine vector field, f(x, u) = drift + input_matrix * u.
struct AffineParts {
  Eigen::VectorXd drift;
  Eigen::MatrixXd input_matrix;
};

/// A benchmark dynamical system. Immutable after construction; every member
/// function is safe to call concurrently.
///
/// Physical constants, bounds, goal, safe/unsafe descriptors, and the
/// initial-state and evaluation boxes come from a constants file (see
/// systems/*.conf). Time `t` only matters for systems that track a
/// time-varying reference (the cars); everything else ignores it.
class System {
 public:
  explicit System(const KeyValueFile& constants);
  virtual ~System() = default;

  System(const System&) = delete;
  System& operator=(const System&) = delete;

  const std::string& name() const { return name_; }
  int state_dim() const { return n_; }
  int control_dim() const { return m_; }

  const Eigen::VectorXd& control_lo() const { return control_lo_; }
  const Eigen::VectorXd& control_hi() const { return control_hi_; }
  const StateVector& goal() const { return goal_; }
  /// Control that holds the goal at rest, f(goal, u_eq) = 0.
  const ControlVector& equilibrium_control() const { return u_eq_; }
  /// Box initial states are drawn from during training.
  const Eigen::VectorXd& init_lo() const { return init_lo_; }
  const Eigen::VectorXd& init_hi() const { return init_hi_; }
  /// Box initial states are drawn from during evaluation rollouts.
  const Eigen::VectorXd& eval_lo() const { return eval_lo_; }
  const Eigen::VectorXd& eval_hi() const { return eval_hi_; }
  /// Compact domain over which violation volume is measured.
  const Eigen::VectorXd& domain_lo() const { return domain_lo_; }
  const Eigen::VectorXd& domain_hi() const { return domain_hi_; }
  /// Suggested safety level c for this task.
  double safe_level() const { return safe_level_; }
  const KeyValueFile& constants() const { return constants_; }

  virtual bool control_affine() const { return true; }

  /// x_dot = f(x, u). Does not clamp u.
  StateVector dynamics(const StateVector& x, const ControlVector& u, double t = 0.0) const;
  /// Throws UnsupportedStructure on non-affine systems.
  AffineParts affine_parts(const StateVector& x, double t = 0.0) const;

  Region classify(const StateVector& x) const;
  bool in_safe_set(const StateVector& x) const;
  bool in_unsafe_set(const StateVector& x) const;

  ControlVector clamp_control(const ControlVector& u) const;

 protected:
  /// Affine systems override drift/input_matrix; non-affine ones override
  /// vector_field directly and return false from control_affine().
  virtual Eigen::VectorXd drift(const StateVector& x, double t) const;
  virtual Eigen::MatrixXd input_matrix(const StateVector& x, double t) const;
  virtual StateVector vector_field(const StateVector& x, const ControlVector& u, double t) const;

  virtual bool safe_predicate(const StateVector& x) const = 0;
  virtual bool unsafe_predicate(const StateVector& x) const = 0;

  double param(const std::string& key) const { return constants_.get_real(key); }

 private:
  void check_state(const StateVector& x) const;

  KeyValueFile constants_;
  std::string name_;
  int n_ = 0;
  int m_ = 0;
  Eigen::VectorXd control_lo_, control_hi_;
  StateVector goal_;
  ControlVector u_eq_;
  Eigen::VectorXd init_lo_, init_hi_, eval_lo_, eval_hi_, domain_lo_, domain_hi_;
  double safe_level_ = 1.0;
};

using SystemPtr = std::shared_ptr<const System>;

/// Names of the built-in systems (one per systems/*.conf file).
std::vector<std::string> builtin_system_names();
/// Text of the built-in constants file for `name`.
const std::string& builtin_constants_text(const std::string& name);
/// Builds a system from parsed constants; the `system` key selects the model.
SystemPtr make_system(const KeyValueFile& constants);
/// Built-in constants for `name`, with `overrides` applied on top.
SystemPtr load_system(const std::string& name, const KeyValueFile& overrides = {});
SystemPtr load_system_file(const std::filesystem::path& path);

/// One integration step with u held constant. Throws IntegrationBlowup on a
/// non-finite result.
StateVector step(const System& sys, const StateVector& x, const ControlVector& u,
                 const IntegratorConfig& cfg, double t = 0.0);

struct Rollout {
  std::vector<StateVector> states;  // x_1 .. x_T
  std::vector<ControlVector> controls;  // applied (clamped) u_1 .. u_T
  std::vector<bool> clamped;  // whether u_t was outside the bounds
};

/// x_t = step(x_{t-1}, clamp(u_t)) for t = 1..T. IntegrationBlowup carries
/// the failing step index.
Rollout rollout(const System& sys, const StateVector& x0,
                std::span<const ControlVector> controls, const IntegratorConfig& cfg,
                double t0 = 0.0);

}  // namespace s2diff
