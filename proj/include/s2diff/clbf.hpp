#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/dynamics.hpp"
#include "s2diff/errors.hpp"
#include "s2diff/mlp.hpp"

namespace s2diff {

struct CertificateConfig {
  double c = 1.0;        // safety level: V <= c on the safe set, V >= c on the unsafe set
  double lambda = 1.0;   // dissipation rate
  double eps = 0.01;     // violation buffer
  double alpha1 = 1.0;   // weight of the continuous decrease hinge
  double alpha2 = 1.0;   // weight of the discrete decrease hinge
  /// Time between a state and its successor. The discrete hinge is
  /// [V(x+) - V(x) + h (lambda V(x) + eps)]^+, so h = 1 gives the unit-step form.
  double discrete_step = 0.1;

  void validate() const;
};

enum class StateLabel { goal, safe, unsafe, interior };

const char* to_string(StateLabel label);
StateLabel label_from_region(Region region);

struct LabeledState {
  StateVector x;
  StateLabel label = StateLabel::interior;
  std::optional<StateVector> successor;
  std::optional<ControlVector> control;
  double time = 0.0;  // only read by time-varying systems
};

/// Anything with a scalar value and an input gradient. MlpCertificate
/// satisfies it; tests wire analytic potentials through the same interface.
template <class P>
concept ScalarPotential = requires(const P& p, const Eigen::VectorXd& x) {
  { p.value(x) } -> std::convertible_to<double>;
  { p.gradient(x) } -> std::convertible_to<Eigen::VectorXd>;
};

/// L_f V(x, u) = grad V(x) . f(x, u)
template <ScalarPotential P>
double lie_derivative(const P& potential, const System& sys, const StateVector& x,
                      const ControlVector& u, double t = 0.0) {
  const Eigen::VectorXd grad = potential.gradient(x);
  const Eigen::VectorXd f = sys.dynamics(x, u, t);
  if (grad.size() != f.size()) {
    throw ContractError("lie_derivative: certificate input does not match state dimension");
  }
  return grad.dot(f);
}

/// Six-term certificate loss, averaged over the batch:
///   goal:     |V(x)|
///   all:      [-V(x)]^+
///   safe:     [V(x) - c]^+
///   unsafe:   [c - V(x)]^+
///   non-goal: alpha1 [L_f V(x, u) + lambda V(x) + eps]^+
///             alpha2 [V(x+) - V(x) + h (lambda V(x) + eps)]^+
/// Hinges are plain ReLU. Non-goal samples need a control when alpha1 > 0
/// and a control plus successor when alpha2 > 0.
double clbf_loss(const MlpCertificate& cert, const CertificateConfig& cfg, const System& sys,
                 const std::vector<LabeledState>& batch);

/// Exact parameter gradient of clbf_loss, including the second-order path
/// through grad V inside the Lie-derivative hinge. Controls and successors
/// are constants.
MlpParams clbf_loss_grad(const MlpCertificate& cert, const CertificateConfig& cfg,
                         const System& sys, const std::vector<LabeledState>& batch,
                         double* loss = nullptr);

/// Text checkpoint: header (layer sizes, activation, certificate config,
/// seed) followed by one line per weight row and bias vector, each value in
/// shortest round-trip decimal form.
struct Checkpoint {
  MlpCertificate certificate;
  CertificateConfig config;
  std::uint64_t seed = 0;
};

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace s2diff
