#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace s2diff {

/// Caller broke a precondition (shape mismatch, empty batch, Q = 0, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input contains NaN/inf where finite values are required.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation needs f(x,u) = f0(x) + g(x)u but the system is not control-affine.
class UnsupportedStructure : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Numerical integration produced a non-finite state.
class IntegrationBlowup : public std::runtime_error {
 public:
  IntegrationBlowup(const std::string& what, Eigen::VectorXd state,
                    std::ptrdiff_t step_index = -1)
      : std::runtime_error(what), state_(std::move(state)), index_(step_index) {}

  const Eigen::VectorXd& state() const { return state_; }
  /// Rollout index of the failing step, or -1 for a single step.
  std::ptrdiff_t step_index() const { return index_; }

 private:
  Eigen::VectorXd state_;
  std::ptrdiff_t index_;
};

/// Density evaluation hit a non-finite certificate value. Distinct from a
/// legitimate log-density of -inf.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(const std::string& what, std::size_t minibatch)
      : std::runtime_error(what), minibatch_(minibatch) {}
  std::size_t minibatch_index() const { return minibatch_; }

 private:
  std::size_t minibatch_;
};

/// Every trajectory of a collection epoch failed.
class EpochError : public std::runtime_error {
 public:
  EpochError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

/// Bad configuration or constants file. `key()` names the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message),
        key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace s2diff
