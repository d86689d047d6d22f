#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace s2diff {

/// Weights and biases of a fully connected network, one entry per layer.
/// Also used for parameter-shaped gradients and optimizer moments.
struct MlpParams {
  std::vector<Eigen::MatrixXd> weights;  // weights[k] is (out_k x in_k)
  std::vector<Eigen::VectorXd> biases;

  /// Zero tensors with the same shapes as `other`.
  static MlpParams zeros_like(const MlpParams& other);

  std::size_t size() const;  // total scalar count
  bool all_finite() const;
  Eigen::VectorXd flatten() const;  // W1 row-major, b1, W2, b2, ...
  void unflatten(const Eigen::VectorXd& flat);

  MlpParams& operator+=(const MlpParams& rhs);
  MlpParams& operator*=(double s);
};

/// Activations recorded by a batched forward pass; columns are samples.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;  // pre-activations of hidden layers
  std::vector<Eigen::MatrixXd> act;  // act[0] = input, act[k] = relu(pre[k-1])
  Eigen::RowVectorXd output;
};

/// Scalar-output ReLU network, V(x) = W_N relu(... relu(W_1 (x - x_c) + b_1) ...) + b_N.
/// Hidden layers use ReLU, the output layer is linear. The derivative of
/// ReLU at exactly zero is taken as 0. The input centre x_c defaults to 0.
/// With biases disabled every b_k is held at zero, so V is positively
/// homogeneous around x_c and V(x_c) = 0 exactly.
class MlpCertificate {
 public:
  MlpCertificate() = default;
  /// Takes ownership of `params`; throws ContractError if shapes do not
  /// compose or the output is not scalar.
  explicit MlpCertificate(MlpParams params);

  /// Layer sizes {n, h_1, ..., h_k, 1}, all parameters zero.
  static MlpCertificate zeros(const std::vector<int>& layer_sizes);
  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and fan-in scaled
  /// uniform biases, drawn from `seed`.
  static MlpCertificate kaiming(const std::vector<int>& layer_sizes, std::uint64_t seed);

  std::vector<int> layer_sizes() const;
  const Eigen::VectorXd& center() const { return center_; }
  /// Empty or input-sized.
  void set_center(Eigen::VectorXd center);
  bool biases_enabled() const { return biases_enabled_; }
  /// Disabling zeroes the biases; set_params then rejects nonzero ones.
  void set_biases_enabled(bool enabled);

  int input_dim() const;
  const MlpParams& params() const { return params_; }
  void set_params(MlpParams params);

  double value(const Eigen::VectorXd& x) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;

  /// Batched value for columns of `X` (n x B).
  Eigen::RowVectorXd values(const Eigen::MatrixXd& X) const;
  /// Batched value and input gradient. `G` is n x B.
  void values_and_gradients(const Eigen::MatrixXd& X, Eigen::RowVectorXd& V,
                            Eigen::MatrixXd& G) const;

  ForwardCache forward(const Eigen::MatrixXd& X) const;
  /// Input gradients for a cached forward pass.
  Eigen::MatrixXd input_gradients(const ForwardCache& cache) const;
  /// Directional derivatives dV/dx . F per column, i.e. grad V(x_b)^T F_b.
  Eigen::RowVectorXd directional_derivatives(const ForwardCache& cache,
                                             const Eigen::MatrixXd& F) const;

  /// grad += sum_b dV[b] * d V(x_b) / d params.
  void accumulate_value_param_grad(const ForwardCache& cache, const Eigen::RowVectorXd& dV,
                                   MlpParams& grad) const;
  /// grad += sum_b dL[b] * d (grad V(x_b)^T F_b) / d params, with F held
  /// constant. Activation masks are piecewise constant in the parameters,
  /// so biases receive no gradient through this path.
  void accumulate_directional_param_grad(const ForwardCache& cache, const Eigen::MatrixXd& F,
                                         const Eigen::RowVectorXd& dL, MlpParams& grad) const;

 private:
  void check_input(const Eigen::MatrixXd& X) const;
  Eigen::MatrixXd centered(const Eigen::MatrixXd& X) const;

  MlpParams params_;
  Eigen::VectorXd center_;
  bool biases_enabled_ = true;
};

}  // namespace s2diff
