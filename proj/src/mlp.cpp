#include "s2diff/mlp.hpp"

#include <cmath>

#include "s2diff/errors.hpp"
#include "s2diff/random.hpp"

namespace s2diff {
namespace {

Eigen::ArrayXXd relu_mask(const Eigen::MatrixXd& pre) {
  return (pre.array() > 0.0).cast<double>();
}

}  // namespace

MlpParams MlpParams::zeros_like(const MlpParams& other) {
  MlpParams out;
  for (const auto& w : other.weights) out.weights.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& b : other.biases) out.biases.push_back(Eigen::VectorXd::Zero(b.size()));
  return out;
}

std::size_t MlpParams::size() const {
  std::size_t total = 0;
  for (const auto& w : weights) total += static_cast<std::size_t>(w.size());
  for (const auto& b : biases) total += static_cast<std::size_t>(b.size());
  return total;
}

bool MlpParams::all_finite() const {
  for (const auto& w : weights) if (!w.allFinite()) return false;
  for (const auto& b : biases) if (!b.allFinite()) return false;
  return true;
}

Eigen::VectorXd MlpParams::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(size()));
  Eigen::Index at = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    for (Eigen::Index r = 0; r < weights[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < weights[k].cols(); ++c) flat(at++) = weights[k](r, c);
    }
    flat.segment(at, biases[k].size()) = biases[k];
    at += biases[k].size();
  }
  return flat;
}

void MlpParams::unflatten(const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != size()) {
    throw ContractError("MlpParams::unflatten: size mismatch");
  }
  Eigen::Index at = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    for (Eigen::Index r = 0; r < weights[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < weights[k].cols(); ++c) weights[k](r, c) = flat(at++);
    }
    biases[k] = flat.segment(at, biases[k].size());
    at += biases[k].size();
  }
}

MlpParams& MlpParams::operator+=(const MlpParams& rhs) {
  for (std::size_t k = 0; k < weights.size(); ++k) {
    weights[k] += rhs.weights[k];
    biases[k] += rhs.biases[k];
  }
  return *this;
}

MlpParams& MlpParams::operator*=(double s) {
  for (auto& w : weights) w *= s;
  for (auto& b : biases) b *= s;
  return *this;
}

MlpCertificate::MlpCertificate(MlpParams params) { set_params(std::move(params)); }

void MlpCertificate::set_params(MlpParams params) {
  if (params.weights.empty() || params.weights.size() != params.biases.size()) {
    throw ContractError("MlpCertificate: need one bias per weight matrix and at least one layer");
  }
  for (std::size_t k = 0; k < params.weights.size(); ++k) {
    if (params.biases[k].size() != params.weights[k].rows()) {
      throw ContractError("MlpCertificate: bias " + std::to_string(k + 1) + " has wrong length");
    }
    if (k > 0 && params.weights[k].cols() != params.weights[k - 1].rows()) {
      throw ContractError("MlpCertificate: layer " + std::to_string(k + 1) +
                          " input does not match previous output");
    }
  }
  if (params.weights.back().rows() != 1) {
    throw ContractError("MlpCertificate: output layer must be scalar");
  }
  if (!biases_enabled_) {
    for (const auto& b : params.biases) {
      if (!b.isZero(0.0)) throw ContractError("MlpCertificate: biases are disabled but nonzero");
    }
  }
  if (center_.size() != 0 && center_.size() != params.weights.front().cols()) {
    throw ContractError("MlpCertificate: centre does not match the input dimension");
  }
  params_ = std::move(params);
}

void MlpCertificate::set_center(Eigen::VectorXd center) {
  if (center.size() != 0 && center.size() != input_dim()) {
    throw ContractError("MlpCertificate: centre does not match the input dimension");
  }
  center_ = std::move(center);
}

void MlpCertificate::set_biases_enabled(bool enabled) {
  biases_enabled_ = enabled;
  if (!enabled) {
    for (auto& b : params_.biases) b.setZero();
  }
}

Eigen::MatrixXd MlpCertificate::centered(const Eigen::MatrixXd& X) const {
  if (center_.size() == 0) return X;
  return X.colwise() - center_;
}

MlpCertificate MlpCertificate::zeros(const std::vector<int>& layer_sizes) {
  if (layer_sizes.size() < 2) throw ContractError("MlpCertificate: need at least two layer sizes");
  MlpParams p;
  for (std::size_t k = 1; k < layer_sizes.size(); ++k) {
    if (layer_sizes[k] < 1 || layer_sizes[k - 1] < 1) {
      throw ContractError("MlpCertificate: layer sizes must be positive");
    }
    p.weights.push_back(Eigen::MatrixXd::Zero(layer_sizes[k], layer_sizes[k - 1]));
    p.biases.push_back(Eigen::VectorXd::Zero(layer_sizes[k]));
  }
  return MlpCertificate(std::move(p));
}

MlpCertificate MlpCertificate::kaiming(const std::vector<int>& layer_sizes, std::uint64_t seed) {
  MlpCertificate cert = zeros(layer_sizes);
  MlpParams p = cert.params_;
  Rng rng = substream(seed, {stream::network_init});
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    const double fan_in = static_cast<double>(p.weights[k].cols());
    const double w_bound = std::sqrt(6.0 / fan_in);
    const double b_bound = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index r = 0; r < p.weights[k].rows(); ++r) {
      for (Eigen::Index c = 0; c < p.weights[k].cols(); ++c) p.weights[k](r, c) = w_bound * unit(rng);
    }
    for (Eigen::Index r = 0; r < p.biases[k].size(); ++r) p.biases[k](r) = b_bound * unit(rng);
  }
  cert.set_params(std::move(p));
  return cert;
}

std::vector<int> MlpCertificate::layer_sizes() const {
  std::vector<int> sizes;
  if (params_.weights.empty()) return sizes;
  sizes.push_back(static_cast<int>(params_.weights.front().cols()));
  for (const auto& w : params_.weights) sizes.push_back(static_cast<int>(w.rows()));
  return sizes;
}

int MlpCertificate::input_dim() const {
  return params_.weights.empty() ? 0 : static_cast<int>(params_.weights.front().cols());
}

void MlpCertificate::check_input(const Eigen::MatrixXd& X) const {
  if (params_.weights.empty()) throw ContractError("MlpCertificate: network has no layers");
  if (X.rows() != input_dim()) {
    throw ContractError("MlpCertificate: input has dimension " + std::to_string(X.rows()) +
                        ", network expects " + std::to_string(input_dim()));
  }
}

ForwardCache MlpCertificate::forward(const Eigen::MatrixXd& X) const {
  check_input(X);
  const std::size_t L = params_.weights.size();
  ForwardCache cache;
  cache.act.reserve(L);
  cache.pre.reserve(L - 1);
  cache.act.push_back(centered(X));
  for (std::size_t k = 0; k + 1 < L; ++k) {
    Eigen::MatrixXd z = params_.weights[k] * cache.act.back();
    z.colwise() += params_.biases[k];
    cache.act.push_back(z.cwiseMax(0.0));
    cache.pre.push_back(std::move(z));
  }
  cache.output = params_.weights.back() * cache.act.back();
  cache.output.array() += params_.biases.back()(0);
  return cache;
}

Eigen::MatrixXd MlpCertificate::input_gradients(const ForwardCache& cache) const {
  const std::size_t L = params_.weights.size();
  const Eigen::Index B = cache.act.front().cols();
  Eigen::MatrixXd delta = params_.weights.back().transpose().replicate(1, B);
  for (std::size_t k = L - 1; k-- > 0;) {
    delta = params_.weights[k].transpose() * (delta.array() * relu_mask(cache.pre[k])).matrix();
  }
  return delta;
}

Eigen::RowVectorXd MlpCertificate::directional_derivatives(const ForwardCache& cache,
                                                           const Eigen::MatrixXd& F) const {
  if (F.rows() != input_dim() || F.cols() != cache.act.front().cols()) {
    throw ContractError("MlpCertificate: direction matrix shape mismatch");
  }
  Eigen::MatrixXd t = F;
  for (std::size_t k = 0; k + 1 < params_.weights.size(); ++k) {
    t = ((params_.weights[k] * t).array() * relu_mask(cache.pre[k])).matrix();
  }
  return params_.weights.back() * t;
}

double MlpCertificate::value(const Eigen::VectorXd& x) const { return values(x)(0); }

Eigen::VectorXd MlpCertificate::gradient(const Eigen::VectorXd& x) const {
  return input_gradients(forward(x)).col(0);
}

Eigen::RowVectorXd MlpCertificate::values(const Eigen::MatrixXd& X) const {
  check_input(X);
  Eigen::MatrixXd a = centered(X);
  for (std::size_t k = 0; k + 1 < params_.weights.size(); ++k) {
    Eigen::MatrixXd z = params_.weights[k] * a;
    z.colwise() += params_.biases[k];
    a = z.cwiseMax(0.0);
  }
  Eigen::RowVectorXd v = params_.weights.back() * a;
  v.array() += params_.biases.back()(0);
  return v;
}

void MlpCertificate::values_and_gradients(const Eigen::MatrixXd& X, Eigen::RowVectorXd& V,
                                          Eigen::MatrixXd& G) const {
  ForwardCache cache = forward(X);
  G = input_gradients(cache);
  V = std::move(cache.output);
}

void MlpCertificate::accumulate_value_param_grad(const ForwardCache& cache,
                                                 const Eigen::RowVectorXd& dV,
                                                 MlpParams& grad) const {
  const std::size_t L = params_.weights.size();
  grad.weights[L - 1].noalias() += dV * cache.act[L - 1].transpose();
  grad.biases[L - 1](0) += dV.sum();
  Eigen::MatrixXd dA = params_.weights[L - 1].transpose() * dV;
  for (std::size_t k = L - 1; k-- > 0;) {
    const Eigen::MatrixXd dZ = (dA.array() * relu_mask(cache.pre[k])).matrix();
    grad.weights[k].noalias() += dZ * cache.act[k].transpose();
    grad.biases[k] += dZ.rowwise().sum();
    if (k > 0) dA = params_.weights[k].transpose() * dZ;
  }
}

void MlpCertificate::accumulate_directional_param_grad(const ForwardCache& cache,
                                                       const Eigen::MatrixXd& F,
                                                       const Eigen::RowVectorXd& dL,
                                                       MlpParams& grad) const {
  const std::size_t L = params_.weights.size();
  // Tangent activations t_0 = F, t_k = mask_k (W_k t_{k-1}).
  std::vector<Eigen::MatrixXd> tangent;
  tangent.reserve(L);
  tangent.push_back(F);
  for (std::size_t k = 0; k + 1 < L; ++k) {
    tangent.push_back(((params_.weights[k] * tangent.back()).array() * relu_mask(cache.pre[k])).matrix());
  }
  grad.weights[L - 1].noalias() += dL * tangent[L - 1].transpose();
  Eigen::MatrixXd dT = params_.weights[L - 1].transpose() * dL;
  for (std::size_t k = L - 1; k-- > 0;) {
    const Eigen::MatrixXd dS = (dT.array() * relu_mask(cache.pre[k])).matrix();
    grad.weights[k].noalias() += dS * tangent[k].transpose();
    if (k > 0) dT = params_.weights[k].transpose() * dS;
  }
}

}  // namespace s2diff
