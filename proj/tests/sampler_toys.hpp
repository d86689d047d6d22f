#pragma once

// Small sampler problems with known answers on the scalar plant
// x_dot = u, u in [-1, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "s2diff/diffusion.hpp"

namespace toys
{

using namespace s2diff;

struct ChainMoments
{
  double mean = 0.0;
  double std_error = 0.0;
  double spread = 0.0;
};

/// Target p(u) proportional to exp(-(u - mu)^2 / gamma), T = 1, no
/// certificate factors. Runs the full reverse chain once per seed.
inline ChainMoments gaussian_chain(double mu, double gamma, int seeds, int candidates = 256)
{
  const auto sys = load_system("linear_scalar");
  GuidanceConfig g;
  g.use_clbf_guidance = false;
  g.gamma = gamma;
  SamplerConfig sc;
  sc.horizon = 1;
  sc.num_candidates = candidates;
  const CostFunction cost = [mu](const StateVector &, const ControlVector & u) {
    return (u(0) - mu) * (u(0) - mu);
  };
  const auto cert = MlpCertificate::zeros({1, 4, 1});
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < seeds; ++k) {
    const auto r = sample_trajectory(*sys, cert, {}, g, sc, Eigen::VectorXd::Zero(1), cost, k);
    const double u = r.trajectory.controls(0, 0);
    s += u;
    s2 += u * u;
  }
  ChainMoments out;
  out.mean = s / seeds;
  const double var = std::max(s2 / seeds - out.mean * out.mean, 0.0);
  out.spread = std::sqrt(var);
  out.std_error = std::sqrt(var / seeds);
  return out;
}

/// V(x) = |x| as a two-unit ReLU network.
inline MlpCertificate abs_certificate()
{
  MlpParams p;
  p.weights.push_back((Eigen::MatrixXd(2, 1) << 1.0, -1.0).finished());
  p.biases.push_back(Eigen::VectorXd::Zero(2));
  p.weights.push_back((Eigen::MatrixXd(1, 2) << 1.0, 1.0).finished());
  p.biases.push_back(Eigen::VectorXd::Zero(1));
  return MlpCertificate(std::move(p));
}

/// Two-well cost with wells at u = +-0.6 plus the certificate factors of
/// V = |x| from x0 = 0.5, which favour the negative well.
struct GridToy
{
  std::shared_ptr<const System> sys = load_system("linear_scalar");
  MlpCertificate cert = abs_certificate();
  CertificateConfig ccfg;
  GuidanceConfig gcfg;
  SamplerConfig scfg;
  StateVector x0 = Eigen::VectorXd::Constant(1, 0.5);
  CostFunction cost = [](const StateVector &, const ControlVector & u) {
    const double w = u(0) * u(0) - 0.36;
    return w * w;
  };

  GridToy()
  {
    gcfg.gamma = 0.05;
    gcfg.gamma2 = 0.5;
    scfg.horizon = 1;
  }

  double log_density(double u) const
  {
    const auto s = TrajectorySample::make(*sys, x0, Eigen::MatrixXd::Constant(1, 1, u), scfg.integrator);
    return log_target_density(*sys, cert, ccfg, gcfg, s, cost, scfg.integrator);
  }
};

struct GridResult
{
  double argmax = 0.0;  // brute-force maximiser of the target density
  double modal = 0.0;   // centre of the most populated cell of sampler outputs
  double cell = 0.0;
  int modal_count = 0;
};

inline GridResult grid_toy(int seeds, int cells = 40, int grid_points = 4001)
{
  GridToy toy;
  GridResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid_points; ++k) {
    const double u = -1.0 + 2.0 * k / (grid_points - 1);
    const double v = toy.log_density(u);
    if (v > best) {
      best = v;
      out.argmax = u;
    }
  }
  out.cell = 2.0 / cells;
  std::vector<int> counts(static_cast<std::size_t>(cells), 0);
  for (int k = 0; k < seeds; ++k) {
    const auto r = sample_trajectory(*toy.sys, toy.cert, toy.ccfg, toy.gcfg, toy.scfg, toy.x0, toy.cost,
                                     static_cast<std::uint64_t>(k));
    const double u = r.trajectory.controls(0, 0);
    const int c = std::clamp(static_cast<int>((u + 1.0) / out.cell), 0, cells - 1);
    ++counts[static_cast<std::size_t>(c)];
  }
  const auto it = std::max_element(counts.begin(), counts.end());
  out.modal_count = *it;
  out.modal = -1.0 + out.cell * (static_cast<double>(it - counts.begin()) + 0.5);
  return out;
}

} // namespace toys
