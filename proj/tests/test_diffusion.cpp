#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <omp.h>

#include "oracles.hpp"
#include "s2diff/diffusion.hpp"
#include "s2diff/errors.hpp"
#include "sampler_toys.hpp"

using namespace s2diff;

TEST(Schedule, SigmoidEndpointsAndMonotone)
{
  const auto s = NoiseSchedule::sigmoid(50, 1e-2, 10.0);
  ASSERT_EQ(s.steps(), 50);
  EXPECT_EQ(s.alpha_bar[0], 1.0);
  EXPECT_NEAR(s.alpha_bar[50], 1e-2, 1e-15);
  double prod = 1.0;
  for (int i = 1; i <= 50; ++i) {
    EXPECT_LT(s.alpha_bar[i], s.alpha_bar[i - 1]);
    prod *= s.alpha[i];
    EXPECT_NEAR(s.alpha_bar[i], prod, 1e-14);
  }
  EXPECT_NO_THROW(s.validate());
  EXPECT_THROW(NoiseSchedule::sigmoid(0), ConfigError);
  EXPECT_THROW(NoiseSchedule::sigmoid(10, 1.5), ConfigError);
  EXPECT_THROW(NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.6}), ConfigError);
  EXPECT_THROW(NoiseSchedule::from_alpha_bar({0.9, 0.5}), ConfigError);
  const auto t = NoiseSchedule::from_alpha_bar({1.0, 0.8, 0.2});
  EXPECT_DOUBLE_EQ(t.alpha[1], 0.8);
  EXPECT_DOUBLE_EQ(t.alpha[2], 0.25);
}

TEST(Diffusion, ForwardCorruptFormula)
{
  const auto s = NoiseSchedule::from_alpha_bar({1.0, 0.64, 0.25});
  const Eigen::MatrixXd U = (Eigen::MatrixXd(2, 1) << 0.5, -1.0).finished();
  const Eigen::MatrixXd out = forward_corrupt(U, 2, s, [] { return 2.0; });
  EXPECT_DOUBLE_EQ(out(0), 0.5 * 0.5 + std::sqrt(0.75) * 2.0);
  EXPECT_DOUBLE_EQ(out(1), -0.5 + std::sqrt(0.75) * 2.0);
  EXPECT_EQ(forward_corrupt(U, 0, s, [] { return 9.0; }), U);
  EXPECT_THROW(forward_corrupt(U, 3, s, [] { return 0.0; }), ContractError);
}

TEST(Diffusion, ReverseStepFormula)
{
  const auto s = NoiseSchedule::from_alpha_bar({1.0, 0.64, 0.25});
  const Eigen::MatrixXd Ui = Eigen::MatrixXd::Constant(1, 1, 0.7);
  const Eigen::MatrixXd mean = Eigen::MatrixXd::Constant(1, 1, 0.2);
  const double score = -(0.7 - 0.5 * 0.2) / 0.75;
  const double alpha = 0.25 / 0.64;
  const double expected = (0.7 + (1.0 - alpha) * score) / std::sqrt(alpha);
  EXPECT_NEAR(reverse_step(Ui, 2, mean, s)(0), expected, 1e-15);
  // At the last step a perfect posterior mean is returned exactly.
  const Eigen::MatrixXd U1 = Eigen::MatrixXd::Constant(1, 1, 0.8 * 0.3 + 0.6 * 0.1);
  EXPECT_NEAR(reverse_step(U1, 1, Eigen::MatrixXd::Constant(1, 1, 0.3), s)(0), 0.3, 1e-15);
}

TEST(Diffusion, NormalizationMapsBoundsToUnitBox)
{
  const auto sys = load_system("quad2d");
  const Eigen::MatrixXd lo = sys->control_lo().transpose();
  const Eigen::MatrixXd hi = sys->control_hi().transpose();
  EXPECT_TRUE(to_normalized(*sys, lo).isApprox(Eigen::MatrixXd::Constant(1, 2, -1.0)));
  EXPECT_TRUE(to_normalized(*sys, hi).isApprox(Eigen::MatrixXd::Constant(1, 2, 1.0)));
  const Eigen::MatrixXd U = Eigen::MatrixXd::Random(5, 2);
  EXPECT_TRUE(to_normalized(*sys, to_physical(*sys, U)).isApprox(U, 1e-14));
}

TEST(Diffusion, DensityTermsByHand)
{
  const auto sys = load_system("linear_scalar");
  const auto cert = toys::abs_certificate();
  CertificateConfig ccfg;
  ccfg.c = 0.55;
  GuidanceConfig g;
  g.gamma = 0.5;
  g.gamma2 = 0.25;
  g.safety_temp = 0.125;
  IntegratorConfig integ{0.1, Scheme::rk4};
  const CostFunction cost = default_cost(*sys);
  const Eigen::MatrixXd U = (Eigen::MatrixXd(2, 1) << 0.5, -1.0).finished();
  const auto s = TrajectorySample::make(*sys, Eigen::VectorXd::Constant(1, 0.5), U, integ);
  // x: 0.5 -> 0.55 -> 0.45. Lie at (x_{t-1}, u_t) is sign(x) u.
  const double x1 = 0.55, x2 = 0.45;
  EXPECT_NEAR(s.states(0, 0), x1, 1e-15);
  EXPECT_NEAR(s.states(1, 0), x2, 1e-15);
  const double q = x1 * x1 + 0.01 * 0.25 + x2 * x2 + 0.01 * 1.0;
  const double h1 = std::max(0.5 + 0.5, 0.0), h2 = std::max(-1.0 + 0.55, 0.0);
  const double e1 = std::max(x1 - 0.55, 0.0), e2 = std::max(x2 - 0.55, 0.0);
  const DensityTerms d = density_terms(*sys, cert, ccfg, g, s, cost, integ);
  EXPECT_NEAR(d.log_cost, -q / 0.5, 1e-14);
  EXPECT_NEAR(d.log_stable, -(h1 * h1 + h2 * h2) / 0.25, 1e-14);
  EXPECT_NEAR(d.log_safe, -(e1 * e1 + e2 * e2) / 0.125, 1e-14);
  EXPECT_NEAR(log_target_density(*sys, cert, ccfg, g, s, cost, integ), d.total(), 1e-14);

  g.safety_mode = SafetyMode::indicator;
  ccfg.c = 0.5;
  EXPECT_EQ(density_terms(*sys, cert, ccfg, g, s, cost, integ).log_safe,
            -std::numeric_limits<double>::infinity());
  g.use_clbf_guidance = false;
  const DensityTerms off = density_terms(*sys, cert, ccfg, g, s, cost, integ);
  EXPECT_EQ(off.log_safe, 0.0);
  EXPECT_EQ(off.log_stable, 0.0);
  g.use_clbf_guidance = true;
  g.nominal = Eigen::MatrixXd::Constant(2, 1, 0.25);
  EXPECT_NEAR(density_terms(*sys, cert, ccfg, g, s, cost, integ).log_cost,
              -(0.0625 + 1.5625) / g.gamma1, 1e-14);
}

TEST(Diffusion, DensityRejectsBlowupAndBadCertificate)
{
  const auto sys = load_system("linear_scalar", KeyValueFile::parse("a = 1e300\n"));
  const auto s0 = load_system("linear_scalar");
  const auto cert = toys::abs_certificate();
  IntegratorConfig integ;
  const Eigen::MatrixXd U = Eigen::MatrixXd::Zero(1, 1);
  TrajectorySample s;
  s.x0 = Eigen::VectorXd::Constant(1, 1e10);
  s.controls = U;
  s.states = U;
  EXPECT_THROW(density_terms(*sys, cert, {}, {}, s, default_cost(*sys), integ), EvaluationError);
  MlpParams p = cert.params();
  p.weights[1](0, 0) = std::numeric_limits<double>::infinity();
  const MlpCertificate inf_cert(std::move(p));
  const auto ok = TrajectorySample::make(*s0, Eigen::VectorXd::Constant(1, 0.5), U, integ);
  EXPECT_THROW(density_terms(*s0, inf_cert, {}, {}, ok, default_cost(*s0), integ), EvaluationError);
}

// Candidates are proposals from the likelihood of U0 given U_i, so the
// self-normalised estimate targets the Gaussian posterior mean.
TEST(Diffusion, PosteriorMeanMatchesGaussianOracle)
{
  const auto sys = load_system("linear_scalar");
  const double mu = 0.2, gamma = 0.02, s2 = gamma / 2.0;
  GuidanceConfig g;
  g.use_clbf_guidance = false;
  g.gamma = gamma;
  SamplerConfig sc;
  sc.horizon = 1;
  sc.num_candidates = 8192;
  const CostFunction cost = [mu](const StateVector &, const ControlVector & u) {
    return (u(0) - mu) * (u(0) - mu);
  };
  const auto cert = MlpCertificate::zeros({1, 4, 1});
  for (int i : {5, 15, 25}) {
    const double abar = sc.schedule.alpha_bar[i];
    for (double ui : {-0.5, 0.1, 0.6}) {
      const auto est = estimate_posterior_mean(*sys, cert, {}, g, sc, Eigen::VectorXd::Zero(1), 0.0,
                                               Eigen::MatrixXd::Constant(1, 1, ui), i, cost, 99);
      const double like_var = (1.0 - abar) / abar;
      const double post_var = 1.0 / (1.0 / s2 + 1.0 / like_var);
      const double expected = oracle::gaussian_posterior_mean(mu, s2, abar, ui);
      EXPECT_NEAR(est.mean(0), expected, 5.0 * std::sqrt(post_var / est.ess)) << "i=" << i << " ui=" << ui;
      EXPECT_GE(est.ess, 1.0);
      EXPECT_LE(est.ess, 8192.0 + 1e-6);
      EXPECT_FALSE(est.fallback);
      double total = 0.0;
      for (double w : est.weights) total += w;
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Diffusion, FallbackWhenNoCandidateIsFeasible)
{
  const auto sys = load_system("linear_scalar");
  MlpCertificate cert = toys::abs_certificate();
  CertificateConfig ccfg;
  ccfg.c = 0.1; // every reachable state from x0 = 1 violates V <= c
  GuidanceConfig g;
  g.safety_mode = SafetyMode::indicator;
  SamplerConfig sc;
  sc.horizon = 2;
  sc.num_candidates = 64;
  const auto est = estimate_posterior_mean(*sys, cert, ccfg, g, sc, Eigen::VectorXd::Constant(1, 1.0), 0.0,
                                           Eigen::MatrixXd::Zero(2, 1), 10, default_cost(*sys), 5);
  EXPECT_TRUE(est.fallback);
  EXPECT_NEAR(est.ess, 64.0, 1e-9);
  for (double w : est.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 64.0);
  EXPECT_LE(est.mean.cwiseAbs().maxCoeff(), 1.0);
}

TEST(Diffusion, SingleCandidateIsReturnedVerbatim)
{
  const auto sys = load_system("linear_scalar");
  GuidanceConfig g;
  SamplerConfig sc;
  sc.horizon = 1;
  sc.num_candidates = 1;
  const auto cert = toys::abs_certificate();
  const auto est = estimate_posterior_mean(*sys, cert, {}, g, sc, Eigen::VectorXd::Constant(1, 0.3), 0.0,
                                           Eigen::MatrixXd::Constant(1, 1, 0.1), 40, default_cost(*sys), 8);
  EXPECT_DOUBLE_EQ(est.ess, 1.0);
  EXPECT_LE(std::abs(est.mean(0)), 1.0);
  EXPECT_THROW(estimate_posterior_mean(*sys, cert, {}, g, sc, Eigen::VectorXd::Constant(1, 0.3), 0.0,
                                       Eigen::MatrixXd::Constant(1, 1, 0.1), 0, default_cost(*sys), 8),
               ContractError);
  sc.num_candidates = 0;
  EXPECT_THROW(sc.validate(), ConfigError);
}

TEST(Diffusion, IndependentOfThreadCount)
{
  const auto sys = load_system("pendulum");
  const auto cert = MlpCertificate::kaiming({2, 64, 64, 64, 1}, 3);
  SamplerConfig sc;
  sc.num_candidates = 100;
  sc.schedule = NoiseSchedule::sigmoid(10);
  const Eigen::Vector2d x0(0.2, -0.1);
  const int before = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto a = sample_trajectory(*sys, cert, {}, {}, sc, x0, default_cost(*sys), 17);
  omp_set_num_threads(4);
  const auto b = sample_trajectory(*sys, cert, {}, {}, sc, x0, default_cost(*sys), 17);
  omp_set_num_threads(before);
  EXPECT_EQ(a.trajectory.controls, b.trajectory.controls);
  EXPECT_EQ(a.diagnostics.ess, b.diagnostics.ess);
  const auto c = sample_trajectory(*sys, cert, {}, {}, sc, x0, default_cost(*sys), 18);
  EXPECT_NE(a.trajectory.controls, c.trajectory.controls);
}

TEST(Diffusion, SampleIsWithinBoundsAndConsistent)
{
  const auto sys = load_system("quad2d");
  const auto cert = MlpCertificate::kaiming({6, 64, 64, 64, 1}, 3);
  SamplerConfig sc;
  sc.num_candidates = 32;
  sc.schedule = NoiseSchedule::sigmoid(8);
  const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(6);
  const auto r = sample_trajectory(*sys, cert, {}, {}, sc, x0, default_cost(*sys), 1);
  ASSERT_EQ(r.trajectory.horizon(), 5);
  ASSERT_EQ(r.diagnostics.ess.size(), 8u);
  for (Eigen::Index t = 0; t < 5; ++t) {
    for (Eigen::Index k = 0; k < 2; ++k) {
      EXPECT_GE(r.trajectory.controls(t, k), sys->control_lo()(k));
      EXPECT_LE(r.trajectory.controls(t, k), sys->control_hi()(k));
    }
  }
  const auto again = TrajectorySample::make(*sys, x0, r.trajectory.controls, sc.integrator);
  EXPECT_EQ(again.states, r.trajectory.states);
  EXPECT_EQ(r.trajectory.all_states().row(0).transpose(), x0);
}

TEST(Diffusion, FullChainGaussianMean)
{
  const auto m = toys::gaussian_chain(0.2, 0.02, 60);
  EXPECT_LE(std::abs(m.mean - 0.2), 3.0 * m.std_error + 1e-12);
}

TEST(Diffusion, GridToyModeMatchesArgmax)
{
  const auto r = toys::grid_toy(30);
  EXPECT_LE(std::abs(r.modal - r.argmax), r.cell);
}

TEST(Diffusion, TrajectoryCsvLayout)
{
  const auto sys = load_system("linear_scalar");
  const auto cert = toys::abs_certificate();
  IntegratorConfig integ;
  const auto s = TrajectorySample::make(*sys, Eigen::VectorXd::Constant(1, 0.5),
                                        (Eigen::MatrixXd(2, 1) << 0.5, -1.0).finished(), integ);
  TrajectoryRecord rec;
  rec.append(s, integ.dt);
  ASSERT_EQ(rec.states.size(), 2u);
  EXPECT_EQ(rec.states[1](0), s.states(0, 0));
  std::ostringstream out;
  write_trajectory_csv(out, *sys, cert, {}, rec);
  std::istringstream in(out.str());
  std::string header, row0, row1, extra;
  std::getline(in, header);
  std::getline(in, row0);
  std::getline(in, row1);
  EXPECT_FALSE(std::getline(in, extra));
  EXPECT_EQ(header, "t,x0,u0,V,lie,violation_hinge");
  // x = 0.5, u = 0.5: V = 0.5, lie = 0.5, hinge = [0.5 + 1 * 0.5]^+ = 1.
  EXPECT_EQ(row0, "0,0.5,0.5,0.5,0.5,1");
}
