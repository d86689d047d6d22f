#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "s2diff/clbf.hpp"
#include "s2diff/diffusion.hpp"
#include "s2diff/dynamics.hpp"
#include "s2diff/eval.hpp"
#include "s2diff/keyvalue.hpp"
#include "s2diff/training.hpp"

namespace s2diff {

/// Everything a run needs, addressed by dotted keys:
///   system, seed, output.dir
///   constants.<name>          overrides of the system constants file
///   certificate.{c, lambda, eps, alpha1, alpha2, discrete_step}
///   guidance.{gamma, gamma1, gamma2, safety_mode, safety_temp, use_clbf_guidance}
///   sampler.{horizon, num_candidates, diffusion_steps, final_alpha_bar, schedule_sharpness}
///   integrator.{dt, scheme}
///   train.{epochs, batch_initial_states, grad_steps_per_epoch, minibatch_size,
///          learning_rate, beta1, beta2, adam_eps, replay_epochs, hidden_layers,
///          biases, center_on_goal,
///          init_lo, init_hi, metrics_violation_states, metrics_violation_controls}
///   eval.{num_rollouts, episode_steps, violation_states, violation_controls}
/// Only `system` is required.
struct RunConfig {
  std::string system;
  KeyValueFile constants;  // overrides
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";
  CertificateConfig certificate;
  GuidanceConfig guidance;
  SamplerConfig sampler;
  TrainConfig train;
  EvalConfig eval;
  int diffusion_steps = 50;
  double final_alpha_bar = 1e-2;
  double schedule_sharpness = 10.0;

  /// Defaults for `system`. The safety level, cost temperature and the
  /// optional `clbf_lambda` and `network_biases` come from its constants.
  static RunConfig defaults(const std::string& system);
  /// Resolves `kv` on top of the system defaults. Unknown keys and bad
  /// values throw ConfigError naming the key.
  static RunConfig from_keyvalue(const KeyValueFile& kv);
  static RunConfig load(const std::filesystem::path& path);

  /// Loads the system with the constant overrides applied.
  SystemPtr make_system() const;
  /// Propagates the master seed into the module configs and validates them.
  void finalize();
  /// Fully resolved config in the same key layout.
  KeyValueFile to_keyvalue() const;
};

}  // namespace s2diff
