#include "s2diff/run_config.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "s2diff/errors.hpp"

namespace s2diff {
namespace {

std::string join(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + format_real(xs[i]);
  return out;
}

std::string join(const Eigen::VectorXd& v) {
  return join(std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd to_vector(const std::vector<double>& xs) {
  return Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

int get_int(const KeyValueFile& kv, const std::string& key, int fallback) {
  const long long v = kv.get_int(key, fallback);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw ConfigError(key, "out of range");
  }
  return static_cast<int>(v);
}

std::uint64_t get_seed(const KeyValueFile& kv, const std::string& key, std::uint64_t fallback) {
  if (!kv.contains(key)) return fallback;
  const std::string& text = kv.raw(key);
  std::uint64_t v = 0;
  std::istringstream in(text);
  if (text.empty() || text.front() == '-' || !(in >> v) || !in.eof()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

SafetyMode parse_safety_mode(const std::string& text) {
  if (text == "soft") return SafetyMode::soft;
  if (text == "indicator") return SafetyMode::indicator;
  throw ConfigError("guidance.safety_mode", "expected 'soft' or 'indicator', got '" + text + "'");
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "system", "seed", "output.dir",
      "certificate.c", "certificate.lambda", "certificate.eps", "certificate.alpha1",
      "certificate.alpha2", "certificate.discrete_step",
      "guidance.gamma", "guidance.gamma1", "guidance.gamma2", "guidance.safety_mode",
      "guidance.safety_temp", "guidance.use_clbf_guidance",
      "sampler.horizon", "sampler.num_candidates", "sampler.diffusion_steps",
      "sampler.final_alpha_bar", "sampler.schedule_sharpness",
      "integrator.dt", "integrator.scheme",
      "train.epochs", "train.batch_initial_states", "train.grad_steps_per_epoch",
      "train.minibatch_size", "train.learning_rate", "train.beta1", "train.beta2",
      "train.adam_eps", "train.replay_epochs", "train.hidden_layers", "train.biases", "train.center_on_goal", "train.init_lo",
      "train.init_hi", "train.metrics_violation_states", "train.metrics_violation_controls",
      "eval.num_rollouts", "eval.episode_steps", "eval.violation_states",
      "eval.violation_controls"};
  return keys;
}

// Per-system defaults carried in the constants file.
void apply_system_defaults(RunConfig& cfg, const System& sys) {
  const KeyValueFile& k = sys.constants();
  cfg.certificate.c = sys.safe_level();
  cfg.certificate.lambda = k.get_real("clbf_lambda", cfg.certificate.lambda);
  cfg.guidance.gamma = k.get_real("cost_temperature", cfg.guidance.gamma);
  cfg.train.biases = k.get_bool("network_biases", cfg.train.biases);
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& system) {
  RunConfig cfg;
  cfg.system = system;
  const SystemPtr sys = cfg.make_system();
  apply_system_defaults(cfg, *sys);
  cfg.finalize();
  return cfg;
}

RunConfig RunConfig::from_keyvalue(const KeyValueFile& kv) {
  if (!kv.contains("system")) throw ConfigError("system", "missing system name");
  for (const std::string& key : kv.keys()) {
    if (key.rfind("constants.", 0) == 0) continue;
    if (!known_keys().count(key)) throw ConfigError(key, "unknown key");
  }
  RunConfig cfg;
  cfg.system = kv.get_string("system");
  cfg.constants = kv.section("constants");
  SystemPtr sys;
  try {
    sys = cfg.make_system();
  } catch (const ConfigError& e) {
    throw ConfigError(e.key().empty() ? "system" : e.key(), e.what());
  }
  apply_system_defaults(cfg, *sys);

  cfg.seed = get_seed(kv, "seed", 0);
  cfg.output_dir = kv.get_string("output.dir", cfg.output_dir.string());

  CertificateConfig& c = cfg.certificate;
  c.c = kv.get_real("certificate.c", c.c);
  c.lambda = kv.get_real("certificate.lambda", c.lambda);
  c.eps = kv.get_real("certificate.eps", c.eps);
  c.alpha1 = kv.get_real("certificate.alpha1", c.alpha1);
  c.alpha2 = kv.get_real("certificate.alpha2", c.alpha2);
  c.discrete_step = kv.get_real("certificate.discrete_step", c.discrete_step);

  GuidanceConfig& g = cfg.guidance;
  g.gamma = kv.get_real("guidance.gamma", g.gamma);
  g.gamma1 = kv.get_real("guidance.gamma1", g.gamma1);
  g.gamma2 = kv.get_real("guidance.gamma2", g.gamma2);
  g.safety_mode = parse_safety_mode(kv.get_string("guidance.safety_mode", "soft"));
  if (kv.contains("guidance.safety_temp")) g.safety_temp = kv.get_real("guidance.safety_temp");
  g.use_clbf_guidance = kv.get_bool("guidance.use_clbf_guidance", g.use_clbf_guidance);

  SamplerConfig& s = cfg.sampler;
  s.horizon = get_int(kv, "sampler.horizon", s.horizon);
  s.num_candidates = get_int(kv, "sampler.num_candidates", s.num_candidates);
  cfg.diffusion_steps = get_int(kv, "sampler.diffusion_steps", cfg.diffusion_steps);
  cfg.final_alpha_bar = kv.get_real("sampler.final_alpha_bar", cfg.final_alpha_bar);
  cfg.schedule_sharpness = kv.get_real("sampler.schedule_sharpness", cfg.schedule_sharpness);
  s.integrator.dt = kv.get_real("integrator.dt", s.integrator.dt);
  if (kv.contains("integrator.scheme")) {
    try {
      s.integrator.scheme = parse_scheme(kv.get_string("integrator.scheme"));
    } catch (const std::exception& e) {
      throw ConfigError("integrator.scheme", e.what());
    }
  }

  TrainConfig& t = cfg.train;
  t.epochs = get_int(kv, "train.epochs", t.epochs);
  t.batch_initial_states = get_int(kv, "train.batch_initial_states", t.batch_initial_states);
  t.grad_steps_per_epoch = get_int(kv, "train.grad_steps_per_epoch", t.grad_steps_per_epoch);
  t.minibatch_size = get_int(kv, "train.minibatch_size", t.minibatch_size);
  t.learning_rate = kv.get_real("train.learning_rate", t.learning_rate);
  t.beta1 = kv.get_real("train.beta1", t.beta1);
  t.beta2 = kv.get_real("train.beta2", t.beta2);
  t.adam_eps = kv.get_real("train.adam_eps", t.adam_eps);
  t.replay_epochs = get_int(kv, "train.replay_epochs", t.replay_epochs);
  if (kv.contains("train.hidden_layers")) {
    t.hidden_layers.clear();
    for (const double w : kv.get_reals("train.hidden_layers")) {
      if (w != std::floor(w)) throw ConfigError("train.hidden_layers", "widths must be integers");
      t.hidden_layers.push_back(static_cast<int>(w));
    }
  }
  t.biases = kv.get_bool("train.biases", t.biases);
  t.center_on_goal = kv.get_bool("train.center_on_goal", t.center_on_goal);
  if (kv.contains("train.init_lo")) t.init_lo = to_vector(kv.get_reals("train.init_lo"));
  if (kv.contains("train.init_hi")) t.init_hi = to_vector(kv.get_reals("train.init_hi"));
  if (t.init_lo && t.init_lo->size() != sys->state_dim()) {
    throw ConfigError("train.init_lo", "needs one entry per state");
  }
  if (t.init_hi && t.init_hi->size() != sys->state_dim()) {
    throw ConfigError("train.init_hi", "needs one entry per state");
  }
  t.metrics_violation_states =
      get_int(kv, "train.metrics_violation_states", t.metrics_violation_states);
  t.metrics_violation_controls =
      get_int(kv, "train.metrics_violation_controls", t.metrics_violation_controls);

  EvalConfig& e = cfg.eval;
  e.num_rollouts = get_int(kv, "eval.num_rollouts", e.num_rollouts);
  e.episode_steps = get_int(kv, "eval.episode_steps", e.episode_steps);
  e.violation_states = get_int(kv, "eval.violation_states", e.violation_states);
  e.violation_controls = get_int(kv, "eval.violation_controls", e.violation_controls);

  cfg.finalize();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_keyvalue(KeyValueFile::load(path));
}

SystemPtr RunConfig::make_system() const {
  const std::vector<std::string> names = builtin_system_names();
  if (std::find(names.begin(), names.end(), system) == names.end()) {
    throw ConfigError("system", "unknown system '" + system + "'");
  }
  return load_system(system, constants);
}

void RunConfig::finalize() {
  sampler.schedule = NoiseSchedule::sigmoid(diffusion_steps, final_alpha_bar, schedule_sharpness);
  sampler.seed = seed;
  train.seed = seed;
  certificate.validate();
  guidance.validate();
  sampler.validate();
  train.validate();
  eval.validate();
}

KeyValueFile RunConfig::to_keyvalue() const {
  KeyValueFile kv;
  kv.set("system", system);
  kv.set("seed", std::to_string(seed));
  kv.set("output.dir", output_dir.string());
  for (const std::string& key : constants.keys()) kv.set("constants." + key, constants.raw(key));

  kv.set("certificate.c", format_real(certificate.c));
  kv.set("certificate.lambda", format_real(certificate.lambda));
  kv.set("certificate.eps", format_real(certificate.eps));
  kv.set("certificate.alpha1", format_real(certificate.alpha1));
  kv.set("certificate.alpha2", format_real(certificate.alpha2));
  kv.set("certificate.discrete_step", format_real(certificate.discrete_step));

  kv.set("guidance.gamma", format_real(guidance.gamma));
  kv.set("guidance.gamma1", format_real(guidance.gamma1));
  kv.set("guidance.gamma2", format_real(guidance.gamma2));
  kv.set("guidance.safety_mode", guidance.safety_mode == SafetyMode::soft ? "soft" : "indicator");
  if (guidance.safety_temp) kv.set("guidance.safety_temp", format_real(*guidance.safety_temp));
  kv.set("guidance.use_clbf_guidance", guidance.use_clbf_guidance ? "true" : "false");

  kv.set("sampler.horizon", std::to_string(sampler.horizon));
  kv.set("sampler.num_candidates", std::to_string(sampler.num_candidates));
  kv.set("sampler.diffusion_steps", std::to_string(diffusion_steps));
  kv.set("sampler.final_alpha_bar", format_real(final_alpha_bar));
  kv.set("sampler.schedule_sharpness", format_real(schedule_sharpness));
  kv.set("integrator.dt", format_real(sampler.integrator.dt));
  kv.set("integrator.scheme", to_string(sampler.integrator.scheme));

  kv.set("train.epochs", std::to_string(train.epochs));
  kv.set("train.batch_initial_states", std::to_string(train.batch_initial_states));
  kv.set("train.grad_steps_per_epoch", std::to_string(train.grad_steps_per_epoch));
  kv.set("train.minibatch_size", std::to_string(train.minibatch_size));
  kv.set("train.learning_rate", format_real(train.learning_rate));
  kv.set("train.beta1", format_real(train.beta1));
  kv.set("train.beta2", format_real(train.beta2));
  kv.set("train.adam_eps", format_real(train.adam_eps));
  kv.set("train.replay_epochs", std::to_string(train.replay_epochs));
  kv.set("train.hidden_layers",
         join(std::vector<double>(train.hidden_layers.begin(), train.hidden_layers.end())));
  kv.set("train.biases", train.biases ? "true" : "false");
  kv.set("train.center_on_goal", train.center_on_goal ? "true" : "false");
  if (train.init_lo) kv.set("train.init_lo", join(*train.init_lo));
  if (train.init_hi) kv.set("train.init_hi", join(*train.init_hi));
  kv.set("train.metrics_violation_states", std::to_string(train.metrics_violation_states));
  kv.set("train.metrics_violation_controls", std::to_string(train.metrics_violation_controls));

  kv.set("eval.num_rollouts", std::to_string(eval.num_rollouts));
  kv.set("eval.episode_steps", std::to_string(eval.episode_steps));
  kv.set("eval.violation_states", std::to_string(eval.violation_states));
  kv.set("eval.violation_controls", std::to_string(eval.violation_controls));
  return kv;
}

}  // namespace s2diff
