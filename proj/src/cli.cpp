#include "s2diff/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <omp.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "s2diff/clbf.hpp"
#include "s2diff/errors.hpp"
#include "s2diff/eval.hpp"
#include "s2diff/run_config.hpp"
#include "s2diff/training.hpp"

namespace s2diff {
namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int workers = 0;
  bool no_guidance = false;
};

struct ConfigSource {
  std::string config_path;
  std::string system;
  std::vector<std::string> overrides;  // key=value
};

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("-c,--config", src.config_path, "Run config file (dotted key = value)");
  cmd->add_option("-s,--system", src.system, "Built-in system name, when no config file is given");
  cmd->add_option("--set", src.overrides, "Override a config key, key=value (repeatable)");
}

RunConfig resolve_config(const ConfigSource& src, const GlobalOptions& global) {
  KeyValueFile kv;
  if (!src.config_path.empty()) kv = KeyValueFile::load(src.config_path);
  if (!src.system.empty()) kv.set("system", src.system);
  for (const std::string& entry : src.overrides) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(entry, "--set expects key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv.set(trim(entry.substr(0, eq)), trim(entry.substr(eq + 1)));
  }
  if (global.seed) kv.set("seed", std::to_string(*global.seed));
  if (global.no_guidance) kv.set("guidance.use_clbf_guidance", "false");
  RunConfig cfg = RunConfig::from_keyvalue(kv);
  if (global.out) {
    cfg.output_dir = *global.out;
  } else if (const char* env = std::getenv("S2DIFF_OUT"); env && *env) {
    cfg.output_dir = env;
  }
  return cfg;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("output.dir", "cannot create " + dir.string());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("output.dir", "cannot write " + path.string());
  out << text;
}

Checkpoint load_matching_checkpoint(const std::string& path, const System& sys) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.certificate.input_dim() != sys.state_dim()) {
    throw ConfigError("checkpoint", "certificate expects state dimension " +
                                        std::to_string(ckpt.certificate.input_dim()) + " but " +
                                        sys.name() + " has " + std::to_string(sys.state_dim()));
  }
  return ckpt;
}

int cmd_train(const ConfigSource& src, const GlobalOptions& global, std::ostream& out) {
  const RunConfig cfg = resolve_config(src, global);
  const SystemPtr sys = cfg.make_system();
  prepare_dir(cfg.output_dir);
  write_file(cfg.output_dir / "config.snapshot", cfg.to_keyvalue().to_string());
  const TrainResult result = train(*sys, cfg.certificate, cfg.guidance, cfg.sampler, cfg.train,
                                   default_cost(*sys), cfg.output_dir);
  save_checkpoint(cfg.output_dir / "checkpoint", Checkpoint{result.certificate, cfg.certificate, cfg.seed});
  for (const EpochRecord& rec : result.history) {
    out << "epoch " << rec.epoch << "  loss " << (rec.losses.empty() ? 0.0 : rec.losses.back())
        << "  safety " << rec.metrics.safety_rate << "  terminal " << rec.metrics.terminal_error_mean
        << "  violation " << rec.metrics.violation_rate << '\n';
  }
  out << "wrote " << (cfg.output_dir / "checkpoint").string() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const ConfigSource& src, const GlobalOptions& global,
             std::ostream& out) {
  const RunConfig cfg = resolve_config(src, global);
  const SystemPtr sys = cfg.make_system();
  const Checkpoint ckpt = load_matching_checkpoint(checkpoint, *sys);
  const fs::path dir = cfg.output_dir / "eval";
  prepare_dir(dir);
  std::vector<Episode> episodes;
  const MetricsReport report =
      evaluate_policy(*sys, ckpt.certificate, ckpt.config, cfg.guidance, cfg.sampler, cfg.eval,
                      default_cost(*sys), cfg.seed, &episodes);
  write_file(dir / "metrics.json", metrics_to_json(report));
  for (std::size_t r = 0; r < episodes.size(); ++r) {
    std::ofstream csv(dir / ("rollout_" + std::to_string(r) + ".csv"), std::ios::binary);
    write_trajectory_csv(csv, *sys, ckpt.certificate, ckpt.config, episodes[r].record);
  }
  print_report(out, report);
  return kExitOk;
}

int cmd_violation(const std::string& checkpoint, const ConfigSource& src,
                  const GlobalOptions& global, std::optional<int> states, std::ostream& out) {
  const RunConfig cfg = resolve_config(src, global);
  const SystemPtr sys = cfg.make_system();
  const Checkpoint ckpt = load_matching_checkpoint(checkpoint, *sys);
  const int n = states.value_or(cfg.eval.violation_states);
  if (n < 1) throw ConfigError("--states", "must be >= 1");
  prepare_dir(cfg.output_dir);
  const ViolationEstimate est = violation_rate_estimate(
      *sys, ckpt.certificate, ckpt.config, n, cfg.eval.violation_controls, cfg.seed);
  write_file(cfg.output_dir / "violation.json", violation_to_json(est, ckpt.config.lambda));
  out << "violation rate " << est.rate << " +/- " << est.half_width << " (" << est.violating
      << " of " << est.num_states << " states)\n";
  return kExitOk;
}

int cmd_contour(const std::string& checkpoint, const ConfigSource& src,
                const GlobalOptions& global, const std::vector<int>& axes, int resolution,
                std::ostream& out) {
  const RunConfig cfg = resolve_config(src, global);
  const SystemPtr sys = cfg.make_system();
  const Checkpoint ckpt = load_matching_checkpoint(checkpoint, *sys);
  if (axes.size() != 2 || axes[0] == axes[1] || axes[0] < 0 || axes[1] < 0 ||
      axes[0] >= sys->state_dim() || axes[1] >= sys->state_dim()) {
    throw ConfigError("--axes", "need two distinct state indices below " +
                                    std::to_string(sys->state_dim()));
  }
  if (resolution < 2) throw ConfigError("--resolution", "must be >= 2");
  const int a = axes[0], b = axes[1];
  const ContourSlice slice = contour_slice(
      ckpt.certificate, *sys, {a, b}, {sys->domain_lo()(a), sys->domain_hi()(a)},
      {sys->domain_lo()(b), sys->domain_hi()(b)}, resolution, sys->goal());
  prepare_dir(cfg.output_dir);
  const std::string stem = "contour_" + std::to_string(a) + "_" + std::to_string(b);
  std::ofstream csv(cfg.output_dir / (stem + ".csv"), std::ios::binary);
  write_contour_csv(csv, slice);
  write_file(cfg.output_dir / (stem + ".py"),
             contour_plot_script(stem + ".csv", "x" + std::to_string(a), "x" + std::to_string(b)));
  out << "wrote " << (cfg.output_dir / (stem + ".csv")).string() << '\n';
  return kExitOk;
}

int cmd_defaults(const std::string& system, std::ostream& out) {
  out << RunConfig::defaults(system).to_keyvalue().to_string();
  return kExitOk;
}

}  // namespace

void keep_heap_resident() {
#if defined(__GLIBC__)
  // Batched evaluation frees several hundred kilobytes of work matrices per
  // candidate chunk; without this glibc returns them to the OS every time.
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 16 << 20);
#endif
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  keep_heap_resident();
  CLI::App app{"Safety- and stability-guided diffusion sampling with neural CLBF training"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions global;
  app.add_option("--seed", global.seed, "Master seed");
  app.add_option("--out", global.out, "Output directory (overrides S2DIFF_OUT and output.dir)");
  app.add_option("--workers", global.workers, "Worker threads (default: all cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--no-clbf-guidance", global.no_guidance, "Sample without the certificate factors");

  ConfigSource train_src, eval_src, viol_src, contour_src;
  std::string checkpoint;
  std::optional<int> states;
  std::vector<int> axes{0, 1};
  int resolution = 50;
  std::string defaults_system;

  CLI::App* train_cmd = app.add_subcommand("train", "Alternate guided sampling and certificate training");
  add_config_options(train_cmd, train_src);
  CLI::App* eval_cmd = app.add_subcommand("eval", "Closed-loop evaluation of a checkpoint");
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  add_config_options(eval_cmd, eval_src);
  CLI::App* viol_cmd = app.add_subcommand("violation", "Estimate the decrease-condition violation rate");
  viol_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  viol_cmd->add_option("--states", states, "Number of uniformly drawn states");
  add_config_options(viol_cmd, viol_src);
  CLI::App* contour_cmd = app.add_subcommand("contour", "Export a 2-D slice of V");
  contour_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  contour_cmd->add_option("--axes", axes, "Two state indices")->delimiter(',')->expected(2);
  contour_cmd->add_option("--resolution", resolution, "Grid points per axis");
  add_config_options(contour_cmd, contour_src);
  CLI::App* defaults_cmd = app.add_subcommand("defaults", "Print the resolved default config");
  defaults_cmd->add_option("-s,--system", defaults_system, "System name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (global.workers > 0) omp_set_num_threads(global.workers);

  try {
    if (*train_cmd) return cmd_train(train_src, global, out);
    if (*eval_cmd) return cmd_eval(checkpoint, eval_src, global, out);
    if (*viol_cmd) return cmd_violation(checkpoint, viol_src, global, states, out);
    if (*contour_cmd) return cmd_contour(checkpoint, contour_src, global, axes, resolution, out);
    if (*defaults_cmd) return cmd_defaults(defaults_system, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace s2diff
