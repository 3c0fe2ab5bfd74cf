// stylefield: synthesize data, pretrain, train the style stage, render and
// evaluate. Run `stylefield <command> --help` for per-command options.

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stylefield/pipeline/pipeline.hpp"

using namespace stylefield;

namespace {

struct Common {
  std::string config;
  std::string run = "default";
  std::string runs_dir = "runs";
  std::string data;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string precision = "float";
  std::string log_level = "info";
  bool resume = false;
};

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("-c,--config", c.config, "project config file (JSON)");
  cmd->add_option("-r,--run", c.run, "run name; artifacts go to <runs-dir>/<run>")->capture_default_str();
  cmd->add_option("--runs-dir", c.runs_dir, "parent directory of runs")->capture_default_str();
  cmd->add_option("--data", c.data, "input data directory (default <run>/data)");
  cmd->add_option("--seed", c.seed, "seed for every stochastic choice of this command");
  cmd->add_option("--log-level", c.log_level, "trace|debug|info|warn|error")->capture_default_str();
  if (training) {
    cmd->add_option("--set", c.sets, "training config override key=value (repeatable)");
    cmd->add_option("--precision", c.precision, "float or double (bitwise-reproducible verification mode)")
        ->check(CLI::IsMember({"float", "double"}))
        ->capture_default_str();
    cmd->add_flag("--resume", c.resume, "continue from the run's trainer checkpoint if present");
  }
}

/// --set key=value pairs and --seed as a flag object over TrainConfig keys.
nlohmann::json flag_overrides(const Common& c) {
  const nlohmann::json defaults = TrainConfig{}.to_json();
  nlohmann::json flags = nlohmann::json::object();
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    if (!defaults.contains(key)) throw ValidationError("unknown training config key '" + key + "'");
    flags[key] = parse_override(key, kv.substr(eq + 1), defaults[key]);
  }
  if (c.seed) flags["seed"] = *c.seed;
  return flags;
}

std::vector<int> parse_offsets(const std::string& s) {
  if (s == "1") return {1};
  if (s == "7") return {7};
  if (s == "both") return {1, 7};
  throw ValidationError("--offset must be 1, 7 or both");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stylefield: generalizable 3D style transfer at desk scale"};
  app.require_subcommand(1);
  app.fallthrough(false);
  Common c;

  auto* synth = app.add_subcommand("synth", "write the synthetic scenes and style images of the config");
  add_common(synth, c, false);

  auto* pretrain = app.add_subcommand("pretrain", "train the geometry backbone on the run's scenes");
  add_common(pretrain, c, true);

  auto* vae = app.add_subcommand("train-vae", "train the style encoder on the training split of the style images");
  add_common(vae, c, false);
  vae->add_option("--precision", c.precision, "float or double")->check(CLI::IsMember({"float", "double"}));

  auto* style = app.add_subcommand("train-style", "train the hypernetwork with backbone and encoder frozen");
  add_common(style, c, true);

  std::string scene, bundle, offset = "both", source, target = "path";
  std::vector<std::string> styles;
  int resolution = 0;
  bool use_views = false, perceptual = false;

  auto* render = app.add_subcommand("render", "render novel views, unstylized (--style none) or stylized");
  add_common(render, c, false);
  render->add_option("--scene", scene, "scene name under <data>/scenes, or a scene directory")->required();
  render->add_option("--style", styles, "style image path or 'none' (repeatable)")->required();
  render->add_option("--bundle", bundle, "checkpoint bundle (default <run>/checkpoints/bundle.json)");
  render->add_option("--resolution", resolution, "render size in px (default: style config resolution)");
  render->add_flag("--views", use_views, "render the captured camera poses instead of the novel ring");
  render->add_option("--precision", c.precision, "float or double")->check(CLI::IsMember({"float", "double"}));

  auto* flow = app.add_subcommand("flow", "flows along the render path (evaluation) or between captured views");
  add_common(flow, c, false);
  flow->add_option("--scene", scene, "scene name or directory")->required();
  flow->add_option("--source", source, "exact|naive (default: the config's eval_flow_source)");
  flow->add_option("--target", target, "path (render path) or views (captured views)")->capture_default_str();
  flow->add_option("--offset", offset, "1|7|both")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "warped-consistency report over the run's renders");
  add_common(eval, c, false);
  eval->add_option("--offset", offset, "1 (short range), 7 (long range) or both")->capture_default_str();
  eval->add_flag("--perceptual", perceptual, "also report the feature-space distance (not comparable to LPIPS)");

  if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1])) {
    std::cerr << "error: unknown command '" << argv[1] << "'\n\n" << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  if (const char* lvl = std::getenv("STYLEFIELD_LOG_LEVEL"); lvl && c.log_level == "info") c.log_level = lvl;
  spdlog::set_level(spdlog::level::from_str(c.log_level));

  try {
    const ProjectConfig cfg = ProjectConfig::load(c.config);
    const RunDir run(fs::path(c.runs_dir) / c.run, c.data);
    const bool dbl = c.precision == "double";
    const nlohmann::json flags = flag_overrides(c);

    if (synth->parsed()) {
      run_synth(run, cfg, c.seed);
    } else if (pretrain->parsed()) {
      dbl ? run_pretrain<double>(run, cfg, flags, c.resume) : run_pretrain<float>(run, cfg, flags, c.resume);
    } else if (vae->parsed()) {
      dbl ? run_train_vae<double>(run, cfg, c.seed) : run_train_vae<float>(run, cfg, c.seed);
    } else if (style->parsed()) {
      dbl ? run_train_style<double>(run, cfg, flags, c.resume) : run_train_style<float>(run, cfg, flags, c.resume);
    } else if (render->parsed()) {
      if (resolution <= 0) resolution = resolve_train_config(cfg.style, nlohmann::json::object()).resolution;
      const fs::path b = bundle.empty() ? run.bundle() : fs::path(bundle);
      dbl ? run_render<double>(run, cfg, scene, styles, b, resolution, use_views)
          : run_render<float>(run, cfg, scene, styles, b, resolution, use_views);
    } else if (flow->parsed()) {
      if (source.empty()) source = resolve_train_config(cfg.style, nlohmann::json::object()).eval_flow_source;
      run_flow(run, cfg, scene, source, target, parse_offsets(offset), nlohmann::json::object());
    } else if (eval->parsed()) {
      run_eval(run, cfg, parse_offsets(offset), perceptual);
      std::ifstream in(run.reports() / "summary.txt");
      std::cout << in.rdbuf();
    }
  } catch (const StateError& e) {
    std::cerr << "StateError: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "ValidationError: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "FormatError: " << e.what() << "\n";
    return 1;
  } catch (const ConsistencyError& e) {
    std::cerr << "ConsistencyError: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
