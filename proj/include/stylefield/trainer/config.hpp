#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/core/errors.hpp"
#include "stylefield/losses/losses.hpp"

namespace stylefield {

struct TrainConfig {
  std::string stage = "geometry";  // geometry | style
  double lr = 1e-3;
  std::string lr_schedule = "cosine";  // cosine | constant
  double lr_floor = 0.1;               // cosine end point as a fraction of lr
  int batch = 16;                      // style stage: view pairs per step
  int epochs = 500;                    // style stage: passes over all (scene, view pair) tuples
  long steps = 0;                      // > 0 overrides the epoch-derived step count
  int rays = 32;                       // geometry stage: rays per step
  std::uint64_t seed = 0;
  int resolution = 64;
  double w_style = 40.0;
  double w_consistency = 20.0;
  std::vector<int> content_layers{2, 3};
  std::uint64_t phi_seed = 1234;
  std::string phi_weights_path;
  std::string content_target = "render";  // render | photo
  double max_pair_angle = 45.0;           // degrees between optical axes
  double min_pair_coverage = 0.2;
  double mask_tau_px = 1.0;
  std::string train_flow_source = "naive";  // exact | naive | files
  std::string eval_flow_source = "exact";
  std::vector<int> holdout_views;  // geometry stage: views never trained on
  int log_every = 1;
  long checkpoint_every = 0;
  double train_style_ratio = 0.75;

  nlohmann::json to_json() const {
    return {{"stage", stage},
            {"lr", lr},
            {"lr_schedule", lr_schedule},
            {"lr_floor", lr_floor},
            {"batch", batch},
            {"epochs", epochs},
            {"steps", steps},
            {"rays", rays},
            {"seed", seed},
            {"resolution", resolution},
            {"w_style", w_style},
            {"w_consistency", w_consistency},
            {"content_layers", content_layers},
            {"phi_seed", phi_seed},
            {"phi_weights_path", phi_weights_path},
            {"content_target", content_target},
            {"max_pair_angle", max_pair_angle},
            {"min_pair_coverage", min_pair_coverage},
            {"mask_tau_px", mask_tau_px},
            {"train_flow_source", train_flow_source},
            {"eval_flow_source", eval_flow_source},
            {"holdout_views", holdout_views},
            {"log_every", log_every},
            {"checkpoint_every", checkpoint_every},
            {"train_style_ratio", train_style_ratio}};
  }

  /// Keys absent from `j` keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    const nlohmann::json known = c.to_json();
    for (const auto& [k, v] : j.items())
      if (!known.contains(k)) throw ValidationError("unknown training config key '" + k + "'");
    try {
      c.stage = j.value("stage", c.stage);
      c.lr = j.value("lr", c.lr);
      c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
      c.lr_floor = j.value("lr_floor", c.lr_floor);
      c.batch = j.value("batch", c.batch);
      c.epochs = j.value("epochs", c.epochs);
      c.steps = j.value("steps", c.steps);
      c.rays = j.value("rays", c.rays);
      c.seed = j.value("seed", c.seed);
      c.resolution = j.value("resolution", c.resolution);
      c.w_style = j.value("w_style", c.w_style);
      c.w_consistency = j.value("w_consistency", c.w_consistency);
      c.content_layers = j.value("content_layers", c.content_layers);
      c.phi_seed = j.value("phi_seed", c.phi_seed);
      c.phi_weights_path = j.value("phi_weights_path", c.phi_weights_path);
      c.content_target = j.value("content_target", c.content_target);
      c.max_pair_angle = j.value("max_pair_angle", c.max_pair_angle);
      c.min_pair_coverage = j.value("min_pair_coverage", c.min_pair_coverage);
      c.mask_tau_px = j.value("mask_tau_px", c.mask_tau_px);
      c.train_flow_source = j.value("train_flow_source", c.train_flow_source);
      c.eval_flow_source = j.value("eval_flow_source", c.eval_flow_source);
      c.holdout_views = j.value("holdout_views", c.holdout_views);
      c.log_every = j.value("log_every", c.log_every);
      c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
      c.train_style_ratio = j.value("train_style_ratio", c.train_style_ratio);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("training config has a value of the wrong type: ") + e.what());
    }
    c.validate();
    return c;
  }

  LossWeights weights() const { return {w_style, w_consistency}; }
  std::set<int> layers() const { return {content_layers.begin(), content_layers.end()}; }

  void validate() const {
    if (stage != "geometry" && stage != "style") throw ValidationError("stage must be 'geometry' or 'style'");
    if (!(lr > 0)) throw ValidationError("lr must be > 0");
    if (lr_schedule != "cosine" && lr_schedule != "constant") throw ValidationError("lr_schedule must be cosine or constant");
    if (!(lr_floor >= 0 && lr_floor <= 1)) throw ValidationError("lr_floor must lie in [0,1]");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch < 1 || rays < 1) throw ValidationError("batch and rays must be >= 1");
    if (steps < 0) throw ValidationError("steps must be >= 0");
    if (resolution < 8) throw ValidationError("resolution must be >= 8");
    weights().validate();
    if (content_layers.empty()) throw ValidationError("content_layers must not be empty");
    if (content_target != "render" && content_target != "photo")
      throw ValidationError("content_target must be 'render' or 'photo'");
    if (!(max_pair_angle > 0 && max_pair_angle <= 180)) throw ValidationError("max_pair_angle must lie in (0,180]");
    if (!(min_pair_coverage >= 0 && min_pair_coverage <= 1)) throw ValidationError("min_pair_coverage must lie in [0,1]");
    if (!(mask_tau_px >= 0)) throw ValidationError("mask_tau_px must be >= 0");
    for (const auto* s : {&train_flow_source, &eval_flow_source})
      if (*s != "exact" && *s != "naive" && *s != "files")
        throw ValidationError("flow sources must be exact, naive or files");
    if (train_flow_source == eval_flow_source)
      throw ValidationError("train_flow_source and eval_flow_source must differ (evaluation needs an independent flow)");
    if (log_every < 1 || checkpoint_every < 0) throw ValidationError("log_every >= 1 and checkpoint_every >= 0 required");
    if (!(train_style_ratio > 0 && train_style_ratio <= 1)) throw ValidationError("train_style_ratio must lie in (0,1]");
  }
};

/// Environment variable for a config key: STYLEFIELD_ + upper-cased key.
inline std::string env_name(const std::string& key) {
  std::string out = "STYLEFIELD_";
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

/// Parses a textual override against the type of `like`.
inline nlohmann::json parse_override(const std::string& key, const std::string& text, const nlohmann::json& like) {
  if (like.is_string()) return text;
  nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
  if (v.is_discarded()) throw ValidationError("cannot parse value '" + text + "' for config key '" + key + "'");
  const bool ok = (like.is_number() && v.is_number()) || (like.is_boolean() && v.is_boolean()) ||
                  (like.is_array() && v.is_array());
  if (!ok) throw ValidationError("value '" + text + "' has the wrong type for config key '" + key + "'");
  return v;
}

/// Defaults, then STYLEFIELD_* variables, then the config file section, then
/// command-line overrides; later sources win.
inline TrainConfig resolve_train_config(const nlohmann::json& file_section, const nlohmann::json& flags) {
  nlohmann::json merged = TrainConfig{}.to_json();
  for (auto& [k, v] : merged.items())
    if (const char* env = std::getenv(env_name(k).c_str())) v = parse_override(k, env, v);
  if (!file_section.is_null()) {
    if (!file_section.is_object()) throw ValidationError("training config section must be an object");
    for (const auto& [k, v] : file_section.items()) merged[k] = v;
  }
  for (const auto& [k, v] : flags.items()) merged[k] = v;
  return TrainConfig::from_json(merged);
}

}  // namespace stylefield
