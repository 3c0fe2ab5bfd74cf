#pragma once

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"
#include "stylefield/core/adam.hpp"
#include "stylefield/trainer/config.hpp"

namespace stylefield {

/// One line per logged step, appended so that resumed runs extend the file.
struct StepRecord {
  long step = 0;
  double content = 0, style = 0, consistency = 0, total = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"L_content", content},
            {"L_style", style},
            {"L_consistency", consistency},
            {"L_total", total},
            {"wall_ms", wall_ms}};
  }
};

class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw ValidationError("cannot open training log " + path.string());
  }
  void write(const StepRecord& r) {
    if (!out_.is_open()) return;
    out_ << r.to_json().dump() << '\n';
    out_.flush();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw FormatError("corrupt random generator state in checkpoint");
}

inline double scheduled_lr(const TrainConfig& cfg, long step, long total) {
  return cfg.lr_schedule == "cosine" ? optim::cosine_lr(cfg.lr, step, total, cfg.lr_floor) : cfg.lr;
}

/// Architecture part of a model config: everything but the init seed, which a
/// loaded checkpoint overrides anyway.
inline nlohmann::json architecture(nlohmann::json cfg) {
  if (cfg.is_object()) cfg.erase("seed");
  return cfg;
}

class Stopwatch {
 public:
  double lap_ms() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

}  // namespace stylefield
