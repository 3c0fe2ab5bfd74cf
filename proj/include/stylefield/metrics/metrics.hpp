#pragma once

// Warped-consistency scores over rendered camera paths and the run-directory
// report built from them.
//
// Run layout read by eval_report:
//   renders/<scene>/<style>/<frame>.png   frames in file-name order
//   flows/<scene>/<a>_<b>.flo             F^(a,b): frame a warped onto frame b's grid
//   flows/<scene>/<a>_<b>_mask.png        its visibility mask

#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmt/format.h"
#include "json.hpp"
#include "stylefield/core/archive.hpp"
#include "stylefield/flowwarp/flowwarp.hpp"
#include "stylefield/losses/losses.hpp"
#include "stylefield/scene_io/synth.hpp"

namespace stylefield {

struct ConsistencyScores {
  double rmse = 0;
  std::optional<double> perceptual;  // feature distance, not comparable to LPIPS
  int pairs = 0;                     // pairs that entered the average
};

/// Masked RMSE between frame t and frame t+offset warped onto t's grid with
/// flows[t] = F^(t+offset, t), averaged over pairs. Pairs whose mask is empty
/// are left out. `phi` enables the perceptual score.
inline ConsistencyScores consistency_scores(const std::vector<Image>& frames, const std::vector<FlowField>& flows,
                                            const std::vector<VisibilityMask>& masks, int offset,
                                            const FeatureExtractor<double>* phi = nullptr) {
  if (offset < 1) throw ValidationError("consistency_scores: offset must be >= 1");
  if (static_cast<int>(frames.size()) <= offset)
    throw ValidationError("consistency_scores: need more than " + std::to_string(offset) + " frames");
  const std::size_t n = frames.size() - offset;
  if (flows.size() != n || masks.size() != n)
    throw ValidationError("consistency_scores: expected " + std::to_string(n) + " flows and masks for " +
                          std::to_string(frames.size()) + " frames at offset " + std::to_string(offset));
  ConsistencyScores out;
  double rmse = 0, perc = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const Image& a = frames[t];
    const Image& b = frames[t + offset];
    const VisibilityMask& m = masks[t];
    if (a.height != b.height || a.width != b.width || m.height != a.height || m.width != a.width)
      throw ValidationError("consistency_scores: frame, flow and mask sizes differ");
    const std::size_t count = m.count();
    if (count == 0) continue;
    const Image wb = warp(b, flows[t]);
    double se = 0;
    for (std::size_t p = 0; p < m.data.size(); ++p)
      if (m.data[p])
        for (int c = 0; c < a.channels; ++c) {
          const double d = a.data[p * a.channels + c] - wb.data[p * a.channels + c];
          se += d * d;
        }
    rmse += std::sqrt(se / static_cast<double>(count * a.channels));
    if (phi) perc += perceptual_distance(a, wb, m, *phi);
    ++out.pairs;
  }
  if (out.pairs == 0) throw ValidationError("consistency_scores: every pair has an empty visibility mask");
  out.rmse = rmse / out.pairs;
  if (phi) out.perceptual = perc / out.pairs;
  return out;
}

/// Exact flows F^(t+o, t) and masks along a synthetic camera path.
struct PathFlows {
  std::map<int, std::vector<FlowField>> flows;  // by offset
  std::map<int, std::vector<VisibilityMask>> masks;
};

inline PathFlows exact_path_flows(const SynthWorld& world, const std::vector<Camera>& path, const std::vector<int>& offsets,
                                  double depth_tol = 0.03) {
  std::vector<SynthRender> renders;
  for (const auto& c : path) renders.push_back(world.render(c));
  PathFlows out;
  for (int o : offsets)
    for (std::size_t t = 0; t + o < path.size(); ++t) {
      auto [f, m] = exact_flow(renders[t], path[t], renders[t + o], path[t + o], depth_tol);
      f.src_view = static_cast<int>(t + o);
      f.dst_view = static_cast<int>(t);
      out.flows[o].push_back(std::move(f));
      out.masks[o].push_back(std::move(m));
    }
  return out;
}

inline void save_path_flows(const PathFlows& pf, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [o, fl] : pf.flows)
    for (std::size_t t = 0; t < fl.size(); ++t) {
      const std::string stem = std::to_string(t + o) + "_" + std::to_string(t);
      write_flo(fl[t], dir / (stem + ".flo"));
      write_mask_png(pf.masks.at(o)[t], dir / (stem + "_mask.png"));
    }
}

struct ReportRow {
  std::string scene, style;
  int offset = 1;
  ConsistencyScores scores;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"scene", scene}, {"style", style}, {"offset", offset}, {"rmse", scores.rmse}, {"pairs", scores.pairs}};
    if (scores.perceptual) j["feature_distance_noncomparable"] = *scores.perceptual;
    return j;
  }
};

namespace detail {

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir, bool dirs) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (dirs ? e.is_directory() : (e.is_regular_file() && e.path().extension() == ".png")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Scores every renders/<scene>/<style> sequence at each offset, writes
/// reports/eval.jsonl (one record per scene, style, offset) and
/// reports/summary.txt, and returns the rows in that order.
inline std::vector<ReportRow> eval_report(const std::filesystem::path& run_dir, const std::vector<int>& offsets,
                                          const FeatureExtractor<double>* phi = nullptr) {
  namespace fs = std::filesystem;
  if (offsets.empty()) throw ValidationError("eval_report: no offsets requested");
  const auto scenes = detail::sorted_entries(run_dir / "renders", true);
  std::vector<ReportRow> rows;
  for (const auto& sdir : scenes) {
    const std::string scene = sdir.filename().string();
    const fs::path fdir = run_dir / "flows" / scene;
    for (const auto& stdir : detail::sorted_entries(sdir, true)) {
      const auto files = detail::sorted_entries(stdir, false);
      if (files.empty()) continue;
      std::vector<Image> frames;
      for (const auto& f : files) frames.push_back(read_png(f));
      for (int o : offsets) {
        std::vector<FlowField> flows;
        std::vector<VisibilityMask> masks;
        for (std::size_t t = 0; t + o < frames.size(); ++t) {
          const std::string stem = std::to_string(t + o) + "_" + std::to_string(t);
          if (!fs::exists(fdir / (stem + ".flo")))
            throw ValidationError("eval_report: missing flow " + (fdir / (stem + ".flo")).string() + " (run the flow command)");
          flows.push_back(read_flo(fdir / (stem + ".flo")));
          masks.push_back(read_mask_png(fdir / (stem + "_mask.png")));
        }
        rows.push_back({scene, stdir.filename().string(), o, consistency_scores(frames, flows, masks, o, phi)});
      }
    }
  }
  if (rows.empty()) throw ValidationError("eval_report: no rendered sequences under " + (run_dir / "renders").string());

  fs::create_directories(run_dir / "reports");
  std::string jsonl;
  for (const auto& r : rows) jsonl += r.to_json().dump() + "\n";
  write_atomic(run_dir / "reports" / "eval.jsonl", jsonl);

  std::ostringstream table;
  table << fmt::format("{:<16} {:<16}", "scene", "style");
  for (int o : offsets) table << fmt::format(" {:>12}", "rmse@" + std::to_string(o));
  if (phi)
    for (int o : offsets) table << fmt::format(" {:>12}", "feat@" + std::to_string(o));
  table << "\n";
  for (std::size_t r = 0; r < rows.size(); r += offsets.size()) {
    table << fmt::format("{:<16} {:<16}", rows[r].scene, rows[r].style);
    for (std::size_t k = 0; k < offsets.size(); ++k) table << fmt::format(" {:>12.5f}", rows[r + k].scores.rmse);
    if (phi)
      for (std::size_t k = 0; k < offsets.size(); ++k) table << fmt::format(" {:>12.5f}", *rows[r + k].scores.perceptual);
    table << "\n";
  }
  if (phi) table << "feat@k: feature-space distance of the built-in extractor; not comparable to published LPIPS.\n";
  write_atomic(run_dir / "reports" / "summary.txt", table.str());
  return rows;
}

}  // namespace stylefield
