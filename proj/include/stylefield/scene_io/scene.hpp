#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/scene_io/camera.hpp"
#include "stylefield/scene_io/flow.hpp"
#include "stylefield/scene_io/image.hpp"

namespace stylefield {

struct View {
  Image image;
  Camera camera;
};

struct SceneBundle {
  std::string scene_id;
  std::vector<View> views;

  int height() const { return views.empty() ? 0 : views.front().image.height; }
  int width() const { return views.empty() ? 0 : views.front().image.width; }

  void validate() const {
    if (views.size() < 2) throw ValidationError("scene '" + scene_id + "' needs at least 2 views");
    for (const auto& v : views) {
      v.camera.validate();
      if (v.image.height != height() || v.image.width != width())
        throw ValidationError("scene '" + scene_id + "': images differ in size");
      if (v.image.height != v.camera.height || v.image.width != v.camera.width)
        throw ConsistencyError("scene '" + scene_id + "': image size disagrees with its camera");
      if (v.camera.near != views.front().camera.near || v.camera.far != views.front().camera.far)
        throw ValidationError("scene '" + scene_id + "': cameras disagree on near/far");
    }
  }

  /// Same scene without view `k` (used to render a view from the others).
  SceneBundle without(std::size_t k) const {
    SceneBundle out{scene_id, {}};
    for (std::size_t i = 0; i < views.size(); ++i)
      if (i != k) out.views.push_back(views[i]);
    return out;
  }
};

namespace detail {

inline nlohmann::json camera_to_json(const Camera& c) {
  nlohmann::json j;
  j["width"] = c.width;
  j["height"] = c.height;
  std::vector<double> K, P;
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) K.push_back(c.intrinsics(r, col));
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 4; ++col) P.push_back(c.pose(r, col));
  j["intrinsics"] = K;
  j["pose"] = P;
  j["near"] = c.near;
  j["far"] = c.far;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  try {
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const auto K = j.at("intrinsics").get<std::vector<double>>();
    const auto P = j.at("pose").get<std::vector<double>>();
    if (K.size() != 9 || P.size() != 12) throw FormatError("camera record needs 9 intrinsics and 12 pose values");
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) c.intrinsics(r, col) = K[r * 3 + col];
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 4; ++col) c.pose(r, col) = P[r * 4 + col];
    c.near = j.at("near").get<double>();
    c.far = j.at("far").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed camera record: ") + e.what());
  }
  return c;
}

}  // namespace detail

inline nlohmann::json cameras_to_json(const std::vector<Camera>& cams) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cams) arr.push_back(detail::camera_to_json(c));
  return arr;
}

inline std::vector<Camera> cameras_from_json(const nlohmann::json& arr) {
  std::vector<Camera> cams;
  for (const auto& j : arr) cams.push_back(detail::camera_from_json(j));
  return cams;
}

/// Writes `images/NNN.png` plus `cameras.json` into `dir`.
inline void save_scene(const SceneBundle& scene, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json manifest;
  manifest["scene_id"] = scene.scene_id;
  manifest["views"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scene.views.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%03zu.png", i);
    write_png(scene.views[i].image, dir / name);
    nlohmann::json rec = detail::camera_to_json(scene.views[i].camera);
    rec["image"] = name;
    manifest["views"].push_back(rec);
  }
  write_atomic(dir / "cameras.json", manifest.dump(2) + "\n");
}

/// Loads a scene directory. With `downsample > 1` images are area-averaged
/// and intrinsics rescaled accordingly.
inline SceneBundle load_scene(const std::filesystem::path& dir, int downsample = 1) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "cameras.json";
  if (!fs::exists(manifest_path)) throw FormatError("missing camera manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    std::ifstream is(manifest_path);
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("views") || !manifest["views"].is_array())
    throw FormatError("camera manifest has no 'views' array: " + manifest_path.string());

  std::size_t on_disk = 0;
  if (fs::is_directory(dir / "images"))
    for (const auto& e : fs::directory_iterator(dir / "images"))
      if (e.path().extension() == ".png") ++on_disk;
  const auto& recs = manifest["views"];
  if (on_disk != recs.size())
    throw ConsistencyError("scene " + dir.string() + ": manifest lists " + std::to_string(recs.size()) +
                           " cameras but " + std::to_string(on_disk) + " images are on disk");

  SceneBundle scene;
  scene.scene_id = manifest.value("scene_id", dir.filename().string());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    Camera cam = detail::camera_from_json(recs[i]);
    cam.validate();
    char fallback[32];
    std::snprintf(fallback, sizeof fallback, "images/%03zu.png", i);
    const fs::path img_path = dir / recs[i].value("image", std::string(fallback));
    if (!fs::exists(img_path)) throw ConsistencyError("manifest references missing image " + img_path.string());
    Image img = read_png(img_path);
    if (img.width != cam.width || img.height != cam.height)
      throw ConsistencyError("image " + img_path.string() + " size disagrees with its camera");
    scene.views.push_back({downsample_area(img, downsample), downsample_camera(cam, downsample)});
  }
  scene.validate();
  return scene;
}

}  // namespace stylefield
