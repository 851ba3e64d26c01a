#pragma once

// Deterministic synthetic indoor scenes: class archetypes are box-shape
// (aspect-ratio) buckets, so classification is learnable from geometry alone.
// Object points are sampled on box surfaces; point clouds are observed
// surfaces, not interiors.

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdetr/boxcodec.hpp"
#include "vdetr/geometry.hpp"

namespace vdetr {

struct SceneConfig {
  int n_boxes_min = 2;
  int n_boxes_max = 4;
  Vec3 room{6.0, 6.0, 3.0};
  bool yaw_free = false;
  double clutter_fraction = 0.3;
  int n_points = 1024;
  int n_classes = 4;
};

struct SceneSample {
  PointSet points;
  std::vector<LabeledBox> gt_boxes;
  std::uint64_t seed = 0;
};

namespace detail {

// Shape archetypes per class id; sizes in meters.
inline RotatedBox3 sample_archetype(int class_id, Rng& rng) {
  RotatedBox3 box;
  switch (class_id % 4) {
    case 0: {  // cube-ish
      const double s = uniform(rng, 0.55, 0.9);
      box.size = {s, s * uniform(rng, 0.9, 1.1), s * uniform(rng, 0.9, 1.1)};
      break;
    }
    case 1:  // tall
      box.size = {uniform(rng, 0.3, 0.5), uniform(rng, 0.3, 0.5), uniform(rng, 1.4, 2.0)};
      break;
    case 2:  // flat
      box.size = {uniform(rng, 1.0, 1.5), uniform(rng, 0.7, 1.2), uniform(rng, 0.3, 0.5)};
      break;
    default:  // long
      box.size = {uniform(rng, 1.4, 2.0), uniform(rng, 0.3, 0.5), uniform(rng, 0.4, 0.7)};
      break;
  }
  return box;
}

inline std::array<double, 3> class_color(int class_id, Rng& rng) {
  static constexpr double base[4][3] = {
      {0.8, 0.2, 0.2}, {0.2, 0.7, 0.2}, {0.2, 0.3, 0.8}, {0.8, 0.7, 0.2}};
  std::array<double, 3> c;
  for (int i = 0; i < 3; ++i)
    c[i] = std::clamp(base[class_id % 4][i] + uniform(rng, -0.1, 0.1), 0.0, 1.0);
  return c;
}

// Uniform point on the surface, faces weighted by area.
inline Vec3 sample_surface_point(const RotatedBox3& box, Rng& rng) {
  const double ax = box.size.y * box.size.z;  // +-x faces
  const double ay = box.size.x * box.size.z;
  const double az = box.size.x * box.size.y;
  const double total = 2.0 * (ax + ay + az);
  double pick = uniform(rng, 0.0, total);
  Vec3 local;
  const double u = uniform(rng, -0.5, 0.5);
  const double v = uniform(rng, -0.5, 0.5);
  if (pick < 2.0 * ax) {
    local = {pick < ax ? -0.5 * box.size.x : 0.5 * box.size.x, u * box.size.y, v * box.size.z};
  } else if (pick < 2.0 * (ax + ay)) {
    pick -= 2.0 * ax;
    local = {u * box.size.x, pick < ay ? -0.5 * box.size.y : 0.5 * box.size.y, v * box.size.z};
  } else {
    pick -= 2.0 * (ax + ay);
    local = {u * box.size.x, v * box.size.y, pick < az ? -0.5 * box.size.z : 0.5 * box.size.z};
  }
  return rotate_z(local, box.yaw) + box.center;
}

}  // namespace detail

inline SceneSample generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.n_boxes_min < 0 || cfg.n_boxes_max < cfg.n_boxes_min || cfg.n_points < 0 ||
      cfg.clutter_fraction < 0.0 || cfg.clutter_fraction > 1.0)
    throw std::invalid_argument("generate_scene: invalid config");
  Rng rng(seed);
  SceneSample scene;
  scene.seed = seed;

  const int n_boxes = cfg.n_boxes_min + static_cast<int>(uniform_index(rng, cfg.n_boxes_max - cfg.n_boxes_min + 1));
  for (int b = 0; b < n_boxes; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const int class_id = static_cast<int>(uniform_index(rng, cfg.n_classes));
      RotatedBox3 box = detail::sample_archetype(class_id, rng);
      box.yaw = cfg.yaw_free ? normalize_yaw(uniform(rng, -M_PI, M_PI)) : 0.0;
      const double margin = 0.5 * std::hypot(box.size.x, box.size.y);
      box.center = {uniform(rng, -0.5 * cfg.room.x + margin, 0.5 * cfg.room.x - margin),
                    uniform(rng, -0.5 * cfg.room.y + margin, 0.5 * cfg.room.y - margin),
                    0.5 * box.size.z + uniform(rng, 0.0, 0.3)};
      bool overlaps = false;
      for (const LabeledBox& other : scene.gt_boxes)
        overlaps = overlaps || iou_rotated(box, other.box) > 0.05;
      if (!overlaps) {
        scene.gt_boxes.push_back({box, class_id});
        placed = true;
      }
    }
    if (!placed) throw std::runtime_error("generate_scene: box placement failed after bounded retries");
  }

  const int n_clutter = static_cast<int>(std::lround(cfg.clutter_fraction * cfg.n_points));
  const int n_surface = cfg.n_points - n_clutter;
  std::vector<int> per_box(scene.gt_boxes.size(), 0);
  if (n_surface > 0 && !scene.gt_boxes.empty()) {
    constexpr int kMinPerBox = 32;
    if (n_surface < kMinPerBox * static_cast<int>(scene.gt_boxes.size()))
      throw std::invalid_argument("generate_scene: too few surface points for " +
                                  std::to_string(scene.gt_boxes.size()) + " boxes");
    double total_area = 0.0;
    std::vector<double> areas;
    for (const LabeledBox& lb : scene.gt_boxes) {
      const Vec3& s = lb.box.size;
      areas.push_back(2.0 * (s.x * s.y + s.y * s.z + s.x * s.z));
      total_area += areas.back();
    }
    int assigned = 0;
    for (std::size_t b = 0; b < per_box.size(); ++b) {
      per_box[b] = kMinPerBox + static_cast<int>((n_surface - kMinPerBox * per_box.size()) * areas[b] / total_area);
      assigned += per_box[b];
    }
    per_box[0] += n_surface - assigned;  // remainder lands on the first box
  }

  for (std::size_t b = 0; b < scene.gt_boxes.size(); ++b) {
    const LabeledBox& lb = scene.gt_boxes[b];
    for (int i = 0; i < per_box[b]; ++i) {
      scene.points.coords.push_back(detail::sample_surface_point(lb.box, rng));
      scene.points.colors.push_back(detail::class_color(lb.class_id, rng));
    }
  }
  const int n_clutter_actual = cfg.n_points - static_cast<int>(scene.points.coords.size());
  for (int i = 0; i < n_clutter_actual; ++i) {
    scene.points.coords.push_back({uniform(rng, -0.5 * cfg.room.x, 0.5 * cfg.room.x),
                                   uniform(rng, -0.5 * cfg.room.y, 0.5 * cfg.room.y),
                                   uniform(rng, 0.0, cfg.room.z)});
    const double g = uniform(rng, 0.3, 0.7);
    scene.points.colors.push_back({g, g, g});
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Scene JSON: {"points": [[x,y,z,r,g,b],...], "boxes": [{"center":..,
// "size":.., "yaw":.., "class":..},...], "seed": s}. Meters / [0,1] colors.

inline nlohmann::json scene_to_json(const SceneSample& scene) {
  nlohmann::json j;
  j["seed"] = scene.seed;
  j["points"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scene.points.coords.size(); ++i) {
    const Vec3& p = scene.points.coords[i];
    const auto& c = scene.points.colors.at(i);
    j["points"].push_back({p.x, p.y, p.z, c[0], c[1], c[2]});
  }
  j["boxes"] = nlohmann::json::array();
  for (const LabeledBox& lb : scene.gt_boxes) {
    j["boxes"].push_back({{"center", {lb.box.center.x, lb.box.center.y, lb.box.center.z}},
                          {"size", {lb.box.size.x, lb.box.size.y, lb.box.size.z}},
                          {"yaw", lb.box.yaw},
                          {"class", lb.class_id}});
  }
  return j;
}

inline SceneSample scene_from_json(const nlohmann::json& j, const std::string& context) {
  SceneSample scene;
  try {
    scene.seed = j.value("seed", std::uint64_t{0});
    for (const auto& row : j.at("points")) {
      if (!row.is_array() || row.size() != 6)
        throw std::runtime_error("point rows must be [x,y,z,r,g,b]");
      scene.points.coords.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
      scene.points.colors.push_back({row[3].get<double>(), row[4].get<double>(), row[5].get<double>()});
    }
    for (const auto& b : j.at("boxes")) {
      LabeledBox lb;
      lb.box.center = {b.at("center")[0].get<double>(), b.at("center")[1].get<double>(),
                       b.at("center")[2].get<double>()};
      lb.box.size = {b.at("size")[0].get<double>(), b.at("size")[1].get<double>(),
                     b.at("size")[2].get<double>()};
      lb.box.yaw = b.at("yaw").get<double>();
      lb.class_id = b.at("class").get<int>();
      if (lb.box.size.x <= 0 || lb.box.size.y <= 0 || lb.box.size.z <= 0)
        throw std::runtime_error("box sizes must be positive");
      scene.gt_boxes.push_back(lb);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("scene parse error (" + context + "): " + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("scene parse error (" + context + "): " + e.what());
  }
  return scene;
}

inline void write_scene(const std::string& path, const SceneSample& scene) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write scene file: " + path);
  os << scene_to_json(scene).dump();
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline SceneSample read_scene(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open scene file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("scene parse error (" + path + "): " + e.what());
  }
  return scene_from_json(j, path);
}

}  // namespace vdetr
