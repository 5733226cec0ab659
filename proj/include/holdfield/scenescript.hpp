#pragma once

#include <string>

#include "holdfield/geometry.hpp"

namespace holdfield {

struct ScriptError : Error {
  ScriptError(const std::string& msg, int line, const std::string& field)
      : Error("scene script line " + std::to_string(line) + ", field '" + field + "': " + msg) {}
};

// Declarative synthetic-scene description; parsed from a small TOML subset
// (sections, scalar keys, numbers / strings / booleans).
struct SceneScript {
  std::string name = "scene";
  int frames = 8;
  int width = 64, height = 64;
  uint64_t seed = 7;

  std::string object_shape = "capsule";  // sphere | box | capsule
  double object_radius = 0.5;            // canonical units
  double object_half_length = 0.35;      // capsule
  Vec3 object_half_extents{0.5, 0.5, 0.5};
  double object_scale = 2.0;             // world scale s
  double object_spin_deg = 0.0;          // rotation about z per frame

  bool hand_present = true;
  double hand_curl = 0.35;  // finger curl toward the object, radians

  double orbit_radius = 8.0;
  double elevation_deg = 10.0;
  double focal_px = 100.0;

  int cloud_count = 512;
  double cloud_scale = 1.0;   // SfM-style unknown global scale on the cloud
  double cloud_noise = 0.02;  // jitter on cloud points, canonical units

  double noise_rot_deg = 0.0;    // init-pose rotation noise
  double noise_trans = 0.0;      // init-pose translation noise, units
  double noise_scale_pct = 0.0;  // init scale noise, percent
};

SceneScript parse_scene_script(const std::string& path);
SceneScript parse_scene_script_text(const std::string& text);
void write_scene_script(const SceneScript& script, const std::string& path);

}  // namespace holdfield
