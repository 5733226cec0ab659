#include "holdfield/scenescript.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace holdfield {

namespace {

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Setter {
  std::function<void(const std::string& value, int line, const std::string& field)> apply;
};

double parse_number(const std::string& v, int line, const std::string& field) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (...) {
    throw ScriptError("expected a number, got '" + v + "'", line, field);
  }
}

std::string parse_string(const std::string& v, int line, const std::string& field) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  throw ScriptError("expected a quoted string, got '" + v + "'", line, field);
}

bool parse_bool(const std::string& v, int line, const std::string& field) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ScriptError("expected true/false, got '" + v + "'", line, field);
}

}  // namespace

SceneScript parse_scene_script_text(const std::string& text) {
  SceneScript s;
  std::map<std::string, Setter> keys;
  auto num = [&](const std::string& key, double* dst) {
    keys[key] = {[dst](const std::string& v, int line, const std::string& field) {
      *dst = parse_number(v, line, field);
    }};
  };
  auto integer = [&](const std::string& key, int* dst) {
    keys[key] = {[dst](const std::string& v, int line, const std::string& field) {
      *dst = (int)parse_number(v, line, field);
    }};
  };
  keys["scene.name"] = {[&s](const std::string& v, int line, const std::string& field) {
    s.name = parse_string(v, line, field);
  }};
  integer("scene.frames", &s.frames);
  integer("scene.width", &s.width);
  integer("scene.height", &s.height);
  keys["scene.seed"] = {[&s](const std::string& v, int line, const std::string& field) {
    s.seed = (uint64_t)parse_number(v, line, field);
  }};
  keys["object.shape"] = {[&s](const std::string& v, int line, const std::string& field) {
    const std::string shape = parse_string(v, line, field);
    if (shape != "sphere" && shape != "box" && shape != "capsule")
      throw ScriptError("unknown shape '" + shape + "'", line, field);
    s.object_shape = shape;
  }};
  num("object.radius", &s.object_radius);
  num("object.half_length", &s.object_half_length);
  num("object.half_extent_x", &s.object_half_extents.x);
  num("object.half_extent_y", &s.object_half_extents.y);
  num("object.half_extent_z", &s.object_half_extents.z);
  num("object.scale", &s.object_scale);
  num("object.spin_deg_per_frame", &s.object_spin_deg);
  keys["hand.present"] = {[&s](const std::string& v, int line, const std::string& field) {
    s.hand_present = parse_bool(v, line, field);
  }};
  num("hand.curl", &s.hand_curl);
  num("cameras.orbit_radius", &s.orbit_radius);
  num("cameras.elevation_deg", &s.elevation_deg);
  num("cameras.focal_px", &s.focal_px);
  integer("pointcloud.count", &s.cloud_count);
  num("pointcloud.scale", &s.cloud_scale);
  num("pointcloud.noise", &s.cloud_noise);
  num("noise.rot_deg", &s.noise_rot_deg);
  num("noise.trans", &s.noise_trans);
  num("noise.scale_pct", &s.noise_scale_pct);

  std::istringstream is(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ScriptError("unterminated section header", line_no, line);
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw ScriptError("expected key = value", line_no, line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    const auto it = keys.find(full);
    if (it == keys.end()) throw ScriptError("unknown field", line_no, full);
    it->second.apply(value, line_no, full);
  }

  if (s.frames <= 0) throw ScriptError("must be positive", 0, "scene.frames");
  if (s.width <= 0 || s.height <= 0) throw ScriptError("must be positive", 0, "scene.width");
  if (s.object_scale <= 0) throw ScriptError("must be positive", 0, "object.scale");
  if (s.cloud_count < 8) throw ScriptError("needs at least 8 points", 0, "pointcloud.count");
  return s;
}

SceneScript parse_scene_script(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open scene script " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_scene_script_text(ss.str());
}

void write_scene_script(const SceneScript& s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write scene script " + path);
  os << "[scene]\n"
     << "name = \"" << s.name << "\"\n"
     << "frames = " << s.frames << "\n"
     << "width = " << s.width << "\n"
     << "height = " << s.height << "\n"
     << "seed = " << s.seed << "\n\n"
     << "[object]\n"
     << "shape = \"" << s.object_shape << "\"\n"
     << "radius = " << s.object_radius << "\n"
     << "half_length = " << s.object_half_length << "\n"
     << "scale = " << s.object_scale << "\n"
     << "spin_deg_per_frame = " << s.object_spin_deg << "\n\n"
     << "[hand]\n"
     << "present = " << (s.hand_present ? "true" : "false") << "\n"
     << "curl = " << s.hand_curl << "\n\n"
     << "[cameras]\n"
     << "orbit_radius = " << s.orbit_radius << "\n"
     << "elevation_deg = " << s.elevation_deg << "\n"
     << "focal_px = " << s.focal_px << "\n\n"
     << "[pointcloud]\n"
     << "count = " << s.cloud_count << "\n"
     << "scale = " << s.cloud_scale << "\n"
     << "noise = " << s.cloud_noise << "\n\n"
     << "[noise]\n"
     << "rot_deg = " << s.noise_rot_deg << "\n"
     << "trans = " << s.noise_trans << "\n"
     << "scale_pct = " << s.noise_scale_pct << "\n";
}

}  // namespace holdfield
