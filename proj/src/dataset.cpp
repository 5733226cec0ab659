#include "holdfield/dataset.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace holdfield {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json mat3_json(const Mat3& m) { return std::vector<double>(m.m.begin(), m.m.end()); }
Mat3 mat3_from(const json& j) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) m.m[i] = j.at(i);
  return m;
}
json vec3_json(const Vec3& v) { return std::vector<double>{v.x, v.y, v.z}; }
Vec3 vec3_from(const json& j) { return {j.at(0), j.at(1), j.at(2)}; }

json camera_json(const Camera& cam) {
  // 4x4 camera-to-world, row-major.
  std::vector<double> ext(16, 0.0);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) ext[4 * r + c] = cam.cam_to_world.rotation(r, c);
    ext[4 * r + 3] = cam.cam_to_world.translation[r];
  }
  ext[15] = 1.0;
  return {{"extrinsic_4x4_row_major", ext}, {"fx", cam.fx},        {"fy", cam.fy},
          {"cx", cam.cx},                   {"cy", cam.cy},        {"width", cam.width},
          {"height", cam.height}};
}

Camera camera_from(const json& j) {
  Camera cam;
  cam.fx = j.at("fx");
  cam.fy = j.at("fy");
  cam.cx = j.at("cx");
  cam.cy = j.at("cy");
  cam.width = j.at("width");
  cam.height = j.at("height");
  const auto& ext = j.at("extrinsic_4x4_row_major");
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.cam_to_world.rotation(r, c) = ext.at(4 * r + c);
    cam.cam_to_world.translation[r] = ext.at(4 * r + 3);
  }
  cam.cam_to_world.scale = 1.0;
  return cam;
}

json hand_state_json(const HandState& hs) {
  json theta = json::array();
  for (const auto& t : hs.theta) theta.push_back(vec3_json(t));
  return {{"theta", theta},
          {"beta", hs.beta},
          {"root_rotation", mat3_json(hs.root.rotation)},
          {"root_translation", vec3_json(hs.root.translation)}};
}

HandState hand_state_from(const json& j) {
  HandState hs;
  for (const auto& t : j.at("theta")) hs.theta.push_back(vec3_from(t));
  hs.beta = j.at("beta").get<std::vector<double>>();
  hs.root.rotation = mat3_from(j.at("root_rotation"));
  hs.root.translation = vec3_from(j.at("root_translation"));
  hs.root.scale = 1.0;
  return hs;
}

json object_pose_json(const ScaledRigid& obj) {
  return {{"rotation", mat3_json(obj.rotation)},
          {"translation", vec3_json(obj.translation)},
          {"scale", obj.scale}};
}

ScaledRigid object_pose_from(const json& j) {
  ScaledRigid obj;
  obj.rotation = mat3_from(j.at("rotation"));
  obj.translation = vec3_from(j.at("translation"));
  obj.scale = j.at("scale");
  return obj;
}

json shape_json(const AnalyticShape& s) {
  json j;
  switch (s.kind) {
    case AnalyticShape::Kind::Sphere: j["kind"] = "sphere"; break;
    case AnalyticShape::Kind::Box: j["kind"] = "box"; break;
    case AnalyticShape::Kind::Capsule: j["kind"] = "capsule"; break;
    case AnalyticShape::Kind::Union: j["kind"] = "union"; break;
  }
  j["radius"] = s.radius;
  j["half_extents"] = vec3_json(s.half_extents);
  j["half_length"] = s.half_length;
  if (!s.children.empty()) {
    json kids = json::array();
    for (const auto& c : s.children) kids.push_back(shape_json(c));
    j["children"] = kids;
  }
  j["rotation"] = mat3_json(s.to_world.rotation);
  j["translation"] = vec3_json(s.to_world.translation);
  j["scale"] = s.to_world.scale;
  return j;
}

AnalyticShape shape_from(const json& j) {
  AnalyticShape s;
  const std::string kind = j.at("kind");
  if (kind == "sphere") s.kind = AnalyticShape::Kind::Sphere;
  else if (kind == "box") s.kind = AnalyticShape::Kind::Box;
  else if (kind == "capsule") s.kind = AnalyticShape::Kind::Capsule;
  else if (kind == "union") s.kind = AnalyticShape::Kind::Union;
  else throw Error("unknown shape kind: " + kind);
  s.radius = j.at("radius");
  s.half_extents = vec3_from(j.at("half_extents"));
  s.half_length = j.at("half_length");
  if (j.contains("children"))
    for (const auto& c : j.at("children")) s.children.push_back(shape_from(c));
  s.to_world.rotation = mat3_from(j.at("rotation"));
  s.to_world.translation = vec3_from(j.at("translation"));
  s.to_world.scale = j.at("scale");
  return s;
}

json pixels_json(const std::vector<Pixel>& px) {
  json out = json::array();
  for (const auto& p : px) out.push_back(std::vector<double>{p.u, p.v});
  return out;
}

std::vector<Pixel> pixels_from(const json& j) {
  std::vector<Pixel> out;
  for (const auto& p : j) out.push_back({p.at(0), p.at(1)});
  return out;
}

std::string frame_name(const char* prefix, int f, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d.%s", prefix, f, ext);
  return buf;
}

}  // namespace

void SceneDataset::validate() const {
  if ((int)cameras.size() != n_frames || (int)images.size() != n_frames ||
      (int)labels.size() != n_frames || (int)init_poses.size() != n_frames)
    throw Error("dataset: inconsistent frame counts");
  if (has_gt && (int)gt_poses.size() != n_frames) throw Error("dataset: bad GT frame count");
  for (const auto& label : labels)
    for (uint8_t v : label.pixels)
      if (v != 0 && v != 1 && v != 2 && v != 255)
        throw Error("dataset: label value out of {0,1,2,255}");
  for (const auto& cam : cameras)
    if (!cam.valid()) throw Error("dataset: invalid camera");
}

void save_dataset(const SceneDataset& ds, const std::string& dir) {
  ds.validate();
  fs::create_directories(fs::path(dir) / "frames");
  fs::create_directories(fs::path(dir) / "skeleton");

  json manifest;
  manifest["version"] = 1;
  manifest["width"] = ds.width;
  manifest["height"] = ds.height;
  manifest["n_frames"] = ds.n_frames;
  manifest["r_bg"] = ds.r_bg;
  manifest["conventions"] = {
      {"units", "1 unit = 1 cm"},
      {"camera", "right-handed, looks down +z, extrinsic is camera-to-world"},
      {"skinning_weight_query", "posed_template_knn"},
      {"labels", "0 background, 1 hand, 2 object, 255 ignore"}};

  json cams = json::array();
  for (const auto& c : ds.cameras) cams.push_back(camera_json(c));
  manifest["cameras"] = cams;

  {
    const Skeleton& sk = *ds.skeleton;
    json bones = json::array();
    for (const auto& b : sk.bones())
      bones.push_back({{"parent", b.parent},
                       {"rest_offset", vec3_json(b.rest_offset)},
                       {"tip_offset", vec3_json(b.tip_offset)},
                       {"radius", b.radius},
                       {"ring_segments", b.ring_segments},
                       {"cap_rows", b.cap_rows},
                       {"body_rows", b.body_rows}});
    json ranges = json::array();
    for (const auto& [b, e] : sk.bone_vertex_ranges()) ranges.push_back({b, e});
    manifest["skeleton"] = {{"bones", bones},
                            {"k_nearest", sk.k_nearest()},
                            {"template_obj", "skeleton/template.obj"},
                            {"weights_f32", "skeleton/weights.f32"},
                            {"bone_vertex_ranges", ranges},
                            {"tip_vertex_ids", sk.tip_vertex_ids()}};
    save_obj(sk.template_mesh(), (fs::path(dir) / "skeleton/template.obj").string());
    std::ofstream ws((fs::path(dir) / "skeleton/weights.f32").string(), std::ios::binary);
    for (const auto& row : sk.template_weights())
      for (double w : row) {
        const float f = (float)w;
        ws.write((const char*)&f, 4);
      }
  }

  auto poses_json = [&](const std::vector<FramePoses>& poses) {
    json hand = json::array(), object = json::array();
    for (const auto& p : poses) {
      hand.push_back(hand_state_json(p.hand));
      // Stored in the raw cloud frame so re-normalization on load recovers it.
      ScaledRigid raw = p.object;
      raw.scale = p.object.scale / ds.norm_scale;
      raw.translation = p.object.translation - raw.rotation * ds.norm_centroid * raw.scale;
      object.push_back(object_pose_json(raw));
    }
    return json{{"hand", hand}, {"object", object}};
  };
  manifest["init_poses"] = poses_json(ds.init_poses);
  if (ds.has_gt) {
    json gt_hand = json::array(), gt_object = json::array();
    for (const auto& p : ds.gt_poses) {
      gt_hand.push_back(hand_state_json(p.hand));
      gt_object.push_back(object_pose_json(p.object));
    }
    manifest["gt"] = {{"hand", gt_hand},
                      {"object", gt_object},
                      {"shape", shape_json(ds.gt_object_shape)}};
  }

  json joints2d = json::array(), cloud2d = json::array();
  for (const auto& frame : ds.joints2d) joints2d.push_back(pixels_json(frame));
  for (const auto& frame : ds.cloud2d) cloud2d.push_back(pixels_json(frame));
  manifest["observations"] = {{"joints2d", joints2d}, {"cloud2d", cloud2d}};
  manifest["cloud_ply"] = "cloud.ply";
  save_ply((fs::path(dir) / "cloud.ply").string(), ds.cloud_raw);

  json frames = json::array();
  for (int f = 0; f < ds.n_frames; ++f) {
    json fr;
    fr["image"] = "frames/" + frame_name("frame", f, "png");
    fr["labels"] = "frames/" + frame_name("label", f, "png");
    save_png((fs::path(dir) / fr["image"].get<std::string>()).string(), ds.images[f]);
    save_png((fs::path(dir) / fr["labels"].get<std::string>()).string(), ds.labels[f]);
    if (!ds.depth.empty() && !ds.depth[f].empty()) {
      fr["depth"] = "frames/" + frame_name("depth", f, "pfm");
      save_pfm((fs::path(dir) / fr["depth"].get<std::string>()).string(), ds.width, ds.height,
               ds.depth[f]);
    }
    frames.push_back(fr);
  }
  manifest["frames"] = frames;

  std::ofstream os((fs::path(dir) / "manifest.json").string());
  if (!os) throw Error("save_dataset: cannot write manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

SceneDataset load_dataset(const std::string& dir) {
  std::ifstream is((fs::path(dir) / "manifest.json").string());
  if (!is) throw Error("load_dataset: no manifest in " + dir);
  json manifest = json::parse(is);

  SceneDataset ds;
  ds.root_dir = dir;
  ds.width = manifest.at("width");
  ds.height = manifest.at("height");
  ds.n_frames = manifest.at("n_frames");
  ds.r_bg = manifest.at("r_bg");
  for (const auto& c : manifest.at("cameras")) ds.cameras.push_back(camera_from(c));

  {
    const json& sj = manifest.at("skeleton");
    std::vector<BoneSpec> bones;
    for (const auto& b : sj.at("bones")) {
      BoneSpec spec;
      spec.parent = b.at("parent");
      spec.rest_offset = vec3_from(b.at("rest_offset"));
      spec.tip_offset = vec3_from(b.at("tip_offset"));
      spec.radius = b.at("radius");
      spec.ring_segments = b.at("ring_segments");
      spec.cap_rows = b.at("cap_rows");
      spec.body_rows = b.at("body_rows");
      bones.push_back(spec);
    }
    ds.skeleton = std::make_shared<Skeleton>(std::move(bones), sj.at("k_nearest").get<int>());
    // The template regenerates deterministically; confirm it matches the
    // serialized copy.
    const TriMesh stored =
        load_obj((fs::path(dir) / sj.at("template_obj").get<std::string>()).string());
    if (stored.vertices.size() != ds.skeleton->template_mesh().vertices.size())
      throw Error("load_dataset: skeleton template mismatch");
  }

  ds.cloud_raw = load_ply((fs::path(dir) / manifest.at("cloud_ply").get<std::string>()).string());
  // Canonicalize: centroid to the origin, furthest point to the unit sphere.
  Vec3 centroid{0, 0, 0};
  for (const auto& p : ds.cloud_raw) centroid += p;
  if (!ds.cloud_raw.empty()) centroid = centroid / (double)ds.cloud_raw.size();
  double radius = 0;
  for (const auto& p : ds.cloud_raw) radius = std::max(radius, norm(p - centroid));
  if (radius <= 0) radius = 1.0;
  ds.norm_centroid = centroid;
  ds.norm_scale = radius;
  ds.cloud_canonical.reserve(ds.cloud_raw.size());
  for (const auto& p : ds.cloud_raw) ds.cloud_canonical.push_back((p - centroid) / radius);

  auto load_poses = [&](const json& hand, const json& object, bool renormalize) {
    std::vector<FramePoses> out;
    for (size_t f = 0; f < hand.size(); ++f) {
      FramePoses p;
      p.hand = hand_state_from(hand.at(f));
      p.object = object_pose_from(object.at(f));
      if (renormalize) {
        p.object.translation =
            p.object.translation + p.object.rotation * ds.norm_centroid * p.object.scale;
        p.object.scale = p.object.scale * ds.norm_scale;
      }
      out.push_back(std::move(p));
    }
    return out;
  };
  ds.init_poses = load_poses(manifest.at("init_poses").at("hand"),
                             manifest.at("init_poses").at("object"), true);
  if (manifest.contains("gt")) {
    ds.has_gt = true;
    ds.gt_poses = load_poses(manifest.at("gt").at("hand"), manifest.at("gt").at("object"), false);
    ds.gt_object_shape = shape_from(manifest.at("gt").at("shape"));
  }

  for (const auto& frame : manifest.at("observations").at("joints2d"))
    ds.joints2d.push_back(pixels_from(frame));
  for (const auto& frame : manifest.at("observations").at("cloud2d"))
    ds.cloud2d.push_back(pixels_from(frame));

  for (const auto& fr : manifest.at("frames")) {
    ds.images.push_back(load_png((fs::path(dir) / fr.at("image").get<std::string>()).string()));
    ds.labels.push_back(load_png((fs::path(dir) / fr.at("labels").get<std::string>()).string()));
    if (fr.contains("depth")) {
      int w, h;
      ds.depth.push_back(
          load_pfm((fs::path(dir) / fr.at("depth").get<std::string>()).string(), w, h));
    }
  }
  ds.validate();
  return ds;
}

void write_back_poses(const std::string& dir, const SceneDataset& ds,
                      const std::vector<FramePoses>& refined, const std::string& stage,
                      int iterations) {
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream is(manifest_path);
  if (!is) throw Error("write_back_poses: no manifest in " + dir);
  json manifest = json::parse(is);
  is.close();

  json hand = json::array(), object = json::array();
  for (const auto& p : refined) {
    hand.push_back(hand_state_json(p.hand));
    ScaledRigid raw = p.object;
    raw.scale = p.object.scale / ds.norm_scale;
    raw.translation = p.object.translation - raw.rotation * ds.norm_centroid * raw.scale;
    object.push_back(object_pose_json(raw));
  }
  manifest["init_poses"] = {{"hand", hand}, {"object", object}};
  manifest["provenance"] = {{"stage", stage}, {"iterations", iterations}};
  std::ofstream os(manifest_path);
  os << manifest.dump(2) << "\n";
}

}  // namespace holdfield
