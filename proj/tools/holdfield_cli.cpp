// Command-line front end: scene generation, training, refinement, mesh
// extraction, rendering, evaluation and the full pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "holdfield/harness.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace holdfield;

namespace {

TrainConfig config_from(const std::string& config_path, uint64_t seed, bool have_seed) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = load_train_config(config_path);
  if (have_seed) cfg.seed = seed;
  return cfg;
}

TrainState state_from_checkpoint(const SceneDataset& ds, const TrainConfig& cfg,
                                 const std::string& ckpt_path) {
  TrainState state = init_train_state(ds, cfg);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.params.size() != state.params.size())
    throw Error("checkpoint does not match the dataset scene");
  state.params.values = ckpt.params.values;
  if (!ckpt.adam_m.empty()) {
    state.adam.m = ckpt.adam_m;
    state.adam.v = ckpt.adam_v;
    state.adam.step_count = ckpt.adam_step;
  }
  return state;
}

int run(int argc, char** argv) {
  CLI::App app{"holdfield: hand-object neural SDF reconstruction engine"};
  app.require_subcommand(1);

  std::string scene_path, data_dir, out_path, config_path, ckpt_path, pred_path, gt_path;
  std::string stage_name = "pretrain", field_name = "object";
  uint64_t seed = 7;
  bool have_seed = false;
  int frame = 0, resolution = 64;
  bool skip_refine = false, mask_hand = false;
  std::string amodal_mode = "occlusion";

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "random seed")->each([&](const std::string&) {
      have_seed = true;
    });
  };

  auto* gen = app.add_subcommand("gen-scene", "generate a synthetic dataset from a scene script");
  gen->add_option("--scene", scene_path, "scene script (TOML)")->required();
  gen->add_option("--out", out_path, "output dataset directory")->required();
  add_seed(gen);

  auto* train_cmd = app.add_subcommand("train", "train one stage on a dataset");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_path, "run directory")->required();
  train_cmd->add_option("--stage", stage_name, "pretrain | final");
  train_cmd->add_option("--config", config_path, "train config JSON");
  train_cmd->add_option("--checkpoint", ckpt_path, "resume parameters from a checkpoint");
  add_seed(train_cmd);

  auto* refine_cmd = app.add_subcommand("refine", "mesh-based pose refinement");
  refine_cmd->add_option("--data", data_dir, "dataset directory")->required();
  refine_cmd->add_option("--checkpoint", ckpt_path, "pretrained checkpoint")->required();
  refine_cmd->add_option("--config", config_path, "train config JSON");
  add_seed(refine_cmd);

  auto* extract = app.add_subcommand("extract-mesh", "marching cubes over a trained field");
  extract->add_option("--data", data_dir, "dataset directory")->required();
  extract->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  extract->add_option("--out", out_path, "output OBJ path")->required();
  extract->add_option("--field", field_name, "object | hand");
  extract->add_option("--resolution", resolution, "grid resolution");

  auto* render_cmd = app.add_subcommand("render", "render a frame from a checkpoint");
  render_cmd->add_option("--data", data_dir, "dataset directory")->required();
  render_cmd->add_option("--checkpoint", ckpt_path, "checkpoint")->required();
  render_cmd->add_option("--out", out_path, "output prefix")->required();
  render_cmd->add_option("--frame", frame, "frame index");
  render_cmd->add_option("--amodal", amodal_mode, "occlusion | independent");

  auto* eval_cmd = app.add_subcommand("evaluate", "mesh-vs-mesh metrics (ICP aligned)");
  eval_cmd->add_option("--pred", pred_path, "predicted mesh OBJ")->required();
  eval_cmd->add_option("--gt", gt_path, "ground-truth mesh OBJ")->required();
  eval_cmd->add_option("--out", out_path, "metrics JSON path");

  auto* pipe = app.add_subcommand("pipeline", "init, pretrain, refine, final train, evaluate");
  pipe->add_option("--scene", scene_path, "scene script (generates the dataset)");
  pipe->add_option("--data", data_dir, "existing dataset directory");
  pipe->add_option("--out", out_path, "run directory")->required();
  pipe->add_option("--config", config_path, "train config JSON");
  pipe->add_flag("--skip-refine", skip_refine, "skip the pose-refinement stage");
  pipe->add_flag("--mask-hand", mask_hand, "ignore hand pixels and disable the hand model");
  pipe->add_option("--amodal", amodal_mode, "occlusion | independent");
  add_seed(pipe);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints usage or the error
    return e.get_name() == "CallForHelp" ? 0 : 1;
  }

  if (gen->parsed()) {
    SceneScript script = parse_scene_script(scene_path);
    if (have_seed) script.seed = seed;
    const SceneDataset ds = gen_scene(script);
    save_dataset(ds, out_path);
    std::cout << "dataset written to " << out_path << " (" << ds.n_frames << " frames)\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const TrainConfig cfg = config_from(config_path, seed, have_seed);
    const SceneDataset ds = load_dataset(data_dir);
    if (stage_name != "final" && stage_name != "pretrain")
      throw Error("unknown stage " + stage_name);
    const TrainStage stage = stage_name == "final" ? TrainStage::Final : TrainStage::Pretrain;
    TrainState state = ckpt_path.empty() ? init_train_state(ds, cfg)
                                         : state_from_checkpoint(ds, cfg, ckpt_path);
    fs::create_directories(out_path);
    std::ofstream log(fs::path(out_path) / "train.log.ndjson", std::ios::app);
    train(ds, cfg, stage, state, out_path, &log);
    std::cout << "stage " << stage_name << " done; checkpoints under " << out_path << "\n";
    return 0;
  }

  if (refine_cmd->parsed()) {
    const TrainConfig cfg = config_from(config_path, seed, have_seed);
    const SceneDataset ds = load_dataset(data_dir);
    TrainState state = state_from_checkpoint(ds, cfg, ckpt_path);
    RefineProblem prob;
    prob.skeleton = state.skeleton.get();
    prob.scene = state.scene;
    prob.params = &state.params;
    prob.contact.tip_vertex_ids = state.skeleton->tip_vertex_ids();
    prob.cloud_canonical = ds.cloud_canonical;
    prob.object_mesh_canonical = largest_component(extract_object_mesh(state));
    for (int f = 0; f < ds.n_frames; ++f) {
      RefineFrameData fd;
      fd.camera = ds.cameras[f];
      fd.labels = ds.labels[f].pixels;
      fd.joints2d = ds.joints2d[f];
      fd.cloud2d = ds.cloud2d[f];
      prob.frames.push_back(std::move(fd));
    }
    const RefineResult res = refine_poses(prob);
    std::vector<FramePoses> poses(ds.n_frames);
    for (int f = 0; f < ds.n_frames; ++f) {
      poses[f].hand = state.scene.hand_state(state.params, f);
      poses[f].object = state.scene.object_state(state.params, f).to_world;
    }
    write_back_poses(data_dir, ds, poses, "refine", res.iterations);
    std::cout << "refined poses written back (" << res.iterations << " iterations, "
              << (res.converged ? "converged" : "max iterations") << ")\n";
    return 0;
  }

  if (extract->parsed()) {
    const TrainConfig cfg = config_from(config_path, seed, have_seed);
    const SceneDataset ds = load_dataset(data_dir);
    TrainState state = state_from_checkpoint(ds, cfg, ckpt_path);
    const TriMesh mesh = field_name == "hand" ? extract_hand_mesh(state, resolution)
                                              : extract_object_mesh(state, resolution);
    save_obj(largest_component(mesh), out_path);
    std::cout << "mesh written to " << out_path << "\n";
    return 0;
  }

  if (render_cmd->parsed()) {
    const TrainConfig cfg = config_from(config_path, seed, have_seed);
    const SceneDataset ds = load_dataset(data_dir);
    TrainState state = state_from_checkpoint(ds, cfg, ckpt_path);
    const PosedHand posed =
        pose_hand(*state.skeleton, state.scene.hand_state(state.params, frame));
    SamplerConfig sampler;
    sampler.count = cfg.samples_per_ray;
    sampler.background_count = cfg.background_samples;
    const AmodalMode amodal =
        amodal_mode == "independent" ? AmodalMode::Independent : AmodalMode::OcclusionAware;
    const RenderScene scene = neural_scene_for_frame(state, ds, frame, posed, sampler, amodal);
    const ImageChannels img = render_image(scene, ds.cameras[frame]);
    ImageU8 rgb;
    rgb.width = ds.width;
    rgb.height = ds.height;
    rgb.channels = 3;
    rgb.pixels.resize((size_t)ds.width * ds.height * 3);
    for (size_t i = 0; i < img.color.size(); ++i) {
      rgb.pixels[3 * i] = to_u8(img.color[i].x);
      rgb.pixels[3 * i + 1] = to_u8(img.color[i].y);
      rgb.pixels[3 * i + 2] = to_u8(img.color[i].z);
    }
    save_png(out_path + ".png", rgb);
    save_pfm(out_path + "_m_f.pfm", ds.width, ds.height, img.m_f);
    save_pfm(out_path + "_m_h.pfm", ds.width, ds.height, img.m_h);
    save_pfm(out_path + "_m_o.pfm", ds.width, ds.height, img.m_o);
    save_pfm(out_path + "_depth.pfm", ds.width, ds.height, img.depth);
    std::cout << "render written to " << out_path << ".png\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    const TriMesh pred = load_obj(pred_path);
    const TriMesh gt = load_obj(gt_path);
    const IcpResult icp = icp_align(pred, gt, /*allow_scale=*/true);
    MetricReport report;
    report.cd_cm2 = chamfer_mesh(icp.aligned, gt);
    report.f5_pct = fscore_mesh(icp.aligned, gt, 0.5);
    report.f10_pct = fscore_mesh(icp.aligned, gt, 1.0);
    std::cout << "cd_cm2 " << report.cd_cm2 << "\nf5_pct " << report.f5_pct << "\nf10_pct "
              << report.f10_pct << "\n";
    if (!out_path.empty()) save_metric_report(report, out_path);
    return 0;
  }

  if (pipe->parsed()) {
    if (scene_path.empty() && data_dir.empty()) throw Error("pipeline needs --scene or --data");
    const TrainConfig cfg = config_from(config_path, seed, have_seed);
    SceneDataset ds;
    if (!scene_path.empty()) {
      SceneScript script = parse_scene_script(scene_path);
      if (have_seed) script.seed = seed;
      const std::string ds_dir =
          data_dir.empty() ? (fs::path(out_path) / "dataset").string() : data_dir;
      ds = gen_scene(script);
      save_dataset(ds, ds_dir);
      ds = load_dataset(ds_dir);
    } else {
      ds = load_dataset(data_dir);
    }
    PipelineOptions options;
    options.out_dir = out_path;
    options.skip_refine = skip_refine;
    options.mask_hand = mask_hand;
    options.amodal =
        amodal_mode == "independent" ? AmodalMode::Independent : AmodalMode::OcclusionAware;
    const PipelineResult result = pipeline(ds, cfg, options);
    std::cout << "pipeline done; metrics: cd_cm2 " << result.metrics.cd_cm2 << ", f10_pct "
              << result.metrics.f10_pct << ", cdh_cm2 " << result.metrics.cdh_cm2 << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
