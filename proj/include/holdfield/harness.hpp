#pragma once

#include "holdfield/dataset.hpp"
#include "holdfield/losses.hpp"
#include "holdfield/meshmetrics.hpp"
#include "holdfield/refine.hpp"
#include "holdfield/scenescript.hpp"

namespace holdfield {

// Sampling budgets follow the training protocol: 10 images per step, 256
// rays per image, 64 samples per ray per entity; pretraining runs half the
// final-stage epochs.
struct TrainConfig {
  int epochs_pretrain = 50;
  int epochs_final = 100;
  int steps_per_epoch = 4;
  int images_per_step = 10;
  int rays_per_image = 256;
  int samples_per_ray = 64;
  int background_samples = 12;
  int eikonal_samples = 64;
  int sdf_samples = 128;
  int mesh_refresh_epochs = 10;
  int checkpoint_every = 25;
  uint64_t seed = 7;
  bool optimize_poses = true;
  SamplerMode sampler_mode = SamplerMode::ErrorBounded;
  AdamConfig adam;

  void validate() const;
};

TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

// --- synthetic scene generation -------------------------------------------------

// Analytic ground-truth scene assembled from a script: renders images and
// label maps with the dense-quadrature oracle, emits noisy init poses and a
// sparse arbitrary-scale object point cloud.
SceneDataset gen_scene(const SceneScript& script);

// Canonical analytic object shape described by the script.
AnalyticShape script_object_shape(const SceneScript& script);
// Ground-truth hand capsules in world space, as an analytic union.
AnalyticShape posed_hand_shape(const Skeleton& sk, const HandState& hs);

// Procedural ground-truth appearance, shared by the oracle and tests.
Vec3 hand_color(const Vec3& x_world);
Vec3 object_color(const Vec3& x_canonical);
Vec3 background_color(const Vec3& direction);

// Oracle renderer over the analytic ground truth of a frame; sampler
// configurable so dense-quadrature references and engine-budget renders share
// one path.
RenderScene oracle_scene(const SceneDataset& ds, int frame, const SamplerConfig& sampler);

// --- training -------------------------------------------------------------------

enum class TrainStage { Pretrain, Final };

struct TrainState {
  SceneParams scene;
  ParamSet params;
  Adam adam;
  std::shared_ptr<Skeleton> skeleton;
  TriMesh object_mesh;  // refreshed periodically for the sparsity loss
  std::shared_ptr<MeshBvh> object_mesh_bvh;
  int total_dropped_samples = 0;
  bool hand_enabled = true;
};

TrainState init_train_state(const SceneDataset& ds, const TrainConfig& cfg);
// Reinitializes field parameters and latent codes from scratch (poses kept).
void reinit_fields(TrainState& state, uint64_t seed);

struct StepStats {
  int epoch = 0, step = 0;
  LossBreakdown loss;
  double grad_norm = 0;
  int dropped_samples = 0;
};

// One optimization step; deterministic in (state, config, stage, epoch, step)
// for any worker count.
StepStats train_step(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage,
                     TrainState& state, int epoch, int step);

// Loss and gradient of one step without applying the update (test hook).
StepStats train_loss_probe(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage,
                           TrainState& state, int epoch, int step, std::vector<double>* grad);

// Full stage loop with NDJSON logging and periodic checkpoints.
void train(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage, TrainState& state,
           const std::string& run_dir, std::ostream* log);

Checkpoint make_checkpoint(const TrainState& state);
TriMesh extract_object_mesh(const TrainState& state, int resolution = 64);
TriMesh extract_hand_mesh(const TrainState& state, int resolution = 64);

// Bound neural render scene for a frame of the current state.
RenderScene neural_scene_for_frame(const TrainState& state, const SceneDataset& ds, int frame,
                                   const PosedHand& posed, const SamplerConfig& sampler,
                                   AmodalMode amodal = AmodalMode::OcclusionAware);

// --- pipeline --------------------------------------------------------------------

struct PipelineOptions {
  std::string out_dir;
  bool skip_refine = false;
  bool mask_hand = false;
  AmodalMode amodal = AmodalMode::OcclusionAware;
};

struct PipelineResult {
  MetricReport metrics;
  std::string object_mesh_path;
  std::string metrics_path;
  RefineResult align_result;
  RefineResult refine_result;
  bool refined = false;
  TriMesh object_mesh_canonical;  // final canonical extraction
  double object_scale = 1.0;
  std::vector<FramePoses> final_poses;
};

// init -> pretrain -> extract -> refine -> final train -> meshes + metrics.
PipelineResult pipeline(const SceneDataset& ds, const TrainConfig& cfg,
                        const PipelineOptions& options);

// Evaluation against the dataset ground truth using the given state.
MetricReport evaluate_state(const TrainState& state, const SceneDataset& ds,
                            const TriMesh& object_canonical);

// GT meshes for evaluation and tests.
TriMesh gt_object_mesh_canonical(const SceneDataset& ds, int resolution = 96);
std::vector<Vec3> gt_joints(const SceneDataset& ds, int frame);
std::vector<Vec3> predicted_joints(const TrainState& state, int frame);

}  // namespace holdfield
