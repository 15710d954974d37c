#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hiseg/assoc.hpp"
#include "hiseg/blocks.hpp"
#include "hiseg/hierarchy.hpp"

namespace hiseg {

struct ModelConfig {
  int image_h = 64, image_w = 64;
  int stem_stride = 2;
  int stem_channels = 40;  // pixel feature width
  int sp_channels = 60;    // superpixel/group width; divisible by every head count
  int trunk_depth = 4;
  std::vector<int> sca_before = {0, 2};  // trunk block indices preceded by an SCA block
  int branch_depth = 3;
  int gca_stages = 3;  // placed before the last gca_stages object-branch blocks
  int sca_heads = 2;
  int gca_heads = 6;
  int vit_heads = 6;
  int ffn_ratio = 4;
  int group_ratio = 16;  // superpixels per group; per-axis stride is its square root
  bool group_init_learnable = false;
  int num_parts = 6;    // P; labels 0..P with 0 = background
  int num_objects = 2;  // O
  double loss_lambda = 1.0;
  std::uint64_t seed = 0;

  int pixel_h() const { return image_h / stem_stride; }
  int pixel_w() const { return image_w / stem_stride; }
  int sp_h() const { return pixel_h() / 4; }
  int sp_w() const { return pixel_w() / 4; }
  int group_n() const { return sp_h() * sp_w() / group_ratio; }

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

class Model {
 public:
  ModelConfig cfg;
  CandidateMap cmap;

  ConvStemParams stem;
  LinearParams sp_proj;
  std::vector<ScaParams> sca;  // one per cfg.sca_before entry
  std::vector<ViTBlockParams> trunk;
  std::vector<ViTBlockParams> part_branch;
  std::vector<ViTBlockParams> obj_branch;
  std::vector<GcaParams> gca;
  GroupInitParams group_tokens;
  LinearParams part_head;  // s_c -> P+1
  LinearParams obj_head;   // g_c -> O+1

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = delete;

  // Fixed registration order; checkpoint layout and optimizer state both
  // follow it.
  std::vector<Parameter*> parameters();
  std::int64_t param_count();
  void zero_grads();
};

std::unique_ptr<Model> model_build(const ModelConfig& cfg);

enum class UpsampleMode { kAssoc, kBilinear };

struct ForwardHooks {
  // Replaces learned associations with geometric parent one-hots.
  bool force_parent_assoc = false;
  UpsampleMode upsample = UpsampleMode::kAssoc;
};

struct ForwardOutput {
  Tensor part_logits;  // [m_h x m_w x (P+1)]
  Tensor obj_logits;   // [m_h x m_w x (O+1)]
  AssocPixSp assoc_pix_sp;
  AssocSpGroup assoc_sp_group;
  // Restoration chain, coarse to fine, kept for dumps and tests.
  Tensor obj_group_logits;  // [g_n x (O+1)]
  Tensor obj_sp_logits;     // [s_h x s_w x (O+1)]
  Tensor obj_pix_logits;    // [i_h x i_w x (O+1)]
  Tensor part_sp_logits;    // [s_h x s_w x (P+1)]
  Tensor part_pix_logits;   // [i_h x i_w x (P+1)]
};

// image values are expected in [-0.5, 0.5] (see image_to_tensor). Passing a
// null graph runs a pure, tape-free forward.
ForwardOutput model_forward(Model& m, const Tensor& image, Graph* g,
                            const ForwardHooks* hooks = nullptr);

// u8 RGB (h*w*3, row-major) -> [h x w x 3] doubles in [-0.5, 0.5].
Tensor image_to_tensor(const std::uint8_t* rgb, int h, int w);

// Mean per-pixel cross-entropy of the part map plus lambda times the same
// for the object map. Label maps are u8, background = 0.
Tensor joint_loss(const ForwardOutput& out, const std::vector<std::uint8_t>& part_gt,
                  const std::vector<std::uint8_t>& obj_gt, double lambda,
                  double part_weight = 1.0);

struct AdamWState {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::int64_t step = 0;
  std::vector<Tensor> m, v;  // aligned with Model::parameters()

  static AdamWState init(Model& model);
};

// Decoupled AdamW with bias correction; lr is taken from state.lr.
void adamw_step(Model& model, AdamWState& opt);

// Piecewise-constant step schedule: base until 90% of the run, then a
// tenth, then a hundredth from 95%.
double lr_at(std::int64_t iter, std::int64_t total, double base_lr);

struct TrainBatchSample {
  Tensor image;
  const std::vector<std::uint8_t>* part_gt;
  const std::vector<std::uint8_t>* obj_gt;
};

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Forward/backward over the batch (optionally threaded; gradients are
// summed in sample order either way), then one AdamW update.
StepStats train_step(Model& model, AdamWState& opt, const std::vector<TrainBatchSample>& batch,
                     double part_weight = 1.0, double lambda_override = -1.0, int n_threads = 1);

// ---- checkpoint io -----------------------------------------------------

// Binary container: magic "HSCKPT1\0", u32 version, u32 config length +
// canonical config JSON, u32 parameter count, then per parameter
// u16 name length + name, u8 rank, u32 extents, f64 payload. Little-endian.
void checkpoint_save(const std::string& path, Model& model, const std::string& config_json);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  std::string config_json;
};

// Rebuilds the model from the embedded config and validates every
// parameter name and shape against it.
LoadedCheckpoint checkpoint_load(const std::string& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace hiseg
