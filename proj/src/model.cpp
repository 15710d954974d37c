#include "hiseg/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace hiseg {

namespace {

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

int isqrt_exact(int v) {
  const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
  return r * r == v ? r : -1;
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument("model config: " + msg);
}

Tensor vit_on_grid(const Tensor& grid, ViTBlockParams& p) {
  const int h = grid.shape[0], w = grid.shape[1], c = grid.shape[2];
  return reshape(vit_block(reshape(grid, {h * w, c}), p), {h, w, c});
}

}  // namespace

void ModelConfig::validate() const {
  check(image_h > 0 && image_w > 0, "image dims must be positive");
  check(is_pow2(stem_stride), "stem_stride must be a power of two, got " +
                                  std::to_string(stem_stride));
  check(image_h % stem_stride == 0 && image_w % stem_stride == 0,
        "image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
            " not divisible by stem_stride " + std::to_string(stem_stride));
  check(pixel_h() % 4 == 0 && pixel_w() % 4 == 0,
        "pixel grid " + std::to_string(pixel_h()) + "x" + std::to_string(pixel_w()) +
            " not divisible by the superpixel stride 4");
  const int per_axis = isqrt_exact(group_ratio);
  check(per_axis >= 1, "group_ratio must be a perfect square, got " + std::to_string(group_ratio));
  check(sp_h() % per_axis == 0 && sp_w() % per_axis == 0,
        "superpixel grid " + std::to_string(sp_h()) + "x" + std::to_string(sp_w()) +
            " not divisible by the per-axis group stride " + std::to_string(per_axis));
  check(stem_channels > 0 && sp_channels > 0, "channel widths must be positive");
  check(sca_heads > 0 && sp_channels % sca_heads == 0,
        "sp_channels " + std::to_string(sp_channels) + " not divisible by sca_heads " +
            std::to_string(sca_heads));
  check(vit_heads > 0 && sp_channels % vit_heads == 0,
        "sp_channels " + std::to_string(sp_channels) + " not divisible by vit_heads " +
            std::to_string(vit_heads));
  check(gca_heads > 0 && sp_channels % gca_heads == 0,
        "sp_channels " + std::to_string(sp_channels) + " not divisible by gca_heads " +
            std::to_string(gca_heads));
  check(trunk_depth >= 1 && branch_depth >= 1, "depths must be >= 1");
  check(gca_stages >= 1, "gca_stages must be >= 1");
  check(ffn_ratio >= 1, "ffn_ratio must be >= 1");
  check(!sca_before.empty(), "at least one SCA placement is required");
  for (std::size_t i = 0; i < sca_before.size(); ++i) {
    check(sca_before[i] >= 0 && sca_before[i] < trunk_depth,
          "sca_before entry " + std::to_string(sca_before[i]) + " outside trunk depth " +
              std::to_string(trunk_depth));
    check(i == 0 || sca_before[i] > sca_before[i - 1], "sca_before must be strictly increasing");
  }
  check(num_parts >= 1 && num_objects >= 1, "class counts must be >= 1");
  check(loss_lambda >= 0.0, "loss_lambda must be >= 0");
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  stem.collect(out);
  sp_proj.collect(out);
  for (auto& b : sca) b.collect(out);
  for (auto& b : trunk) b.collect(out);
  for (auto& b : part_branch) b.collect(out);
  for (auto& b : obj_branch) b.collect(out);
  for (auto& b : gca) b.collect(out);
  group_tokens.collect(out);
  part_head.collect(out);
  obj_head.collect(out);
  return out;
}

std::int64_t Model::param_count() {
  std::int64_t n = 0;
  for (Parameter* p : parameters()) n += p->value.numel();
  return n;
}

void Model::zero_grads() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::unique_ptr<Model> model_build(const ModelConfig& cfg) {
  cfg.validate();
  auto m = std::make_unique<Model>();
  m->cfg = cfg;
  m->cmap = build_candidate_map(cfg.pixel_h(), cfg.pixel_w());
  Rng rng(cfg.seed);

  m->stem = ConvStemParams::init("stem", 3, cfg.stem_channels, cfg.stem_stride, rng);
  m->sp_proj = LinearParams::init("sp_proj", cfg.stem_channels, cfg.sp_channels, rng);
  for (std::size_t i = 0; i < cfg.sca_before.size(); ++i)
    m->sca.push_back(ScaParams::init("sca" + std::to_string(i), cfg.sp_channels,
                                     cfg.stem_channels, cfg.sca_heads, rng));
  for (int i = 0; i < cfg.trunk_depth; ++i)
    m->trunk.push_back(ViTBlockParams::init("trunk.b" + std::to_string(i), cfg.sp_channels,
                                            cfg.vit_heads, cfg.ffn_ratio, rng));
  for (int i = 0; i < cfg.branch_depth; ++i)
    m->part_branch.push_back(ViTBlockParams::init("part.b" + std::to_string(i), cfg.sp_channels,
                                                  cfg.vit_heads, cfg.ffn_ratio, rng));
  for (int i = 0; i < cfg.branch_depth; ++i)
    m->obj_branch.push_back(ViTBlockParams::init("obj.b" + std::to_string(i), cfg.sp_channels,
                                                 cfg.vit_heads, cfg.ffn_ratio, rng));
  for (int i = 0; i < cfg.gca_stages; ++i)
    m->gca.push_back(GcaParams::init("gca" + std::to_string(i), cfg.sp_channels, cfg.gca_heads,
                                     cfg.ffn_ratio, rng));
  m->group_tokens = GroupInitParams::init("group_init", cfg.sp_channels, cfg.group_n(),
                                          cfg.group_init_learnable, rng);
  m->part_head = LinearParams::init("part_head", cfg.sp_channels, cfg.num_parts + 1, rng);
  m->obj_head = LinearParams::init("obj_head", cfg.sp_channels, cfg.num_objects + 1, rng);
  return m;
}

Tensor image_to_tensor(const std::uint8_t* rgb, int h, int w) {
  Tensor t({h, w, 3});
  const std::size_t n = static_cast<std::size_t>(h) * w * 3;
  for (std::size_t i = 0; i < n; ++i) t.data[i] = rgb[i] / 255.0 - 0.5;
  return t;
}

ForwardOutput model_forward(Model& m, const Tensor& image, Graph* g, const ForwardHooks* hooks) {
  const ModelConfig& cfg = m.cfg;
  if (image.rank() != 3 || image.shape[0] != cfg.image_h || image.shape[1] != cfg.image_w ||
      image.shape[2] != 3)
    throw std::invalid_argument("model_forward: image " + shape_str(image.shape) +
                                " does not match configured " + std::to_string(cfg.image_h) +
                                "x" + std::to_string(cfg.image_w) + "x3");
  Tensor img = g ? g->leaf(image) : image.detached();

  // Trunk: stem, superpixel init, then ViT blocks with SCA insertions.
  Tensor pix = conv_stem(img, m.stem);
  Tensor s = superpixel_init(pix, m.sp_proj);
  Tensor sca_logits;
  std::size_t sca_i = 0;
  for (int b = 0; b < cfg.trunk_depth; ++b) {
    if (sca_i < cfg.sca_before.size() && cfg.sca_before[sca_i] == b) {
      ScaResult r = sca_block(s, pix, m.cmap, m.sca[sca_i]);
      s = r.s_out;
      sca_logits = r.logits;
      ++sca_i;
    }
    s = vit_on_grid(s, m.trunk[b]);
  }

  // Part branch.
  Tensor sp_part = s;
  for (auto& blk : m.part_branch) sp_part = vit_on_grid(sp_part, blk);
  const int s_h = cfg.sp_h(), s_w = cfg.sp_w(), s_n = s_h * s_w;
  Tensor part_sp_flat =
      linear(reshape(sp_part, {s_n, cfg.sp_channels}), m.part_head);

  // Object branch: GCA stages ahead of the last cfg.gca_stages blocks;
  // surplus stages run back to back before the first block.
  const int per_axis = isqrt_exact(cfg.group_ratio);
  Tensor sp_obj = s;
  Tensor groups = group_init(s, m.group_tokens, per_axis);
  Tensor g2s_weights;
  int stage = 0;
  const int lead = std::max(0, cfg.gca_stages - cfg.branch_depth);
  for (int e = 0; e < lead; ++e) {
    GcaResult r = gca_stage(groups, sp_obj, m.gca[stage++]);
    groups = r.g_out;
    sp_obj = r.s_out;
    g2s_weights = r.g2s_weights;
  }
  const int first_with_gca = cfg.branch_depth - std::min(cfg.gca_stages, cfg.branch_depth);
  for (int b = 0; b < cfg.branch_depth; ++b) {
    if (b >= first_with_gca) {
      GcaResult r = gca_stage(groups, sp_obj, m.gca[stage++]);
      groups = r.g_out;
      sp_obj = r.s_out;
      g2s_weights = r.g2s_weights;
    }
    sp_obj = vit_on_grid(sp_obj, m.obj_branch[b]);
  }
  Tensor obj_group_logits = linear(groups, m.obj_head);

  ForwardOutput out;
  const bool forced = hooks && hooks->force_parent_assoc;
  out.assoc_pix_sp = forced ? onehot_parent_pix_sp(m.cmap) : pix_sp_assoc(sca_logits, m.cmap);
  out.assoc_sp_group =
      forced ? onehot_parent_sp_group(s_h, s_w, per_axis) : sp_group_assoc(g2s_weights, s_h, s_w);
  out.obj_group_logits = obj_group_logits;
  out.part_sp_logits = reshape(part_sp_flat, {s_h, s_w, cfg.num_parts + 1});

  const bool bilinear = hooks && hooks->upsample == UpsampleMode::kBilinear;
  if (bilinear) {
    out.part_pix_logits = bilinear_resize(out.part_sp_logits, cfg.pixel_h(), cfg.pixel_w());
    Tensor g_grid =
        reshape(obj_group_logits, {s_h / per_axis, s_w / per_axis, cfg.num_objects + 1});
    out.obj_sp_logits = bilinear_resize(g_grid, s_h, s_w);
    out.obj_pix_logits = bilinear_resize(out.obj_sp_logits, cfg.pixel_h(), cfg.pixel_w());
  } else {
    out.part_pix_logits = upsample_sp_to_pix(out.part_sp_logits, out.assoc_pix_sp);
    out.obj_sp_logits = upsample_group_to_sp(obj_group_logits, out.assoc_sp_group);
    out.obj_pix_logits = upsample_sp_to_pix(out.obj_sp_logits, out.assoc_pix_sp);
  }
  out.part_logits = bilinear_resize(out.part_pix_logits, cfg.image_h, cfg.image_w);
  out.obj_logits = bilinear_resize(out.obj_pix_logits, cfg.image_h, cfg.image_w);
  return out;
}

Tensor joint_loss(const ForwardOutput& out, const std::vector<std::uint8_t>& part_gt,
                  const std::vector<std::uint8_t>& obj_gt, double lambda, double part_weight) {
  const int h = out.part_logits.shape[0], w = out.part_logits.shape[1];
  const int n = h * w;
  if (static_cast<int>(part_gt.size()) != n || static_cast<int>(obj_gt.size()) != n)
    throw std::invalid_argument("joint_loss: label maps must have " + std::to_string(n) +
                                " entries");
  std::vector<int> pl(part_gt.begin(), part_gt.end());
  std::vector<int> ol(obj_gt.begin(), obj_gt.end());
  Tensor ce_part =
      softmax_cross_entropy_mean(reshape(out.part_logits, {n, out.part_logits.shape[2]}), pl);
  Tensor ce_obj =
      softmax_cross_entropy_mean(reshape(out.obj_logits, {n, out.obj_logits.shape[2]}), ol);
  return add(scale(ce_part, part_weight), scale(ce_obj, lambda));
}

AdamWState AdamWState::init(Model& model) {
  AdamWState s;
  for (Parameter* p : model.parameters()) {
    s.m.push_back(Tensor::zeros(p->value.shape));
    s.v.push_back(Tensor::zeros(p->value.shape));
  }
  return s;
}

void adamw_step(Model& model, AdamWState& o) {
  auto params = model.parameters();
  if (params.size() != o.m.size())
    throw std::invalid_argument("adamw_step: optimizer state does not match model");
  o.step += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(o.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(o.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    for (std::size_t j = 0; j < p.value.data.size(); ++j) {
      const double g = p.grad.data[j];
      double& mj = o.m[i].data[j];
      double& vj = o.v[i].data[j];
      mj = o.beta1 * mj + (1.0 - o.beta1) * g;
      vj = o.beta2 * vj + (1.0 - o.beta2) * g * g;
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + o.eps);
      p.value.data[j] -= o.lr * (update + o.weight_decay * p.value.data[j]);
    }
  }
}

double lr_at(std::int64_t iter, std::int64_t total, double base_lr) {
  if (iter < 0 || iter >= total)
    throw std::invalid_argument("lr_at: iter " + std::to_string(iter) + " outside [0, " +
                                std::to_string(total) + ")");
  if (iter * 20 >= total * 19) return base_lr / 100.0;
  if (iter * 10 >= total * 9) return base_lr / 10.0;
  return base_lr;
}

StepStats train_step(Model& model, AdamWState& opt, const std::vector<TrainBatchSample>& batch,
                     double part_weight, double lambda_override, int n_threads) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const double lambda = lambda_override >= 0.0 ? lambda_override : model.cfg.loss_lambda;
  const int b_n = static_cast<int>(batch.size());
  model.zero_grads();

  std::vector<std::unique_ptr<Graph>> graphs(b_n);
  std::vector<double> losses(b_n, 0.0);
  auto run_sample = [&](int i) {
    graphs[i] = std::make_unique<Graph>();
    ForwardOutput out = model_forward(model, batch[i].image, graphs[i].get());
    Tensor loss = joint_loss(out, *batch[i].part_gt, *batch[i].obj_gt, lambda, part_weight);
    losses[i] = loss.data[0];
    graphs[i]->backward(loss);
  };

  const int threads = std::max(1, std::min(n_threads, b_n));
  if (threads == 1) {
    for (int i = 0; i < b_n; ++i) run_sample(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (int i = t; i < b_n; i += threads) run_sample(i);
      });
    for (auto& th : pool) th.join();
  }

  StepStats st;
  for (int i = 0; i < b_n; ++i) {
    if (!std::isfinite(losses[i]))
      throw std::runtime_error("train_step: non-finite loss " + std::to_string(losses[i]) +
                               " on batch sample " + std::to_string(i) +
                               "; halting training");
    graphs[i]->write_param_grads(1.0 / b_n);
    st.loss += losses[i] / b_n;
  }

  double sq = 0.0;
  for (Parameter* p : model.parameters())
    for (double gv : p->grad.data) sq += gv * gv;
  st.grad_norm = std::sqrt(sq);

  adamw_step(model, opt);
  return st;
}

// ---- checkpoint io -----------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'S', 'C', 'K', 'P', 'T', '1', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void checkpoint_save(const std::string& path, Model& model, const std::string& config_json) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint_save: cannot open " + path);
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(config_json.size()));
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  auto params = model.parameters();
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (Parameter* p : params) {
    put_u16(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    os.put(static_cast<char>(p->value.rank()));
    for (int e : p->value.shape) put_u32(os, static_cast<std::uint32_t>(e));
    for (double d : p->value.data) put_f64(os, d);
  }
  if (!os) throw std::runtime_error("checkpoint_save: write failed for " + path);
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint_load: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint_load: bad magic at offset 0 in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint_load: unsupported version " + std::to_string(version));
  const std::uint32_t cfg_len = get_u32(is);
  std::string cfg_json(cfg_len, '\0');
  is.read(cfg_json.data(), cfg_len);
  if (!is) throw std::runtime_error("checkpoint_load: truncated config block");

  LoadedCheckpoint lc;
  lc.config_json = cfg_json;
  lc.model = model_build(model_config_from_json(cfg_json));
  auto params = lc.model->parameters();
  const std::uint32_t count = get_u32(is);
  if (count != params.size())
    throw std::runtime_error("checkpoint_load: parameter count " + std::to_string(count) +
                             " does not match model (" + std::to_string(params.size()) + ")");
  for (Parameter* p : params) {
    const std::uint16_t name_len = get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint_load: truncated at parameter name");
    if (name != p->name)
      throw std::runtime_error("checkpoint_load: parameter name '" + name + "' does not match '" +
                               p->name + "'");
    const int rank = is.get();
    std::vector<int> shape;
    for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(get_u32(is)));
    if (shape != p->value.shape)
      throw std::runtime_error("checkpoint_load: parameter '" + name + "' shape " +
                               shape_str(shape) + " does not match " + shape_str(p->value.shape));
    for (double& d : p->value.data) d = get_f64(is);
    if (!is) throw std::runtime_error("checkpoint_load: truncated payload for '" + name + "'");
  }
  return lc;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["image_h"] = cfg.image_h;
  j["image_w"] = cfg.image_w;
  j["stem_stride"] = cfg.stem_stride;
  j["stem_channels"] = cfg.stem_channels;
  j["sp_channels"] = cfg.sp_channels;
  j["trunk_depth"] = cfg.trunk_depth;
  j["sca_before"] = cfg.sca_before;
  j["branch_depth"] = cfg.branch_depth;
  j["gca_stages"] = cfg.gca_stages;
  j["sca_heads"] = cfg.sca_heads;
  j["gca_heads"] = cfg.gca_heads;
  j["vit_heads"] = cfg.vit_heads;
  j["ffn_ratio"] = cfg.ffn_ratio;
  j["group_ratio"] = cfg.group_ratio;
  j["group_init"] = cfg.group_init_learnable ? "learnable" : "avgpool";
  j["num_parts"] = cfg.num_parts;
  j["num_objects"] = cfg.num_objects;
  j["loss_lambda"] = cfg.loss_lambda;
  j["seed"] = cfg.seed;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& json_text) {
  const nlohmann::json j = nlohmann::json::parse(json_text);
  static const std::vector<std::string> known = {
      "image_h",    "image_w",   "stem_stride", "stem_channels", "sp_channels",
      "trunk_depth", "sca_before", "branch_depth", "gca_stages",  "sca_heads",
      "gca_heads",  "vit_heads", "ffn_ratio",   "group_ratio",   "group_init",
      "num_parts",  "num_objects", "loss_lambda", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw std::invalid_argument("model config: unknown key '" + it.key() + "'");
  }
  ModelConfig cfg;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  opt("image_h", cfg.image_h);
  opt("image_w", cfg.image_w);
  opt("stem_stride", cfg.stem_stride);
  opt("stem_channels", cfg.stem_channels);
  opt("sp_channels", cfg.sp_channels);
  opt("trunk_depth", cfg.trunk_depth);
  opt("sca_before", cfg.sca_before);
  opt("branch_depth", cfg.branch_depth);
  opt("gca_stages", cfg.gca_stages);
  opt("sca_heads", cfg.sca_heads);
  opt("gca_heads", cfg.gca_heads);
  opt("vit_heads", cfg.vit_heads);
  opt("ffn_ratio", cfg.ffn_ratio);
  opt("group_ratio", cfg.group_ratio);
  if (j.contains("group_init")) {
    const std::string v = j.at("group_init").get<std::string>();
    if (v != "avgpool" && v != "learnable")
      throw std::invalid_argument("model config: group_init must be 'avgpool' or 'learnable'");
    cfg.group_init_learnable = v == "learnable";
  }
  opt("num_parts", cfg.num_parts);
  opt("num_objects", cfg.num_objects);
  opt("loss_lambda", cfg.loss_lambda);
  opt("seed", cfg.seed);
  return cfg;
}

}  // namespace hiseg
