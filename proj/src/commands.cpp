#include "hiseg/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "hiseg/image_io.hpp"

namespace hiseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void run_over_samples(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

void write_class_csv(const std::string& path, const ClassMetrics& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "class,iou,acc\n";
  for (std::size_t c = 0; c < m.iou.size(); ++c)
    os << c << "," << (m.iou_valid[c] ? fmt(m.iou[c]) : "nan") << ","
       << (m.acc_valid[c] ? fmt(m.acc[c]) : "nan") << "\n";
  os << "mean," << fmt(m.miou) << "," << fmt(m.macc) << "\n";
}

void write_drop_csv(const std::string& path, const ClassMetrics& clean, const ClassMetrics& occ) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "class,clean_iou,occluded_iou,iou_drop,clean_acc,occluded_acc,acc_drop\n";
  auto cell = [&](double v, bool valid) { return valid ? fmt(v) : std::string("nan"); };
  for (std::size_t c = 0; c < clean.iou.size(); ++c) {
    const bool iv = clean.iou_valid[c] && occ.iou_valid[c];
    const bool av = clean.acc_valid[c] && occ.acc_valid[c];
    os << c << "," << cell(clean.iou[c], clean.iou_valid[c]) << ","
       << cell(occ.iou[c], occ.iou_valid[c]) << ","
       << (iv ? fmt(clean.iou[c] - occ.iou[c]) : "nan") << ","
       << cell(clean.acc[c], clean.acc_valid[c]) << "," << cell(occ.acc[c], occ.acc_valid[c])
       << "," << (av ? fmt(clean.acc[c] - occ.acc[c]) : "nan") << "\n";
  }
  os << "mean," << fmt(clean.miou) << "," << fmt(occ.miou) << "," << fmt(clean.miou - occ.miou)
     << "," << fmt(clean.macc) << "," << fmt(occ.macc) << "," << fmt(clean.macc - occ.macc)
     << "\n";
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("train config: iterations must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (base_lr <= 0) throw std::invalid_argument("train config: base_lr must be > 0");
  if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (eval_interval < 1) throw std::invalid_argument("train config: eval_interval must be >= 1");
  if (task != "joint" && task != "part_only" && task != "object_only")
    throw std::invalid_argument("train config: task must be joint, part_only or object_only");
  if (threads < 0) throw std::invalid_argument("train config: threads must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  if (data_count < 1) throw std::invalid_argument("run config: data count must be >= 1");
  if (data.image_h != model.image_h || data.image_w != model.image_w)
    throw std::invalid_argument("run config: data image size must match model image size");
}

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  j["model"] = json::parse(model_config_to_json(rc.model));
  j["model"].erase("seed");  // governed by the top-level seed
  j["data"] = {{"min_objects", rc.data.min_objects},
               {"max_objects", rc.data.max_objects},
               {"color_jitter_std", rc.data.color_jitter_std},
               {"noise_std", rc.data.noise_std},
               {"occlusion", rc.data.occlusion},
               {"occlusion_min", rc.data.occlusion_min},
               {"occlusion_max", rc.data.occlusion_max},
               {"count", rc.data_count}};
  j["train"] = {{"iterations", rc.train.iterations},
                {"batch_size", rc.train.batch_size},
                {"base_lr", rc.train.base_lr},
                {"weight_decay", rc.train.weight_decay},
                {"eval_interval", rc.train.eval_interval},
                {"task", rc.train.task},
                {"threads", rc.train.threads}};
  j["seed"] = rc.seed;
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> top = {"model", "data", "train", "seed"};
    if (!top.count(it.key()))
      throw std::invalid_argument("config: unknown top-level key '" + it.key() + "'");
  }
  RunConfig rc;
  if (j.contains("seed")) rc.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("model")) {
    if (j["model"].contains("seed"))
      throw std::invalid_argument("config: set the top-level seed, not model.seed");
    rc.model = model_config_from_json(j["model"].dump());
  }
  rc.model.seed = rc.seed;
  if (j.contains("data")) {
    const json& d = j["data"];
    static const std::set<std::string> keys = {"min_objects",  "max_objects",  "color_jitter_std",
                                               "noise_std",    "occlusion",    "occlusion_min",
                                               "occlusion_max", "count"};
    for (auto it = d.begin(); it != d.end(); ++it)
      if (!keys.count(it.key()))
        throw std::invalid_argument("config: unknown data key '" + it.key() + "'");
    if (d.contains("min_objects")) rc.data.min_objects = d.at("min_objects").get<int>();
    if (d.contains("max_objects")) rc.data.max_objects = d.at("max_objects").get<int>();
    if (d.contains("color_jitter_std"))
      rc.data.color_jitter_std = d.at("color_jitter_std").get<double>();
    if (d.contains("noise_std")) rc.data.noise_std = d.at("noise_std").get<double>();
    if (d.contains("occlusion")) rc.data.occlusion = d.at("occlusion").get<bool>();
    if (d.contains("occlusion_min")) rc.data.occlusion_min = d.at("occlusion_min").get<double>();
    if (d.contains("occlusion_max")) rc.data.occlusion_max = d.at("occlusion_max").get<double>();
    if (d.contains("count")) rc.data_count = d.at("count").get<int>();
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    static const std::set<std::string> keys = {"iterations",    "batch_size", "base_lr",
                                               "weight_decay",  "eval_interval", "task",
                                               "threads"};
    for (auto it = t.begin(); it != t.end(); ++it)
      if (!keys.count(it.key()))
        throw std::invalid_argument("config: unknown train key '" + it.key() + "'");
    if (t.contains("iterations")) rc.train.iterations = t.at("iterations").get<int>();
    if (t.contains("batch_size")) rc.train.batch_size = t.at("batch_size").get<int>();
    if (t.contains("base_lr")) rc.train.base_lr = t.at("base_lr").get<double>();
    if (t.contains("weight_decay")) rc.train.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("eval_interval")) rc.train.eval_interval = t.at("eval_interval").get<int>();
    if (t.contains("task")) rc.train.task = t.at("task").get<std::string>();
    if (t.contains("threads")) rc.train.threads = t.at("threads").get<int>();
  }
  rc.data.image_h = rc.model.image_h;
  rc.data.image_w = rc.model.image_w;
  rc.data.seed = rc.seed;
  rc.validate();
  return rc;
}

RunConfig run_config_from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return run_config_from_json(ss.str());
}

int resolve_threads(int configured) {
  if (configured > 0) return configured;
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

std::vector<Sample> generate_dataset(const GenConfig& cfg, int count) {
  cfg.validate();
  const Rng base(cfg.seed);
  std::vector<Sample> samples(count);
  for (int i = 0; i < count; ++i) {
    Rng ri = base.split(static_cast<std::uint64_t>(i));
    samples[i] = gen_sample(ri, cfg);
  }
  return samples;
}

EvalResult evaluate_model(Model& m, const std::vector<Sample>& samples, UpsampleMode mode,
                          int threads) {
  const int n = static_cast<int>(samples.size());
  const int pc = m.cfg.num_parts + 1, oc = m.cfg.num_objects + 1;
  std::vector<ConfusionMatrix> part_cms(n, ConfusionMatrix(pc));
  std::vector<ConfusionMatrix> obj_cms(n, ConfusionMatrix(oc));
  std::vector<double> part_bf(n, 0.0), obj_bf(n, 0.0);

  ForwardHooks hooks;
  hooks.upsample = mode;
  run_over_samples(n, threads, [&](int i) {
    const Sample& s = samples[i];
    Tensor img = image_to_tensor(s.image.data(), s.h, s.w);
    ForwardOutput out = model_forward(m, img, nullptr, &hooks);
    const auto part_pred = argmax_map(out.part_logits);
    const auto obj_pred = argmax_map(out.obj_logits);
    confusion_update(part_cms[i], part_pred, s.part_map);
    confusion_update(obj_cms[i], obj_pred, s.obj_map);
    part_bf[i] = boundary_fscore(part_pred, s.part_map, s.h, s.w, 1);
    obj_bf[i] = boundary_fscore(obj_pred, s.obj_map, s.h, s.w, 1);
  });

  ConfusionMatrix part_cm(pc), obj_cm(oc);
  EvalResult r;
  for (int i = 0; i < n; ++i) {
    part_cm.merge(part_cms[i]);
    obj_cm.merge(obj_cms[i]);
    r.part_boundary_f += part_bf[i] / n;
    r.obj_boundary_f += obj_bf[i] / n;
  }
  r.part = miou_macc(part_cm);
  r.obj = miou_macc(obj_cm);
  return r;
}

std::vector<Sample> occlude_dataset(const std::vector<Sample>& samples, std::uint64_t seed,
                                    double min_cov, double max_cov,
                                    std::vector<double>* coverages) {
  const Rng base(seed ^ 0x9d5c6df3a7f10c55ULL);
  std::vector<Sample> out(samples.size());
  if (coverages) coverages->assign(samples.size(), 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng ri = base.split(i);
    OcclusionResult oc = apply_occlusion(samples[i], ri, min_cov, max_cov);
    out[i] = std::move(oc.sample);
    if (coverages) (*coverages)[i] = oc.covered_fraction;
  }
  return out;
}

// ---- gen ------------------------------------------------------------------

int cmd_gen(const RunConfig& rc, const std::string& out_path) {
  GenConfig g = rc.data;
  g.seed = rc.seed;
  auto samples = generate_dataset(g, rc.data_count);
  dataset_write(out_path, samples, rc.model.num_parts, rc.model.num_objects);

  std::vector<std::uint64_t> part_hist(rc.model.num_parts + 1, 0);
  std::vector<std::uint64_t> obj_hist(rc.model.num_objects + 1, 0);
  for (const Sample& s : samples) {
    for (auto v : s.part_map) part_hist[v]++;
    for (auto v : s.obj_map) obj_hist[v]++;
  }
  std::cout << "wrote " << samples.size() << " samples to " << out_path << "\n";
  std::cout << "part label histogram:";
  for (std::size_t k = 0; k < part_hist.size(); ++k) std::cout << " " << k << ":" << part_hist[k];
  std::cout << "\nobject label histogram:";
  for (std::size_t k = 0; k < obj_hist.size(); ++k) std::cout << " " << k << ":" << obj_hist[k];
  std::cout << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

namespace {

struct PreparedData {
  std::vector<Tensor> images;
  const std::vector<Sample>* samples;
};

PreparedData prepare(const std::vector<Sample>& samples) {
  PreparedData d;
  d.samples = &samples;
  d.images.reserve(samples.size());
  for (const Sample& s : samples) d.images.push_back(image_to_tensor(s.image.data(), s.h, s.w));
  return d;
}

void task_weights(const std::string& task, double lambda, double* part_w, double* obj_w) {
  if (task == "part_only") {
    *part_w = 1.0;
    *obj_w = 0.0;
  } else if (task == "object_only") {
    *part_w = 0.0;
    *obj_w = 1.0;
  } else {
    *part_w = 1.0;
    *obj_w = lambda;
  }
}

}  // namespace

int cmd_train(const RunConfig& rc, const std::string& train_path, const std::string& val_path,
              const std::string& out_dir, TrainArtifacts* artifacts) {
  rc.validate();
  fs::create_directories(out_dir);
  {
    std::ofstream os(out_dir + "/config.json");
    os << run_config_to_json(rc);
  }

  int p = 0, o = 0;
  auto train_set = dataset_read(train_path, &p, &o);
  auto val_set = dataset_read(val_path);
  if (train_set.empty()) throw std::invalid_argument("cmd_train: empty training set");
  if (p != rc.model.num_parts || o != rc.model.num_objects)
    throw std::invalid_argument("cmd_train: dataset classes " + std::to_string(p) + "/" +
                                std::to_string(o) + " do not match model config");
  if (train_set[0].h != rc.model.image_h || train_set[0].w != rc.model.image_w)
    throw std::invalid_argument("cmd_train: dataset image size does not match model config");

  auto model = model_build(rc.model);
  std::cout << "model parameters: " << model->param_count() << "\n";

  AdamWState opt = AdamWState::init(*model);
  opt.weight_decay = rc.train.weight_decay;

  double part_w = 1.0, obj_w = 1.0;
  task_weights(rc.train.task, rc.model.loss_lambda, &part_w, &obj_w);
  const int threads = resolve_threads(rc.train.threads);

  PreparedData train_data = prepare(train_set);
  Rng batch_rng(rc.seed ^ 0xb5297a4d3f8c6e21ULL);

  std::ofstream curve(out_dir + "/metrics.csv");
  curve << "iter,lr,loss,part_miou,obj_miou\n";

  const int total = rc.train.iterations;
  double last_lr = -1.0;
  for (int iter = 0; iter < total; ++iter) {
    opt.lr = lr_at(iter, total, rc.train.base_lr);

    std::vector<TrainBatchSample> batch;
    for (int b = 0; b < rc.train.batch_size; ++b) {
      const int idx = static_cast<int>(batch_rng.range(0, static_cast<int>(train_set.size()) - 1));
      batch.push_back(TrainBatchSample{train_data.images[idx], &train_set[idx].part_map,
                                       &train_set[idx].obj_map});
    }
    StepStats st = train_step(*model, opt, batch, part_w, obj_w, threads);

    const bool lr_changed = opt.lr != last_lr;
    last_lr = opt.lr;
    const bool interval = iter % rc.train.eval_interval == 0 || iter == total - 1;
    if (interval || lr_changed) {
      EvalResult ev = evaluate_model(*model, val_set, UpsampleMode::kAssoc, threads);
      curve << iter << "," << fmt(opt.lr) << "," << fmt(st.loss) << "," << fmt(ev.part.miou)
            << "," << fmt(ev.obj.miou) << "\n";
      curve.flush();
      std::cout << "iter " << iter << " lr " << fmt(opt.lr) << " loss " << fmt(st.loss)
                << " part_miou " << fmt(ev.part.miou) << " obj_miou " << fmt(ev.obj.miou) << "\n";
      if (artifacts && iter == total - 1) {
        artifacts->final_part_miou = ev.part.miou;
        artifacts->final_obj_miou = ev.obj.miou;
      }
    }
  }

  EvalResult final_ev = evaluate_model(*model, val_set, UpsampleMode::kAssoc, threads);
  write_class_csv(out_dir + "/final_part.csv", final_ev.part);
  write_class_csv(out_dir + "/final_obj.csv", final_ev.obj);

  const std::string ckpt = out_dir + "/checkpoint.bin";
  checkpoint_save(ckpt, *model, model_config_to_json(rc.model));
  if (artifacts) {
    artifacts->checkpoint_path = ckpt;
    artifacts->final_part_miou = final_ev.part.miou;
    artifacts->final_obj_miou = final_ev.obj.miou;
  }
  std::cout << "final part_miou " << fmt(final_ev.part.miou) << " obj_miou "
            << fmt(final_ev.obj.miou) << "\n";
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const EvalOptions& opts,
             const std::string& out_dir) {
  if (opts.upsample != "assoc" && opts.upsample != "bilinear")
    throw std::invalid_argument("cmd_eval: --upsample must be assoc or bilinear");
  fs::create_directories(out_dir);
  LoadedCheckpoint lc = checkpoint_load(checkpoint);
  auto samples = dataset_read(dataset);
  if (samples.empty()) throw std::invalid_argument("cmd_eval: empty dataset");
  const UpsampleMode mode =
      opts.upsample == "bilinear" ? UpsampleMode::kBilinear : UpsampleMode::kAssoc;
  const int threads = resolve_threads(opts.threads);

  EvalResult clean = evaluate_model(*lc.model, samples, mode, threads);
  write_class_csv(out_dir + "/eval_part.csv", clean.part);
  write_class_csv(out_dir + "/eval_obj.csv", clean.obj);

  std::ofstream summary(out_dir + "/summary.csv");
  summary << "key,value\n";
  summary << "upsample," << opts.upsample << "\n";
  summary << "part_miou," << fmt(clean.part.miou) << "\n";
  summary << "part_macc," << fmt(clean.part.macc) << "\n";
  summary << "obj_miou," << fmt(clean.obj.miou) << "\n";
  summary << "obj_macc," << fmt(clean.obj.macc) << "\n";
  summary << "part_boundary_f," << fmt(clean.part_boundary_f) << "\n";
  summary << "obj_boundary_f," << fmt(clean.obj_boundary_f) << "\n";

  std::cout << "part_miou " << fmt(clean.part.miou) << " obj_miou " << fmt(clean.obj.miou)
            << " part_bf " << fmt(clean.part_boundary_f) << " obj_bf "
            << fmt(clean.obj_boundary_f) << "\n";

  if (opts.occlude) {
    std::vector<double> coverages;
    auto occluded = occlude_dataset(samples, opts.seed, 0.2, 0.4, &coverages);
    EvalResult occ = evaluate_model(*lc.model, occluded, mode, threads);
    write_drop_csv(out_dir + "/eval_part_occluded.csv", clean.part, occ.part);
    write_drop_csv(out_dir + "/eval_obj_occluded.csv", clean.obj, occ.obj);
    std::ofstream cov(out_dir + "/occlusion_coverage.csv");
    cov << "sample,covered_fraction\n";
    for (std::size_t i = 0; i < coverages.size(); ++i)
      cov << i << "," << fmt(coverages[i]) << "\n";
    summary << "part_miou_occluded," << fmt(occ.part.miou) << "\n";
    summary << "part_miou_drop," << fmt(clean.part.miou - occ.part.miou) << "\n";
    summary << "obj_miou_occluded," << fmt(occ.obj.miou) << "\n";
    summary << "obj_miou_drop," << fmt(clean.obj.miou - occ.obj.miou) << "\n";
    std::cout << "occluded part_miou " << fmt(occ.part.miou) << " (drop "
              << fmt(clean.part.miou - occ.part.miou) << "), obj_miou " << fmt(occ.obj.miou)
              << " (drop " << fmt(clean.obj.miou - occ.obj.miou) << ")\n";
  }
  return 0;
}

// ---- emerge ------------------------------------------------------------------

namespace {

// Image-resolution binary masks, one per unit id, from a pixel-grid id map.
std::vector<std::vector<std::uint8_t>> unit_masks_from_ids(const std::vector<int>& ids, int n_units,
                                                           int grid_h, int grid_w, int factor) {
  const auto up = upscale_ids(ids, grid_h, grid_w, factor);
  std::vector<std::vector<std::uint8_t>> masks(
      n_units, std::vector<std::uint8_t>(up.size(), 0));
  for (std::size_t i = 0; i < up.size(); ++i) masks[up[i]][i] = 1;
  return masks;
}

}  // namespace

int cmd_emerge(const RunConfig& rc, const std::string& train_path, const std::string& probe_path,
               const EmergeOptions& opts, const std::string& out_dir) {
  if (opts.level != "superpixel" && opts.level != "group")
    throw std::invalid_argument("cmd_emerge: --level must be superpixel or group");
  if (opts.topk < 1) throw std::invalid_argument("cmd_emerge: --topk must be >= 1");
  fs::create_directories(out_dir);

  std::unique_ptr<Model> model;
  if (!opts.checkpoint.empty()) {
    model = checkpoint_load(opts.checkpoint).model;
  } else {
    // superpixels are probed under object-only supervision and groups
    // under part-only supervision
    RunConfig tc = rc;
    tc.train.task = opts.level == "superpixel" ? "object_only" : "part_only";
    TrainArtifacts art;
    const int rcode = cmd_train(tc, train_path, probe_path, out_dir + "/train", &art);
    if (rcode != 0) return rcode;
    model = checkpoint_load(art.checkpoint_path).model;
  }

  auto probe = dataset_read(probe_path);
  if (probe.empty()) throw std::invalid_argument("cmd_emerge: empty probe dataset");
  const ModelConfig& mc = model->cfg;
  const int s_n = mc.sp_h() * mc.sp_w();
  const int g_n = mc.group_n();
  const int n_units = opts.level == "superpixel" ? s_n : g_n;
  if (n_units > 255)
    throw std::invalid_argument("cmd_emerge: more than 255 unit ids cannot be written as PGM");
  const int n_classes = (opts.level == "superpixel" ? mc.num_parts : mc.num_objects) + 1;

  // per class, per k: sum of IoUs and sample counts
  std::vector<std::vector<double>> iou_sum(n_classes, std::vector<double>(opts.topk, 0.0));
  std::vector<int> class_n(n_classes, 0);

  const int threads = resolve_threads(0);
  const int n = static_cast<int>(probe.size());
  std::vector<std::vector<std::optional<double>>> per_sample(
      n, std::vector<std::optional<double>>(0));
  std::vector<std::vector<int>> sample_ids(n);

  run_over_samples(n, threads, [&](int i) {
    const Sample& s = probe[i];
    ForwardOutput out = model_forward(*model, image_to_tensor(s.image.data(), s.h, s.w), nullptr);
    std::vector<int> ids = argmax_assignment(out.assoc_pix_sp);
    if (opts.level == "group") {
      const std::vector<int> sp2g = argmax_assignment(out.assoc_sp_group);
      for (int& id : ids) id = sp2g[id];
    }
    sample_ids[i] = ids;
    const auto masks =
        unit_masks_from_ids(ids, n_units, mc.pixel_h(), mc.pixel_w(), mc.stem_stride);
    const auto& gt = opts.level == "superpixel" ? s.part_map : s.obj_map;
    std::vector<std::optional<double>> row;
    for (int cls = 1; cls < n_classes; ++cls)
      for (int k = 1; k <= opts.topk; ++k)
        row.push_back(oracle_topk_iou(masks, gt, static_cast<std::uint8_t>(cls), k));
    per_sample[i] = std::move(row);
  });

  for (int i = 0; i < n; ++i) {
    std::size_t rix = 0;
    for (int cls = 1; cls < n_classes; ++cls) {
      bool present = false;
      for (int k = 1; k <= opts.topk; ++k, ++rix) {
        if (per_sample[i][rix]) {
          iou_sum[cls][k - 1] += *per_sample[i][rix];
          present = true;
        }
      }
      if (present) class_n[cls]++;
    }
  }

  std::ofstream curve(out_dir + "/emerge_" + opts.level + "_curve.csv");
  curve << "class,k,iou\n";
  std::ofstream top(out_dir + "/emerge_" + opts.level + ".csv");
  top << "class,topk_iou,samples\n";
  double macro = 0.0;
  int macro_n = 0;
  for (int cls = 1; cls < n_classes; ++cls) {
    if (!class_n[cls]) continue;
    for (int k = 1; k <= opts.topk; ++k)
      curve << cls << "," << k << "," << fmt(iou_sum[cls][k - 1] / class_n[cls]) << "\n";
    const double v = iou_sum[cls][opts.topk - 1] / class_n[cls];
    top << cls << "," << fmt(v) << "," << class_n[cls] << "\n";
    macro += v;
    ++macro_n;
  }
  const double macro_iou = macro_n ? macro / macro_n : 0.0;
  top << "mean," << fmt(macro_iou) << "," << macro_n << "\n";
  std::cout << "emerge " << opts.level << " top-" << opts.topk << " mean IoU " << fmt(macro_iou)
            << "\n";

  for (int i = 0; i < std::min(n, opts.dump_samples); ++i) {
    const Sample& s = probe[i];
    const auto up =
        upscale_ids(sample_ids[i], mc.pixel_h(), mc.pixel_w(), mc.stem_stride);
    std::vector<std::uint8_t> id_gray(up.size());
    for (std::size_t j = 0; j < up.size(); ++j) id_gray[j] = static_cast<std::uint8_t>(up[j]);
    write_pgm(out_dir + "/ids_" + std::to_string(i) + ".pgm", id_gray, s.h, s.w);
    write_ppm(out_dir + "/overlay_" + std::to_string(i) + ".ppm",
              overlay_ids(s.image, up, s.h, s.w), s.h, s.w);
  }
  return 0;
}

// ---- dump ------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> label_ppm_at_image_res(const std::vector<std::uint8_t>& labels, int h,
                                                 int w, int img_h) {
  std::vector<int> ids(labels.begin(), labels.end());
  // nearest upscale to image resolution (dims must divide evenly)
  const int fy = img_h / h;
  std::vector<int> up = upscale_ids(ids, h, w, fy);
  std::vector<std::uint8_t> lbl(up.size());
  for (std::size_t i = 0; i < up.size(); ++i) lbl[i] = static_cast<std::uint8_t>(up[i]);
  return colorize_labels(lbl);
}

}  // namespace

int cmd_dump(const std::string& checkpoint, const std::string& dataset, int index,
             const std::string& out_dir) {
  fs::create_directories(out_dir);
  LoadedCheckpoint lc = checkpoint_load(checkpoint);
  auto samples = dataset_read(dataset);
  if (index < 0 || index >= static_cast<int>(samples.size()))
    throw std::invalid_argument("cmd_dump: sample index " + std::to_string(index) +
                                " outside dataset of " + std::to_string(samples.size()));
  const Sample& s = samples[index];
  Model& m = *lc.model;
  const ModelConfig& mc = m.cfg;

  ForwardOutput out = model_forward(m, image_to_tensor(s.image.data(), s.h, s.w), nullptr);

  write_ppm(out_dir + "/input.ppm", s.image, s.h, s.w);
  write_ppm(out_dir + "/gt_part.ppm", colorize_labels(s.part_map), s.h, s.w);
  write_ppm(out_dir + "/gt_obj.ppm", colorize_labels(s.obj_map), s.h, s.w);
  write_ppm(out_dir + "/pred_part.ppm", colorize_labels(argmax_map(out.part_logits)), s.h, s.w);
  write_ppm(out_dir + "/pred_obj.ppm", colorize_labels(argmax_map(out.obj_logits)), s.h, s.w);

  // associations: per-pixel argmax ids and max weight at image resolution
  const auto ids = argmax_assignment(out.assoc_pix_sp);
  const auto up = upscale_ids(ids, mc.pixel_h(), mc.pixel_w(), mc.stem_stride);
  std::vector<std::uint8_t> id_gray(up.size());
  for (std::size_t j = 0; j < up.size(); ++j)
    id_gray[j] = static_cast<std::uint8_t>(std::min(up[j], 255));
  write_pgm(out_dir + "/assoc_pix_sp_argmax.pgm", id_gray, s.h, s.w);

  const CandidateMap& cm = m.cmap;
  std::vector<std::uint8_t> max_w(cm.n_pixels(), 0);
  for (int px = 0; px < cm.n_pixels(); ++px) {
    double best = 0.0;
    for (int j = cm.px_offset[px]; j < cm.px_offset[px + 1]; ++j)
      best = std::max(best, out.assoc_pix_sp.weights.data[cm.px_pair[j]]);
    max_w[px] = static_cast<std::uint8_t>(std::lround(best * 255.0));
  }
  std::vector<int> max_ids(max_w.begin(), max_w.end());
  const auto max_up = upscale_ids(max_ids, mc.pixel_h(), mc.pixel_w(), mc.stem_stride);
  std::vector<std::uint8_t> max_gray(max_up.size());
  for (std::size_t j = 0; j < max_up.size(); ++j) max_gray[j] = static_cast<std::uint8_t>(max_up[j]);
  write_pgm(out_dir + "/assoc_pix_sp_max.pgm", max_gray, s.h, s.w);

  // one heatmap per group over the superpixel grid
  const int s_h = mc.sp_h(), s_w = mc.sp_w();
  for (int g = 0; g < mc.group_n(); ++g) {
    std::vector<int> heat(s_h * s_w);
    for (int sp = 0; sp < s_h * s_w; ++sp)
      heat[sp] = static_cast<int>(std::lround(out.assoc_sp_group.weights(sp, g) * 255.0));
    const auto heat_up = upscale_ids(heat, s_h, s_w, mc.image_h / s_h);
    std::vector<std::uint8_t> gray(heat_up.size());
    for (std::size_t j = 0; j < heat_up.size(); ++j) gray[j] = static_cast<std::uint8_t>(heat_up[j]);
    write_pgm(out_dir + "/assoc_sp_group_g" + std::to_string(g) + ".pgm", gray, s.h, s.w);
  }

  // coarse-to-fine object restoration chain and the part chain
  const int g_axis = static_cast<int>(std::lround(std::sqrt(mc.group_ratio)));
  write_ppm(out_dir + "/chain_obj_group.ppm",
            label_ppm_at_image_res(argmax_map(reshape(out.obj_group_logits,
                                                      {s_h / g_axis, s_w / g_axis,
                                                       mc.num_objects + 1})),
                                   s_h / g_axis, s_w / g_axis, s.h),
            s.h, s.w);
  write_ppm(out_dir + "/chain_obj_sp.ppm",
            label_ppm_at_image_res(argmax_map(out.obj_sp_logits), s_h, s_w, s.h), s.h, s.w);
  write_ppm(out_dir + "/chain_obj_pix.ppm",
            label_ppm_at_image_res(argmax_map(out.obj_pix_logits), mc.pixel_h(), mc.pixel_w(),
                                   s.h),
            s.h, s.w);
  write_ppm(out_dir + "/chain_obj_image.ppm", colorize_labels(argmax_map(out.obj_logits)), s.h,
            s.w);
  write_ppm(out_dir + "/chain_part_sp.ppm",
            label_ppm_at_image_res(argmax_map(out.part_sp_logits), s_h, s_w, s.h), s.h, s.w);
  write_ppm(out_dir + "/chain_part_pix.ppm",
            label_ppm_at_image_res(argmax_map(out.part_pix_logits), mc.pixel_h(), mc.pixel_w(),
                                   s.h),
            s.h, s.w);
  write_ppm(out_dir + "/chain_part_image.ppm", colorize_labels(argmax_map(out.part_logits)), s.h,
            s.w);

  std::cout << "dumped sample " << index << " to " << out_dir << "\n";
  return 0;
}

}  // namespace hiseg
