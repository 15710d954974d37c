// Acceptance suite: runs every criterion end to end against the desk-scale
// configuration and prints one PASS/FAIL line per criterion. Soft criteria
// print FLAGGED instead of failing the process. Exit code is nonzero when
// any hard criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hiseg/commands.hpp"
#include "hiseg/evalkit.hpp"
#include "hiseg/image_io.hpp"
#include "hiseg/model.hpp"

using namespace hiseg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail, bool soft = false) {
  const char* tag = pass ? "PASS" : (soft ? "FLAGGED" : "FAIL");
  std::printf("[%s] criterion %d: %s\n", tag, criterion, detail.c_str());
  std::fflush(stdout);
  if (!pass && !soft) ++g_failures;
}

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

Tensor rand_t(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---- criterion 1: gradient suite -----------------------------------------

bool gradient_suite(std::string* detail) {
  const double t0 = now_s();
  double worst_prim = 0.0, worst_block = 0.0;
  Rng rng(101);

  // primitive ops at 1e-4
  {
    Tensor x = rand_t({4, 6}, rng);
    Tensor w = rand_t({6, 3}, rng);
    Tensor g6 = rand_t({6}, rng, 0.5, 1.5), b6 = rand_t({6}, rng);
    Tensor c46 = rand_t({4, 6}, rng), c43 = rand_t({4, 3}, rng);
    worst_prim = std::max(worst_prim, finite_diff_gradcheck([&](Graph&, const Tensor& t) {
      return sum(mul(matmul(t, w), c43));
    }, x, 1e-5));
    worst_prim = std::max(worst_prim, finite_diff_gradcheck([&](Graph&, const Tensor& t) {
      return sum(mul(softmax(t, -1), c46));
    }, x, 1e-5));
    worst_prim = std::max(worst_prim, finite_diff_gradcheck([&](Graph&, const Tensor& t) {
      return sum(mul(layer_norm(t, g6, b6), c46));
    }, x, 1e-5));
    worst_prim = std::max(worst_prim, finite_diff_gradcheck([&](Graph&, const Tensor& t) {
      return sum(mul(gelu(t), c46));
    }, x, 1e-5));
    if (worst_prim > 1e-4) {
      *detail = "primitive op gradcheck error " + fmt2(worst_prim);
      return false;
    }
  }

  // blocks at 1e-3
  {
    Rng brng(103);
    LinearParams lin_p = LinearParams::init("lin", 4, 3, brng);
    Tensor x = rand_t({3, 4}, brng), probe = rand_t({3, 3}, brng);
    std::vector<Parameter*> ps;
    lin_p.collect(ps);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      return sum(mul(linear(g.leaf(x), lin_p), g.leaf(probe)));
    }, ps, 1e-5));

    FfnParams ffn_p = FfnParams::init("ffn", 4, 2, brng);
    ps.clear();
    ffn_p.collect(ps);
    Tensor probe4 = rand_t({3, 4}, brng);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      return sum(mul(ffn(g.leaf(x), ffn_p), g.leaf(probe4)));
    }, ps, 1e-5));

    MhsaParams mhsa_p = MhsaParams::init("mhsa", 4, 4, 2, brng);
    ps.clear();
    mhsa_p.collect(ps);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      return sum(mul(mhsa(g.leaf(x), mhsa_p), g.leaf(probe4)));
    }, ps, 1e-5, 6, 7));

    ViTBlockParams vit_p = ViTBlockParams::init("vit", 4, 2, 2, brng);
    for (Parameter* p : std::vector<Parameter*>{&vit_p.ls1.gamma, &vit_p.ls2.gamma})
      std::fill(p->value.data.begin(), p->value.data.end(), 0.05);
    ps.clear();
    vit_p.collect(ps);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      return sum(mul(vit_block(g.leaf(x), vit_p), g.leaf(probe4)));
    }, ps, 1e-5, 6, 7));

    CandidateMap cm = build_candidate_map(8, 8);
    ScaParams sca_p = ScaParams::init("sca", 4, 3, 2, brng);
    Tensor s = rand_t({2, 2, 4}, brng), pix = rand_t({8, 8, 3}, brng);
    Tensor sprobe = rand_t({2, 2, 4}, brng);
    ps.clear();
    sca_p.collect(ps);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      return sum(mul(sca_block(g.leaf(s), g.leaf(pix), cm, sca_p).s_out, g.leaf(sprobe)));
    }, ps, 1e-5, 4, 7));

    GcaParams gca_p = GcaParams::init("gca", 4, 2, 2, brng);
    Tensor gt = rand_t({2, 4}, brng), st = rand_t({2, 4, 4}, brng);
    Tensor pg = rand_t({2, 4}, brng), psx = rand_t({2, 4, 4}, brng);
    ps.clear();
    gca_p.collect(ps);
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      GcaResult r = gca_stage(g.leaf(gt), g.leaf(st), gca_p);
      return add(sum(mul(r.g_out, g.leaf(pg))), sum(mul(r.s_out, g.leaf(psx))));
    }, ps, 1e-5, 3, 7));

    // full model at 16x16
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 16;
    cfg.stem_stride = 2;
    cfg.stem_channels = 6;
    cfg.sp_channels = 8;
    cfg.trunk_depth = 2;
    cfg.sca_before = {0};
    cfg.branch_depth = 1;
    cfg.gca_stages = 1;
    cfg.sca_heads = 2;
    cfg.vit_heads = 2;
    cfg.gca_heads = 2;
    cfg.ffn_ratio = 2;
    cfg.group_ratio = 4;
    cfg.num_parts = 2;
    cfg.num_objects = 1;
    cfg.seed = 7;
    auto model = model_build(cfg);
    for (Parameter* p : model->parameters())
      if (p->name.find(".ls") != std::string::npos)
        std::fill(p->value.data.begin(), p->value.data.end(), 0.05);
    Rng drng(11);
    Tensor img = rand_t({16, 16, 3}, drng, -0.5, 0.5);
    std::vector<std::uint8_t> part_gt(256), obj_gt(256);
    for (auto& v : part_gt) v = static_cast<std::uint8_t>(drng.range(0, 2));
    for (auto& v : obj_gt) v = static_cast<std::uint8_t>(drng.range(0, 1));
    worst_block = std::max(worst_block, param_gradcheck([&](Graph& g) {
      ForwardOutput out = model_forward(*model, img, &g);
      return joint_loss(out, part_gt, obj_gt, 1.0);
    }, model->parameters(), 1e-5, 2, 13));
  }

  const double elapsed = now_s() - t0;
  *detail = "max primitive err " + fmt2(worst_prim) + ", max block err " + fmt2(worst_block) +
            ", runtime " + fmt2(elapsed) + "s";
  return worst_prim <= 1e-4 && worst_block <= 1e-3 && elapsed < 180.0;
}

// ---- criterion 2/3: association invariants and oracle equivalences --------

bool association_invariants(std::string* detail) {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 32;
  cfg.stem_channels = 12;
  cfg.sp_channels = 12;
  cfg.trunk_depth = 2;
  cfg.sca_before = {0, 1};
  cfg.branch_depth = 2;
  cfg.gca_stages = 2;
  cfg.vit_heads = 3;
  cfg.gca_heads = 3;
  cfg.ffn_ratio = 2;
  cfg.seed = 5;
  auto m = model_build(cfg);
  Rng rng(55);
  double worst_row = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor img = rand_t({32, 32, 3}, rng, -0.5, 0.5);
    ForwardOutput out = model_forward(*m, img, nullptr);
    const CandidateMap& cm = m->cmap;
    std::vector<double> sums(cm.n_pixels(), 0.0);
    for (int j = 0; j < cm.n_pairs(); ++j) {
      if (out.assoc_pix_sp.weights.data[j] < 0.0) {
        *detail = "negative pixel association weight";
        return false;
      }
      sums[(*cm.pair_px)[j]] += out.assoc_pix_sp.weights.data[j];
    }
    for (double s : sums) worst_row = std::max(worst_row, std::fabs(s - 1.0));
    for (int i = 0; i < out.assoc_sp_group.weights.shape[0]; ++i) {
      double s = 0.0;
      for (int g = 0; g < out.assoc_sp_group.weights.shape[1]; ++g) {
        if (out.assoc_sp_group.weights(i, g) < 0.0) {
          *detail = "negative group association weight";
          return false;
        }
        s += out.assoc_sp_group.weights(i, g);
      }
      worst_row = std::max(worst_row, std::fabs(s - 1.0));
    }
    // range preservation through both upsampling steps, per channel
    for (int c = 0; c < cfg.num_objects + 1; ++c) {
      double lo = 1e300, hi = -1e300;
      for (int g = 0; g < cfg.group_n(); ++g) {
        lo = std::min(lo, out.obj_group_logits(g, c));
        hi = std::max(hi, out.obj_group_logits(g, c));
      }
      for (int i = 0; i < cfg.pixel_h() * cfg.pixel_w(); ++i) {
        const double v = out.obj_pix_logits.data[i * (cfg.num_objects + 1) + c];
        if (v < lo - 1e-9 || v > hi + 1e-9) {
          *detail = "upsampled object logit escapes the source range";
          return false;
        }
      }
    }
  }
  *detail = "100 forwards, worst row-sum deviation " + fmt2(worst_row);
  return worst_row <= 1e-9;
}

bool oracle_equivalences(std::string* detail) {
  Rng rng(66);
  // one-hot association upsampling equals gathers, exactly
  CandidateMap cm = build_candidate_map(16, 16);
  AssocPixSp onehot = onehot_parent_pix_sp(cm);
  Tensor sp_vals = rand_t({4, 4, 5}, rng);
  Tensor up = upsample_sp_to_pix(sp_vals, onehot);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 5; ++c)
        if (up(y, x, c) != sp_vals(y / 4, x / 4, c)) {
          *detail = "one-hot pixel upsampling is not an exact gather";
          return false;
        }
  AssocSpGroup oneg = onehot_parent_sp_group(4, 4);
  Tensor groups = rand_t({1, 5}, rng);
  Tensor gup = upsample_group_to_sp(groups, oneg);
  for (int i = 0; i < 16; ++i)
    for (int c = 0; c < 5; ++c)
      if (gup.data[i * 5 + c] != groups(0, c)) {
        *detail = "one-hot group upsampling is not an exact gather";
        return false;
      }

  // zero q/k SCA equals residual + neighborhood mean of projected values
  ScaParams sca_p = ScaParams::init("sca", 4, 3, 2, rng);
  for (auto& h : sca_p.heads) {
    std::fill(h.q.W.value.data.begin(), h.q.W.value.data.end(), 0.0);
    std::fill(h.q.b.value.data.begin(), h.q.b.value.data.end(), 0.0);
    std::fill(h.k.W.value.data.begin(), h.k.W.value.data.end(), 0.0);
    std::fill(h.k.b.value.data.begin(), h.k.b.value.data.end(), 0.0);
  }
  Tensor s = rand_t({4, 4, 4}, rng);
  Tensor pix = rand_t({16, 16, 3}, rng);
  ScaResult r = sca_block(s, pix, cm, sca_p);
  Tensor i_ln = layer_norm(reshape(pix, {256, 3}), sca_p.ln_i.gamma.value, sca_p.ln_i.beta.value);
  std::vector<std::vector<int>> hood(16);
  for (int j = 0; j < cm.n_pairs(); ++j) hood[(*cm.pair_sp)[j]].push_back((*cm.pair_px)[j]);
  double worst = 0.0;
  for (int sp = 0; sp < 16; ++sp) {
    int col = 0;
    for (auto& h : sca_p.heads) {
      Tensor v = linear(i_ln, h.v);
      for (int d = 0; d < 2; ++d, ++col) {
        double mean = 0.0;
        for (int px : hood[sp]) mean += v(px, d) / hood[sp].size();
        worst = std::max(worst, std::fabs(r.s_out.data[sp * 4 + col] -
                                          (s.data[sp * 4 + col] + mean)));
      }
    }
  }
  if (worst > 1e-10) {
    *detail = "zero q/k SCA deviates from the mean-pool oracle by " + fmt2(worst);
    return false;
  }

  // sparse pixel product equals dense materialized matmul
  Tensor logits = rand_t({2, cm.n_pairs()}, rng, -2, 2);
  AssocPixSp aps = pix_sp_assoc(logits, cm);
  Tensor vals = rand_t({4, 4, 3}, rng);
  Tensor sparse = upsample_sp_to_pix(vals, aps);
  Tensor dense = Tensor::zeros({256, 16});
  for (int j = 0; j < cm.n_pairs(); ++j)
    dense((*cm.pair_px)[j], (*cm.pair_sp)[j]) = aps.weights.data[j];
  Tensor oracle = matmul(dense, reshape(vals, {16, 3}));
  double worst2 = 0.0;
  for (std::size_t i = 0; i < sparse.data.size(); ++i)
    worst2 = std::max(worst2, std::fabs(sparse.data[i] - oracle.data[i]));
  if (worst2 > 1e-12) {
    *detail = "sparse association product deviates from dense matmul by " + fmt2(worst2);
    return false;
  }
  *detail = "gather, mean-pool and dense-matmul oracles all matched";
  return true;
}

}  // namespace

int main() {
  const std::string work = (fs::temp_directory_path() / "hiseg_acceptance").string();
  fs::remove_all(work);
  fs::create_directories(work);

  std::string detail;

  // 1. gradient suite
  report(1, gradient_suite(&detail), "gradient suite: " + detail);

  // 2. association invariants over random forwards
  report(2, association_invariants(&detail), "association invariants: " + detail);

  // 3. oracle equivalences
  report(3, oracle_equivalences(&detail), "oracle equivalences: " + detail);

  // shared run config for the training criteria (the desk default)
  RunConfig rc;
  rc.seed = 2024;
  rc.model.seed = rc.seed;
  rc.data.seed = rc.seed;
  rc.data_count = 512;
  rc.train.iterations = 2000;
  rc.train.batch_size = 8;
  rc.train.base_lr = 2e-4;
  rc.train.eval_interval = 200;
  rc.train.threads = 0;

  const std::string train_path = work + "/train.bin";
  const std::string val_path = work + "/val.bin";
  {
    RunConfig gen_rc = rc;
    cmd_gen(gen_rc, train_path);
    RunConfig val_rc = rc;
    val_rc.seed = 4096;
    val_rc.model.seed = val_rc.seed;
    val_rc.data.seed = val_rc.seed;
    val_rc.data_count = 200;
    cmd_gen(val_rc, val_path);
  }

  // 4. convergence of the default desk config. The 20-minute budget is
  // stated for a 4-core desktop; on smaller machines it scales by 4/cores.
  TrainArtifacts joint;
  {
    const double t0 = now_s();
    cmd_train(rc, train_path, val_path, work + "/joint", &joint);
    const double mins = (now_s() - t0) / 60.0;
    const int hw = resolve_threads(0);
    const double budget = 20.0 * std::max(1.0, 4.0 / hw);
    const bool pass = joint.final_obj_miou >= 0.85 && joint.final_part_miou >= 0.70 &&
                      mins <= budget;
    report(4, pass,
           "convergence: part mIoU " + fmt2(joint.final_part_miou) + " (>= 0.70), obj mIoU " +
               fmt2(joint.final_obj_miou) + " (>= 0.85), wall " + fmt2(mins) + " min (budget " +
               fmt2(budget) + " min at " + std::to_string(hw) + " cores)");
  }

  // 5. bilinear ablation mirror on the same checkpoint
  {
    LoadedCheckpoint lc = checkpoint_load(joint.checkpoint_path);
    auto val_set = dataset_read(val_path);
    const int threads = resolve_threads(0);
    EvalResult assoc = evaluate_model(*lc.model, val_set, UpsampleMode::kAssoc, threads);
    EvalResult bilin = evaluate_model(*lc.model, val_set, UpsampleMode::kBilinear, threads);
    const bool obj_lower = bilin.obj.miou < assoc.obj.miou;
    const bool bf_lower = bilin.obj_boundary_f < assoc.obj_boundary_f;
    const bool part_ok = bilin.part.miou <= assoc.part.miou + 0.01;
    report(5, obj_lower && bf_lower && part_ok,
           "bilinear ablation: obj mIoU " + fmt2(bilin.obj.miou) + " < " + fmt2(assoc.obj.miou) +
               " " + (obj_lower ? "ok" : "VIOLATED") + "; obj boundary F " +
               fmt2(bilin.obj_boundary_f) + " < " + fmt2(assoc.obj_boundary_f) + " " +
               (bf_lower ? "ok" : "VIOLATED") + "; part mIoU " + fmt2(bilin.part.miou) +
               " <= " + fmt2(assoc.part.miou) + "+0.01 " + (part_ok ? "ok" : "VIOLATED"));
  }

  // 6. occlusion protocol
  {
    EvalOptions opts;
    opts.occlude = true;
    opts.seed = 17;
    const int rc_code = cmd_eval(joint.checkpoint_path, val_path, opts, work + "/eval_occ");
    bool cov_ok = rc_code == 0;
    double cov_lo = 1.0, cov_hi = 0.0;
    int rows = 0;
    std::ifstream cov(work + "/eval_occ/occlusion_coverage.csv");
    std::string line;
    std::getline(cov, line);
    while (std::getline(cov, line)) {
      const double c = std::stod(line.substr(line.find(',') + 1));
      cov_lo = std::min(cov_lo, c);
      cov_hi = std::max(cov_hi, c);
      if (c < 0.18 || c > 0.42) cov_ok = false;
      ++rows;
    }
    if (rows != 200) cov_ok = false;
    std::map<std::string, std::string> summary;
    {
      std::ifstream is(work + "/eval_occ/summary.csv");
      std::getline(is, line);
      while (std::getline(is, line)) {
        const auto comma = line.find(',');
        summary[line.substr(0, comma)] = line.substr(comma + 1);
      }
    }
    const bool drops_present =
        summary.count("part_miou_drop") == 1 && summary.count("obj_miou_drop") == 1;
    report(6, cov_ok && drops_present,
           "occlusion: coverage in [" + fmt2(cov_lo) + ", " + fmt2(cov_hi) + "] over " +
               std::to_string(rows) + " samples; reported drops part " +
               (drops_present ? summary["part_miou_drop"] : "?") + ", obj " +
               (drops_present ? summary["obj_miou_drop"] : "?"));
  }

  // 7. emergence probe (soft except the monotonicity sub-check)
  {
    RunConfig erc = rc;
    erc.train.task = "object_only";
    EmergeOptions opts;
    opts.level = "superpixel";
    opts.topk = 6;
    opts.dump_samples = 4;
    cmd_emerge(erc, train_path, val_path, opts, work + "/emerge_sp");

    double probe_iou = -1.0;
    {
      std::ifstream is(work + "/emerge_sp/emerge_superpixel.csv");
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line))
        if (line.rfind("mean,", 0) == 0)
          probe_iou = std::stod(line.substr(5, line.rfind(',') - 5));
    }
    const double threshold = 0.5 * joint.final_part_miou;
    report(7, probe_iou >= threshold,
           "emergence: object-only top-6 superpixel part IoU " + fmt2(probe_iou) +
               " vs 0.5 x joint part mIoU = " + fmt2(threshold),
           /*soft=*/true);

    // hard sub-check: group-level top-k IoU non-decreasing in k
    EmergeOptions gopts;
    gopts.level = "group";
    gopts.topk = 4;
    gopts.checkpoint = work + "/emerge_sp/train/checkpoint.bin";
    gopts.dump_samples = 2;
    cmd_emerge(erc, train_path, val_path, gopts, work + "/emerge_g");
    bool monotone = true;
    {
      std::ifstream is(work + "/emerge_g/emerge_group_curve.csv");
      std::string line;
      std::getline(is, line);
      std::map<int, double> last;
      while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string cls, k, iou;
        std::getline(ss, cls, ',');
        std::getline(ss, k, ',');
        std::getline(ss, iou, ',');
        const int c = std::stoi(cls);
        const double v = std::stod(iou);
        if (last.count(c) && v < last[c] - 1e-12) monotone = false;
        last[c] = v;
      }
    }
    report(7, monotone, "emergence monotonicity: group top-k IoU non-decreasing in k");
  }

  // 8. determinism of full training runs
  {
    RunConfig drc = rc;
    drc.train.iterations = 30;
    drc.train.eval_interval = 10;
    drc.data_count = 32;
    const std::string d_train = work + "/det_train.bin";
    cmd_gen(drc, d_train);
    cmd_train(drc, d_train, d_train, work + "/det1", nullptr);
    cmd_train(drc, d_train, d_train, work + "/det2", nullptr);
    const bool same_csv = slurp(work + "/det1/metrics.csv") == slurp(work + "/det2/metrics.csv");
    const bool same_ckpt =
        slurp(work + "/det1/checkpoint.bin") == slurp(work + "/det2/checkpoint.bin");
    report(8, same_csv && same_ckpt,
           std::string("determinism: metrics CSV ") + (same_csv ? "identical" : "DIFFER") +
               ", checkpoint " + (same_ckpt ? "identical" : "DIFFERS"));
  }

  // 9. schedule conformance
  {
    const bool ok = lr_at(1000, 2000, 2e-4) == 2e-4 && lr_at(1800, 2000, 2e-4) == 2e-5 &&
                    lr_at(1840, 2000, 2e-4) == 2e-5 && lr_at(1900, 2000, 2e-4) == 2e-6 &&
                    lr_at(1970, 2000, 2e-4) == 2e-6 && lr_at(1799, 2000, 2e-4) == 2e-4;
    report(9, ok, "schedule: exactly 2e-4 / 2e-5 / 2e-6 across the three regimes");
  }

  std::printf("%s\n", g_failures == 0 ? "ACCEPTANCE: all hard criteria passed"
                                      : "ACCEPTANCE: hard failures present");
  return g_failures == 0 ? 0 : 1;
}
