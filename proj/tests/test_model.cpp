#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "hiseg/commands.hpp"
#include "hiseg/model.hpp"
#include "hiseg/synthshapes.hpp"

using namespace hiseg;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 32;
  cfg.stem_stride = 2;
  cfg.stem_channels = 8;
  cfg.sp_channels = 12;
  cfg.trunk_depth = 2;
  cfg.sca_before = {0, 1};
  cfg.branch_depth = 2;
  cfg.gca_stages = 2;
  cfg.sca_heads = 2;
  cfg.vit_heads = 3;
  cfg.gca_heads = 3;
  cfg.ffn_ratio = 2;
  cfg.group_ratio = 16;  // 4x4 superpixels -> 1 group
  cfg.num_parts = 6;
  cfg.num_objects = 2;
  cfg.seed = 11;
  return cfg;
}

Tensor rand_image(const ModelConfig& cfg, Rng& rng) {
  Tensor t({cfg.image_h, cfg.image_w, 3});
  fill_uniform(t, rng, -0.5, 0.5);
  return t;
}

std::vector<std::uint8_t> rand_labels(int n, int classes, Rng& rng) {
  std::vector<std::uint8_t> l(n);
  for (auto& v : l) v = static_cast<std::uint8_t>(rng.range(0, classes - 1));
  return l;
}

}  // namespace

TEST_CASE("model_build: desk default geometry and validation") {
  ModelConfig cfg;  // the 64x64 desk default
  cfg.validate();
  CHECK(cfg.pixel_h() == 32);
  CHECK(cfg.sp_h() == 8);
  CHECK(cfg.sp_w() == 8);
  CHECK(cfg.group_n() == 4);
  auto m = model_build(cfg);
  CHECK(m->param_count() > 0);

  ModelConfig bad = cfg;
  bad.sp_channels = 50;  // not divisible by 6 heads
  CHECK_THROWS_WITH_AS(model_build(bad), doctest::Contains("vit_heads"), std::invalid_argument);
  bad = cfg;
  bad.image_h = 63;
  CHECK_THROWS_AS(model_build(bad), std::invalid_argument);
  bad = cfg;
  bad.sca_before = {0, 5};
  CHECK_THROWS_WITH_AS(model_build(bad), doctest::Contains("trunk depth"), std::invalid_argument);
  bad = cfg;
  bad.sca_before = {};
  CHECK_THROWS_AS(model_build(bad), std::invalid_argument);
  bad = cfg;
  bad.group_ratio = 15;
  CHECK_THROWS_WITH_AS(model_build(bad), doctest::Contains("square"), std::invalid_argument);
}

TEST_CASE("model_build is deterministic in the seed") {
  ModelConfig cfg = tiny_config();
  auto a = model_build(cfg);
  auto b = model_build(cfg);
  auto pa = a->parameters(), pb = b->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.data == pb[i]->value.data);
  }
  cfg.seed = 12;
  auto c = model_build(cfg);
  bool any_diff = false;
  auto pc = c->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) any_diff |= pa[i]->value.data != pc[i]->value.data;
  CHECK(any_diff);
}

TEST_CASE("parameter count equals an independently summed per-module count") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);

  const long ci = cfg.stem_channels, cs = cfg.sp_channels, r = cfg.ffn_ratio;
  auto lin = [](long in, long out) { return in * out + out; };
  const long ln_s = 2 * cs;
  auto head = [&](long cq, long ckv, long d) { return lin(cq, d) + 2 * lin(ckv, d); };
  auto attn = [&](long c, long h) { return h * head(c, c, c / h) + lin(c, c); };
  auto ffn_n = [&](long c) { return lin(c, r * c) + lin(r * c, c); };
  auto vit = [&](long c, long h) { return 2 * (2 * c) + attn(c, h) + ffn_n(c) + 2 * c; };
  auto cross = [&](long c, long h) { return 3 * (2 * c) + attn(c, h) + ffn_n(c) + c; };

  long expect = 0;
  expect += 2 * 2 * 3 * ci + ci + 2 * ci;               // stem stage: kernel, bias, ln
  expect += lin(ci, cs);                                 // superpixel projection
  const long d_sca = cs / cfg.sca_heads;
  expect += 2 * (ln_s + 2 * ci + cfg.sca_heads * (lin(cs, d_sca) + 2 * lin(ci, d_sca)));
  expect += cfg.trunk_depth * vit(cs, cfg.vit_heads);
  expect += 2 * cfg.branch_depth * vit(cs, cfg.vit_heads);
  expect += cfg.gca_stages * (2 * cross(cs, cfg.gca_heads) + vit(cs, cfg.gca_heads));
  expect += lin(cs, cs);                                 // group init projection
  expect += lin(cs, cfg.num_parts + 1) + lin(cs, cfg.num_objects + 1);
  CHECK(m->param_count() == expect);
}

TEST_CASE("model_forward output contract") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  Rng rng(5);
  Tensor img = rand_image(cfg, rng);
  ForwardOutput out = model_forward(*m, img, nullptr);
  CHECK(out.part_logits.shape == std::vector<int>{32, 32, 7});
  CHECK(out.obj_logits.shape == std::vector<int>{32, 32, 3});
  CHECK(out.obj_group_logits.shape == std::vector<int>{1, 3});
  CHECK(out.part_sp_logits.shape == std::vector<int>{4, 4, 7});
  CHECK(out.obj_pix_logits.shape == std::vector<int>{16, 16, 3});
  CHECK(out.part_logits.all_finite());
  CHECK(out.obj_logits.all_finite());

  // associations row-stochastic
  const CandidateMap& cm = m->cmap;
  std::vector<double> sums(cm.n_pixels(), 0.0);
  for (int j = 0; j < cm.n_pairs(); ++j) {
    CHECK(out.assoc_pix_sp.weights.data[j] >= 0.0);
    sums[(*cm.pair_px)[j]] += out.assoc_pix_sp.weights.data[j];
  }
  for (double s : sums) CHECK(std::fabs(s - 1.0) <= 1e-9);
  for (int i = 0; i < out.assoc_sp_group.weights.shape[0]; ++i) {
    double s = 0.0;
    for (int g = 0; g < out.assoc_sp_group.weights.shape[1]; ++g)
      s += out.assoc_sp_group.weights(i, g);
    CHECK(std::fabs(s - 1.0) <= 1e-9);
  }

  CHECK_THROWS_AS(model_forward(*m, Tensor::zeros({16, 16, 3}), nullptr), std::invalid_argument);
}

TEST_CASE("forward is side-effect free: consecutive runs are bitwise identical") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  Rng rng(7);
  Tensor img = rand_image(cfg, rng);
  ForwardOutput a = model_forward(*m, img, nullptr);
  ForwardOutput b = model_forward(*m, img, nullptr);
  CHECK(a.part_logits.data == b.part_logits.data);
  CHECK(a.obj_logits.data == b.obj_logits.data);
  CHECK(a.assoc_pix_sp.weights.data == b.assoc_pix_sp.weights.data);
}

TEST_CASE("zero classifiers collapse logits to the classifier bias") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  for (Parameter* p : m->parameters())
    if (p->name.find(".ls") != std::string::npos) std::fill(p->value.data.begin(),
                                                            p->value.data.end(), 0.0);
  std::fill(m->part_head.W.value.data.begin(), m->part_head.W.value.data.end(), 0.0);
  std::fill(m->obj_head.W.value.data.begin(), m->obj_head.W.value.data.end(), 0.0);
  Rng rng(9);
  fill_uniform(m->part_head.b.value, rng, -1, 1);
  fill_uniform(m->obj_head.b.value, rng, -1, 1);
  ForwardOutput out = model_forward(*m, rand_image(cfg, rng), nullptr);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      for (int c = 0; c < 7; ++c)
        CHECK(out.part_logits(y, x, c) ==
              doctest::Approx(m->part_head.b.value.data[c]).epsilon(1e-12));
      for (int c = 0; c < 3; ++c)
        CHECK(out.obj_logits(y, x, c) ==
              doctest::Approx(m->obj_head.b.value.data[c]).epsilon(1e-12));
    }
}

TEST_CASE("forced one-hot associations reduce the object path to a gather") {
  ModelConfig cfg = tiny_config();
  cfg.group_ratio = 4;  // 4x4 superpixels -> 2x2 groups, a real gather
  auto m = model_build(cfg);
  Rng rng(13);
  Tensor img = rand_image(cfg, rng);
  ForwardHooks hooks;
  hooks.force_parent_assoc = true;
  ForwardOutput out = model_forward(*m, img, nullptr, &hooks);

  // block-constant gather oracle at each level of the chain
  const int s_h = cfg.sp_h(), s_w = cfg.sp_w();
  for (int sy = 0; sy < s_h; ++sy)
    for (int sx = 0; sx < s_w; ++sx)
      for (int c = 0; c < 3; ++c)
        CHECK(out.obj_sp_logits(sy, sx, c) ==
              doctest::Approx(out.obj_group_logits((sy / 2) * 2 + sx / 2, c)).epsilon(1e-12));
  for (int y = 0; y < cfg.pixel_h(); ++y)
    for (int x = 0; x < cfg.pixel_w(); ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.obj_pix_logits(y, x, c) ==
              doctest::Approx(out.obj_sp_logits(y / 4, x / 4, c)).epsilon(1e-12));
  Tensor expect_img = bilinear_resize(out.obj_pix_logits, 32, 32);
  for (std::size_t i = 0; i < expect_img.data.size(); ++i)
    CHECK(out.obj_logits.data[i] == doctest::Approx(expect_img.data[i]).epsilon(1e-12));
}

TEST_CASE("joint_loss: uniform logits, saturated logits, lambda weighting") {
  ForwardOutput out;
  out.part_logits = Tensor::zeros({4, 4, 7});
  out.obj_logits = Tensor::zeros({4, 4, 3});
  Rng rng(15);
  auto part_gt = rand_labels(16, 7, rng);
  auto obj_gt = rand_labels(16, 3, rng);
  Tensor l = joint_loss(out, part_gt, obj_gt, 1.0);
  CHECK(l.data[0] == doctest::Approx(std::log(7.0) + std::log(3.0)).epsilon(1e-12));

  Tensor lw = joint_loss(out, part_gt, obj_gt, 0.25);
  CHECK(lw.data[0] == doctest::Approx(std::log(7.0) + 0.25 * std::log(3.0)).epsilon(1e-12));

  for (int i = 0; i < 16; ++i) {
    out.part_logits.data[i * 7 + part_gt[i]] = 50.0;
    out.obj_logits.data[i * 3 + obj_gt[i]] = 50.0;
  }
  CHECK(joint_loss(out, part_gt, obj_gt, 1.0).data[0] <= 1e-9);

  auto bad = part_gt;
  bad[3] = 9;
  CHECK_THROWS_AS(joint_loss(out, bad, obj_gt, 1.0), std::invalid_argument);
}

TEST_CASE("lr_at matches the step schedule exactly") {
  CHECK(lr_at(1000, 2000, 2e-4) == 2e-4);
  CHECK(lr_at(1840, 2000, 2e-4) == 2e-5);   // 0.92 of total
  CHECK(lr_at(1940, 2000, 2e-4) == 2e-6);   // 0.97 of total
  CHECK(lr_at(1799, 2000, 2e-4) == 2e-4);
  CHECK(lr_at(1800, 2000, 2e-4) == 2e-5);   // drop exactly at 90%
  CHECK(lr_at(1899, 2000, 2e-4) == 2e-5);
  CHECK(lr_at(1900, 2000, 2e-4) == 2e-6);   // drop exactly at 95%
  CHECK_THROWS_AS(lr_at(2000, 2000, 2e-4), std::invalid_argument);
}

TEST_CASE("adamw single-parameter step matches the closed form") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  AdamWState opt = AdamWState::init(*m);
  opt.lr = 0.01;
  opt.weight_decay = 0.05;

  Parameter* p = m->parameters()[0];
  const double w0 = p->value.data[0];
  const double g = 0.37;
  m->zero_grads();
  p->grad.data[0] = g;
  adamw_step(*m, opt);

  const double mt = 0.1 * g;           // (1 - beta1) g
  const double vt = 0.001 * g * g;     // (1 - beta2) g^2
  const double mhat = mt / (1.0 - 0.9);
  const double vhat = vt / (1.0 - 0.999);
  const double expect = w0 - 0.01 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.05 * w0);
  CHECK(p->value.data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("train_step with lr zero leaves parameters unchanged") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  AdamWState opt = AdamWState::init(*m);
  opt.lr = 0.0;
  GenConfig gc;
  gc.image_h = gc.image_w = 32;
  gc.seed = 3;
  Rng rng(3);
  Sample s = gen_sample(rng, gc);
  std::vector<TrainBatchSample> batch{
      {image_to_tensor(s.image.data(), s.h, s.w), &s.part_map, &s.obj_map}};
  std::vector<std::vector<double>> before;
  for (Parameter* p : m->parameters()) before.push_back(p->value.data);
  StepStats st = train_step(*m, opt, batch);
  CHECK(std::isfinite(st.loss));
  CHECK(st.grad_norm > 0.0);
  auto params = m->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value.data == before[i]);
}

TEST_CASE("train_step is deterministic and thread-count independent") {
  GenConfig gc;
  gc.image_h = gc.image_w = 32;
  gc.seed = 21;
  Rng rng(21);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) {
    Rng ri = rng.split(i);
    samples.push_back(gen_sample(ri, gc));
  }
  auto run = [&](int threads) {
    ModelConfig cfg = tiny_config();
    auto m = model_build(cfg);
    AdamWState opt = AdamWState::init(*m);
    opt.lr = 1e-3;
    std::vector<double> losses;
    for (int it = 0; it < 3; ++it) {
      std::vector<TrainBatchSample> batch;
      for (auto& s : samples)
        batch.push_back({image_to_tensor(s.image.data(), s.h, s.w), &s.part_map, &s.obj_map});
      losses.push_back(train_step(*m, opt, batch, 1.0, -1.0, threads).loss);
    }
    std::vector<std::vector<double>> weights;
    for (Parameter* p : m->parameters()) weights.push_back(p->value.data);
    return std::make_pair(losses, weights);
  };
  auto [l1, w1] = run(1);
  auto [l2, w2] = run(1);
  auto [l4, w4] = run(4);
  CHECK(l1 == l2);
  CHECK(w1 == w2);
  CHECK(l1 == l4);  // gradient summation order is fixed regardless of threads
  CHECK(w1 == w4);
}

TEST_CASE("branch isolation: lambda zero starves object-branch parameters") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  GenConfig gc;
  gc.image_h = gc.image_w = 32;
  gc.seed = 33;
  Rng rng(33);
  Sample s = gen_sample(rng, gc);

  m->zero_grads();
  Graph g;
  ForwardOutput out = model_forward(*m, image_to_tensor(s.image.data(), s.h, s.w), &g);
  Tensor loss = joint_loss(out, s.part_map, s.obj_map, 0.0);
  g.backward(loss);
  g.write_param_grads();

  double obj_branch_grad = 0.0, part_branch_grad = 0.0, trunk_grad = 0.0;
  for (Parameter* p : m->parameters()) {
    double norm = 0.0;
    for (double v : p->grad.data) norm += v * v;
    const bool obj_only = p->name.rfind("gca", 0) == 0 || p->name.rfind("obj", 0) == 0 ||
                          p->name.rfind("group_init", 0) == 0;
    if (obj_only)
      obj_branch_grad += norm;
    else if (p->name.rfind("part", 0) == 0)
      part_branch_grad += norm;
    else
      trunk_grad += norm;
  }
  CHECK(obj_branch_grad == 0.0);
  CHECK(part_branch_grad > 0.0);
  CHECK(trunk_grad > 0.0);
}

TEST_CASE("end-to-end gradcheck on a 16x16 image with a 2-block trunk") {
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
  cfg.group_ratio = 4;  // 2x2 superpixels -> one group
  cfg.num_parts = 2;
  cfg.num_objects = 1;
  cfg.seed = 4;
  auto m = model_build(cfg);
  // move LayerScale off its tiny init so every branch carries signal
  for (Parameter* p : m->parameters())
    if (p->name.find(".ls") != std::string::npos)
      std::fill(p->value.data.begin(), p->value.data.end(), 0.05);

  Rng rng(19);
  Tensor img = rand_image(cfg, rng);
  auto part_gt = rand_labels(16 * 16, 3, rng);
  auto obj_gt = rand_labels(16 * 16, 2, rng);

  const double err = param_gradcheck(
      [&](Graph& g) {
        ForwardOutput out = model_forward(*m, img, &g);
        return joint_loss(out, part_gt, obj_gt, 1.0);
      },
      m->parameters(), 1e-5, 2, 99);
  CHECK(err <= 1e-3);
}

TEST_CASE("fifty steps on a fixed four-sample batch halve the joint loss") {
  ModelConfig cfg = tiny_config();
  cfg.image_h = cfg.image_w = 64;  // desk-default geometry, thin channels
  cfg.group_ratio = 4;
  auto m = model_build(cfg);
  AdamWState opt = AdamWState::init(*m);
  opt.lr = 3e-3;
  GenConfig gc;
  gc.image_h = gc.image_w = 64;
  gc.seed = 41;
  Rng rng(41);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) {
    Rng ri = rng.split(i);
    samples.push_back(gen_sample(ri, gc));
  }
  std::vector<TrainBatchSample> batch;
  std::vector<Tensor> images;
  for (auto& s : samples) images.push_back(image_to_tensor(s.image.data(), s.h, s.w));
  for (std::size_t i = 0; i < samples.size(); ++i)
    batch.push_back({images[i], &samples[i].part_map, &samples[i].obj_map});

  double first = 0.0, last = 0.0;
  for (int it = 0; it < 50; ++it) {
    StepStats st = train_step(*m, opt, batch, 1.0, -1.0, 2);
    if (it == 0) first = st.loss;
    last = st.loss;
  }
  CHECK(last <= 0.5 * first);
}

TEST_CASE("checkpoint round trip preserves parameters and config") {
  ModelConfig cfg = tiny_config();
  auto m = model_build(cfg);
  Rng rng(55);
  for (Parameter* p : m->parameters()) fill_uniform(p->value, rng, -1, 1);
  const std::string path = "/tmp/hiseg_test_ckpt.bin";
  checkpoint_save(path, *m, model_config_to_json(cfg));

  LoadedCheckpoint lc = checkpoint_load(path);
  auto pa = m->parameters(), pb = lc.model->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.data == pb[i]->value.data);
  }
  CHECK(lc.model->cfg.sp_channels == cfg.sp_channels);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('Z');
  }
  CHECK_THROWS_WITH_AS(checkpoint_load(path), doctest::Contains("bad magic"), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("model config json rejects unknown keys and round-trips") {
  ModelConfig cfg = tiny_config();
  ModelConfig back = model_config_from_json(model_config_to_json(cfg));
  CHECK(back.sp_channels == cfg.sp_channels);
  CHECK(back.sca_before == cfg.sca_before);
  CHECK(back.seed == cfg.seed);
  CHECK_THROWS_WITH_AS(model_config_from_json("{\"spc\": 3}"), doctest::Contains("unknown key"),
                       std::invalid_argument);
}
