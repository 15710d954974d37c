#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "hiseg/synthshapes.hpp"

using namespace hiseg;

namespace {

Sample blank(int h, int w) {
  Sample s;
  s.h = h;
  s.w = w;
  s.image.assign(s.pixels() * 3, 0);
  s.part_map.assign(s.pixels(), 0);
  s.obj_map.assign(s.pixels(), 0);
  return s;
}

std::string tmp_path(const char* name) { return std::string("/tmp/hiseg_test_") + name; }

}  // namespace

TEST_CASE("creature rasterization matches an analytic oracle pixel-exactly") {
  Sample s = blank(64, 64);
  const std::array<Rgb, 3> colors = {{{200, 0, 0}, {0, 200, 0}, {0, 0, 200}}};
  const int cx = 30, cy = 32, scale = 9;
  draw_creature(s, cx, cy, scale, colors);

  const int bh = 3 * scale / 4, hr = 3 * scale / 4;
  const int lw = 3 * scale / 4, lh = 5 * scale / 4;
  const int head_cy = cy - bh - hr + 1;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      int part = 0;
      // oracle draws in the same order: body, head wins overlap, legs
      if (x >= cx - scale && x < cx + scale && y >= cy - bh && y < cy + bh) part = 2;
      if ((x - cx) * (x - cx) + (y - head_cy) * (y - head_cy) <= hr * hr) part = 1;
      const bool in_left =
          x >= cx - scale + 1 && x < cx - scale + 1 + lw && y >= cy + bh && y < cy + bh + lh;
      const bool in_right =
          x >= cx + scale - 1 - lw && x < cx + scale - 1 && y >= cy + bh && y < cy + bh + lh;
      if (in_left || in_right) part = 3;
      CHECK(s.part_map[y * 64 + x] == part);
      CHECK(s.obj_map[y * 64 + x] == (part > 0 ? 1 : 0));
    }
}

TEST_CASE("containment and class balance over 1000 random samples") {
  GenConfig cfg;
  cfg.seed = 77;
  Rng base(cfg.seed);
  std::array<int, kNumParts + 1> seen{};
  for (int i = 0; i < 1000; ++i) {
    Rng ri = base.split(i);
    Sample s = gen_sample(ri, cfg);
    std::array<bool, kNumParts + 1> present{};
    for (std::size_t j = 0; j < s.pixels(); ++j) {
      if (s.part_map[j] > 0) CHECK(s.obj_map[j] > 0);
      present[s.part_map[j]] = true;
    }
    for (int k = 1; k <= kNumParts; ++k) seen[k] += present[k];
  }
  for (int k = 1; k <= kNumParts; ++k) CHECK(seen[k] >= 50);  // 5% of 1000
}

TEST_CASE("same seed reproduces identical sample bytes") {
  GenConfig cfg;
  cfg.seed = 5;
  Rng a(123), b(123);
  Sample s1 = gen_sample(a, cfg);
  Sample s2 = gen_sample(b, cfg);
  CHECK(s1.image == s2.image);
  CHECK(s1.part_map == s2.part_map);
  CHECK(s1.obj_map == s2.obj_map);
}

TEST_CASE("occlusion: coverage window, untouched labels, rect-confined changes") {
  GenConfig cfg;
  Rng base(31);
  for (int i = 0; i < 25; ++i) {
    Rng gi = base.split(i);
    Sample s = gen_sample(gi, cfg);
    Rng oi = base.split(1000 + i);
    OcclusionResult r = apply_occlusion(s, oi, 0.2, 0.4);
    CHECK(r.covered_fraction >= 0.18);
    CHECK(r.covered_fraction <= 0.42);
    CHECK(r.sample.part_map == s.part_map);
    CHECK(r.sample.obj_map == s.obj_map);
    int outside_diff = 0, inside_diff = 0;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const std::size_t px = (static_cast<std::size_t>(y) * s.w + x) * 3;
        const bool differs = r.sample.image[px] != s.image[px] ||
                             r.sample.image[px + 1] != s.image[px + 1] ||
                             r.sample.image[px + 2] != s.image[px + 2];
        const bool inside = y >= r.rect_y && y < r.rect_y + r.rect_h && x >= r.rect_x &&
                            x < r.rect_x + r.rect_w;
        if (differs && !inside) ++outside_diff;
        if (differs && inside) ++inside_diff;
      }
    CHECK(outside_diff == 0);
    CHECK(inside_diff > 0);
  }
  CHECK_THROWS_AS(apply_occlusion(blank(16, 16), base, 0.2, 0.4), std::invalid_argument);
}

TEST_CASE("dataset file round-trips byte-identically") {
  GenConfig cfg;
  Rng base(3);
  std::vector<Sample> samples;
  for (int i = 0; i < 10; ++i) {
    Rng ri = base.split(i);
    samples.push_back(gen_sample(ri, cfg));
  }
  const std::string path = tmp_path("ds.bin");
  dataset_write(path, samples);
  int p = 0, o = 0;
  auto back = dataset_read(path, &p, &o);
  CHECK(p == kNumParts);
  CHECK(o == kNumObjects);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].image == samples[i].image);
    CHECK(back[i].part_map == samples[i].part_map);
    CHECK(back[i].obj_map == samples[i].obj_map);
  }
  std::remove(path.c_str());
}

TEST_CASE("empty dataset round-trips") {
  const std::string path = tmp_path("empty.bin");
  dataset_write(path, {});
  CHECK(dataset_read(path).empty());
  std::remove(path.c_str());
}

TEST_CASE("corrupted magic and truncation are rejected with offsets") {
  GenConfig cfg;
  Rng rng(9);
  Sample s = gen_sample(rng, cfg);
  const std::string path = tmp_path("corrupt.bin");
  dataset_write(path, {s});

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  CHECK_THROWS_WITH_AS(dataset_read(path), doctest::Contains("bad magic"), std::runtime_error);

  dataset_write(path, {s});
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_WITH_AS(dataset_read(path), doctest::Contains("truncated"), std::runtime_error);
  std::remove(path.c_str());
}
