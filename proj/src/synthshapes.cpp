#include "hiseg/synthshapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hiseg {

namespace {

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

void put_px(Sample& s, int x, int y, const Rgb& color, std::uint8_t part, std::uint8_t obj) {
  if (x < 0 || x >= s.w || y < 0 || y >= s.h) return;
  const std::size_t i = static_cast<std::size_t>(y) * s.w + x;
  s.image[i * 3 + 0] = color[0];
  s.image[i * 3 + 1] = color[1];
  s.image[i * 3 + 2] = color[2];
  s.part_map[i] = part;
  s.obj_map[i] = obj;
}

void fill_rect(Sample& s, int x0, int y0, int x1, int y1, const Rgb& c, std::uint8_t part,
               std::uint8_t obj) {
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) put_px(s, x, y, c, part, obj);
}

void fill_disk(Sample& s, int cx, int cy, int r, const Rgb& c, std::uint8_t part,
               std::uint8_t obj) {
  for (int y = cy - r; y <= cy + r; ++y)
    for (int x = cx - r; x <= cx + r; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) put_px(s, x, y, c, part, obj);
}

struct Box {
  int x0, y0, x1, y1;
  long area() const { return static_cast<long>(x1 - x0) * (y1 - y0); }
};

long intersection(const Box& a, const Box& b) {
  const int w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const int h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return w > 0 && h > 0 ? static_cast<long>(w) * h : 0;
}

}  // namespace

void GenConfig::validate() const {
  if (image_h < 16 || image_w < 16)
    throw std::invalid_argument("gen config: image must be at least 16x16");
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("gen config: objects per image range must satisfy 1 <= min <= max");
  if (color_jitter_std < 0 || noise_std < 0)
    throw std::invalid_argument("gen config: noise levels must be >= 0");
  if (occlusion && !(0.0 < occlusion_min && occlusion_min < occlusion_max && occlusion_max < 1.0))
    throw std::invalid_argument("gen config: occlusion coverage range must satisfy 0 < min < max < 1");
}

const std::array<Rgb, kNumParts + 1>& part_base_colors() {
  static const std::array<Rgb, kNumParts + 1> colors = {{
      {0, 0, 0},        // background (unused)
      {230, 60, 60},    // creature head
      {60, 200, 60},    // creature body
      {70, 90, 235},    // creature legs
      {235, 205, 50},   // vehicle body
      {205, 60, 220},   // vehicle wheels
      {50, 220, 220},   // vehicle roof
  }};
  return colors;
}

// Part proportions are kept comparable in area so every class carries
// meaningful loss signal, and no feature is thinner than ~3/4 scale.

void creature_extents(int scale, int* half_w, int* up, int* down) {
  const int bh = std::max(3, 3 * scale / 4);
  const int hr = std::max(3, 3 * scale / 4);
  const int lh = std::max(4, 5 * scale / 4);
  *half_w = scale;
  *up = bh + 2 * hr - 1;
  *down = bh + lh;
}

void vehicle_extents(int scale, int* half_w, int* up, int* down) {
  const int wr = std::max(3, 2 * scale / 3);
  const int rh = std::max(3, 3 * scale / 4);
  *half_w = std::max(3 * scale / 2, scale + wr);
  *up = scale / 2 + rh;
  *down = (scale - scale / 2) + 2 * wr - 2;
}

void draw_creature(Sample& s, int cx, int cy, int scale, const std::array<Rgb, 3>& colors) {
  const int bh = std::max(3, 3 * scale / 4);
  const int hr = std::max(3, 3 * scale / 4);
  const int lw = std::max(3, 3 * scale / 4);
  const int lh = std::max(4, 5 * scale / 4);
  // body, then head (wins the one-row overlap), then legs below
  fill_rect(s, cx - scale, cy - bh, cx + scale, cy + bh, colors[1], 2, 1);
  fill_disk(s, cx, cy - bh - hr + 1, hr, colors[0], 1, 1);
  fill_rect(s, cx - scale + 1, cy + bh, cx - scale + 1 + lw, cy + bh + lh, colors[2], 3, 1);
  fill_rect(s, cx + scale - 1 - lw, cy + bh, cx + scale - 1, cy + bh + lh, colors[2], 3, 1);
}

void draw_vehicle(Sample& s, int cx, int cy, int scale, const std::array<Rgb, 3>& colors) {
  const int hw = 3 * scale / 2;
  const int up = scale / 2;
  const int wr = std::max(3, 2 * scale / 3);
  const int rh = std::max(3, 3 * scale / 4);
  const int y0 = cy - up, y1 = cy - up + scale;
  fill_rect(s, cx - hw, y0, cx + hw, y1, colors[0], 4, 2);
  fill_disk(s, cx - scale, y1 + wr - 2, wr, colors[1], 5, 2);
  fill_disk(s, cx + scale, y1 + wr - 2, wr, colors[1], 5, 2);
  fill_rect(s, cx - 9 * scale / 8, y0 - rh, cx + 9 * scale / 8, y0, colors[2], 6, 2);
}

Sample gen_sample(Rng& rng, const GenConfig& cfg) {
  cfg.validate();
  Sample s;
  s.h = cfg.image_h;
  s.w = cfg.image_w;
  s.image.assign(s.pixels() * 3, 0);
  s.part_map.assign(s.pixels(), 0);
  s.obj_map.assign(s.pixels(), 0);
  const Rgb bg = {30, 30, 34};
  for (std::size_t i = 0; i < s.pixels(); ++i) {
    s.image[i * 3 + 0] = bg[0];
    s.image[i * 3 + 1] = bg[1];
    s.image[i * 3 + 2] = bg[2];
  }

  const int dim = std::min(s.h, s.w);
  const int s_min = std::max(7, dim / 9);
  const int s_max = std::max(s_min, dim / 6);
  constexpr int kMargin = 2;

  const int n_obj = static_cast<int>(rng.range(cfg.min_objects, cfg.max_objects));
  std::vector<Box> placed;
  for (int o = 0; o < n_obj; ++o) {
    const int type = static_cast<int>(rng.range(1, 2));
    int scale = static_cast<int>(rng.range(s_min, s_max));
    bool ok = false;
    int cx = 0, cy = 0, half_w = 0, up = 0, down = 0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      if (type == 1)
        creature_extents(scale, &half_w, &up, &down);
      else
        vehicle_extents(scale, &half_w, &up, &down);
      const int x_lo = kMargin + half_w, x_hi = s.w - 1 - kMargin - half_w;
      const int y_lo = kMargin + up, y_hi = s.h - 1 - kMargin - down;
      if (x_lo > x_hi || y_lo > y_hi) {
        if (scale > 6) --scale;  // shrink until it fits
        continue;
      }
      cx = static_cast<int>(rng.range(x_lo, x_hi));
      cy = static_cast<int>(rng.range(y_lo, y_hi));
      const Box box{cx - half_w, cy - up, cx + half_w + 1, cy + down + 1};
      bool buried = false;
      for (const Box& other : placed)
        if (intersection(box, other) * 2 > other.area()) buried = true;
      if (!buried) {
        ok = true;
        placed.push_back(box);
        break;
      }
      if (attempt % 10 == 9 && scale > 6) --scale;
    }
    if (!ok) continue;  // image too crowded; drop this object

    std::array<Rgb, 3> colors;
    const int base_part = type == 1 ? 1 : 4;
    for (int pi = 0; pi < 3; ++pi)
      for (int ch = 0; ch < 3; ++ch)
        colors[pi][ch] =
            clamp_u8(part_base_colors()[base_part + pi][ch] + rng.normal() * cfg.color_jitter_std);
    if (type == 1)
      draw_creature(s, cx, cy, scale, colors);
    else
      draw_vehicle(s, cx, cy, scale, colors);
  }

  if (cfg.noise_std > 0)
    for (std::size_t i = 0; i < s.image.size(); ++i)
      s.image[i] = clamp_u8(s.image[i] + rng.normal() * cfg.noise_std);

  if (cfg.occlusion) {
    bool any_obj = false;
    for (std::uint8_t v : s.obj_map) any_obj |= v > 0;
    if (any_obj) return apply_occlusion(s, rng, cfg.occlusion_min, cfg.occlusion_max).sample;
  }
  return s;
}

namespace {

double rect_coverage(const Sample& s, const std::vector<char>& obj_mask, long n_obj_px, int ax,
                     int ay, int half_w, int half_h, Box* out_box) {
  const int x0 = std::max(0, ax - half_w), x1 = std::min(s.w, ax + half_w + 1);
  const int y0 = std::max(0, ay - half_h), y1 = std::min(s.h, ay + half_h + 1);
  long covered = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) covered += obj_mask[static_cast<std::size_t>(y) * s.w + x];
  if (out_box) *out_box = Box{x0, y0, x1, y1};
  return static_cast<double>(covered) / static_cast<double>(n_obj_px);
}

}  // namespace

OcclusionResult apply_occlusion(const Sample& s, Rng& rng, double min_cov, double max_cov) {
  std::vector<char> obj_mask(s.pixels(), 0);
  long n_obj_px = 0;
  long sum_x = 0, sum_y = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (s.obj_map[static_cast<std::size_t>(y) * s.w + x] > 0) {
        obj_mask[static_cast<std::size_t>(y) * s.w + x] = 1;
        ++n_obj_px;
        sum_x += x;
        sum_y += y;
      }
    }
  if (n_obj_px == 0)
    throw std::invalid_argument("apply_occlusion: sample has no object pixels");
  const int cx = static_cast<int>(sum_x / n_obj_px), cy = static_cast<int>(sum_y / n_obj_px);

  Box best_box{0, 0, 0, 0};
  double best_cov = -1.0;
  bool hit = false;
  for (int attempt = 0; attempt < 100 && !hit; ++attempt) {
    const double target = rng.uniform(min_cov + 0.02, max_cov - 0.02);
    const int ax = cx + static_cast<int>(rng.range(-4, 4));
    const int ay = cy + static_cast<int>(rng.range(-4, 4));
    const int aw = static_cast<int>(rng.range(3, 5));
    const int ah = static_cast<int>(rng.range(3, 5));
    // coverage grows monotonically with r: find the smallest r reaching target
    int lo = 1, hi = std::max(s.h, s.w);
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      const double c = rect_coverage(s, obj_mask, n_obj_px, ax, ay,
                                     std::max(1, mid * aw / 4), std::max(1, mid * ah / 4), nullptr);
      if (c >= target)
        hi = mid;
      else
        lo = mid + 1;
    }
    Box box;
    const double cov = rect_coverage(s, obj_mask, n_obj_px, ax, ay, std::max(1, lo * aw / 4),
                                     std::max(1, lo * ah / 4), &box);
    // keep the attempt closest to the requested interval
    auto interval_miss = [&](double c) {
      return c < min_cov ? min_cov - c : (c > max_cov ? c - max_cov : 0.0);
    };
    if (best_cov < 0 || interval_miss(cov) < interval_miss(best_cov)) {
      best_cov = cov;
      best_box = box;
    }
    hit = interval_miss(cov) == 0.0;
  }

  OcclusionResult r;
  r.sample = s;
  r.rect_x = best_box.x0;
  r.rect_y = best_box.y0;
  r.rect_w = best_box.x1 - best_box.x0;
  r.rect_h = best_box.y1 - best_box.y0;
  r.covered_fraction = best_cov;
  r.within_target = best_cov >= min_cov && best_cov <= max_cov;
  for (int y = best_box.y0; y < best_box.y1; ++y)
    for (int x = best_box.x0; x < best_box.x1; ++x) {
      const std::uint8_t gray = clamp_u8(128 + rng.normal() * 18.0);
      const std::size_t i = (static_cast<std::size_t>(y) * s.w + x) * 3;
      r.sample.image[i] = gray;
      r.sample.image[i + 1] = gray;
      r.sample.image[i + 2] = gray;
    }
  return r;
}

// ---- dataset container --------------------------------------------------

namespace {

constexpr char kDatasetMagic[7] = {'L', 'G', 'S', 'Y', 'N', '1', '\0'};
constexpr std::uint32_t kDatasetVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2] = {0, 0};
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4] = {0, 0, 0, 0};
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void dataset_write(const std::string& path, const std::vector<Sample>& samples, int num_parts,
                   int num_objects) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset_write: cannot open " + path);
  const int h = samples.empty() ? 0 : samples[0].h;
  const int w = samples.empty() ? 0 : samples[0].w;
  for (const Sample& s : samples)
    if (s.h != h || s.w != w)
      throw std::invalid_argument("dataset_write: samples must share one image size");
  os.write(kDatasetMagic, 7);
  put_u32(os, kDatasetVersion);
  put_u32(os, static_cast<std::uint32_t>(samples.size()));
  put_u16(os, static_cast<std::uint16_t>(h));
  put_u16(os, static_cast<std::uint16_t>(w));
  os.put(static_cast<char>(num_parts));
  os.put(static_cast<char>(num_objects));
  for (const Sample& s : samples) {
    os.write(reinterpret_cast<const char*>(s.image.data()),
             static_cast<std::streamsize>(s.image.size()));
    os.write(reinterpret_cast<const char*>(s.part_map.data()),
             static_cast<std::streamsize>(s.part_map.size()));
    os.write(reinterpret_cast<const char*>(s.obj_map.data()),
             static_cast<std::streamsize>(s.obj_map.size()));
  }
  if (!os) throw std::runtime_error("dataset_write: write failed for " + path);
}

std::vector<Sample> dataset_read(const std::string& path, int* num_parts, int* num_objects) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset_read: cannot open " + path);
  char magic[7];
  is.read(magic, 7);
  if (!is || std::memcmp(magic, kDatasetMagic, 7) != 0)
    throw std::runtime_error("dataset_read: bad magic at offset 0 in " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kDatasetVersion)
    throw std::runtime_error("dataset_read: unsupported version " + std::to_string(version) +
                             " at offset 7");
  const std::uint32_t count = get_u32(is);
  const int h = get_u16(is), w = get_u16(is);
  const int p = is.get(), o = is.get();
  if (!is) throw std::runtime_error("dataset_read: truncated header at offset 19");
  if (num_parts) *num_parts = p;
  if (num_objects) *num_objects = o;

  std::vector<Sample> samples(count);
  std::size_t offset = 21;
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample& s = samples[i];
    s.h = h;
    s.w = w;
    s.image.resize(s.pixels() * 3);
    s.part_map.resize(s.pixels());
    s.obj_map.resize(s.pixels());
    is.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size()));
    is.read(reinterpret_cast<char*>(s.part_map.data()),
            static_cast<std::streamsize>(s.part_map.size()));
    is.read(reinterpret_cast<char*>(s.obj_map.data()),
            static_cast<std::streamsize>(s.obj_map.size()));
    if (!is)
      throw std::runtime_error("dataset_read: truncated sample " + std::to_string(i) +
                               " near offset " + std::to_string(offset));
    offset += s.image.size() + s.part_map.size() + s.obj_map.size();
  }
  return samples;
}

}  // namespace hiseg
