#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hiseg/rng.hpp"

namespace hiseg {

// Part labels: 1 head, 2 body, 3 legs (creature); 4 body, 5 wheels,
// 6 roof (vehicle). Object labels: 1 creature, 2 vehicle. 0 = background
// everywhere. Every part pixel lies inside its object's mask by
// construction.
constexpr int kNumParts = 6;
constexpr int kNumObjects = 2;

struct Sample {
  int h = 0, w = 0;
  std::vector<std::uint8_t> image;     // h*w*3 RGB
  std::vector<std::uint8_t> part_map;  // h*w
  std::vector<std::uint8_t> obj_map;   // h*w

  std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
};

struct GenConfig {
  int image_h = 64, image_w = 64;
  int min_objects = 1, max_objects = 3;
  double color_jitter_std = 10.0;  // per-instance part color jitter, u8 scale
  double noise_std = 4.0;          // additive per-pixel gaussian noise
  bool occlusion = false;
  double occlusion_min = 0.2, occlusion_max = 0.4;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

using Rgb = std::array<std::uint8_t, 3>;

// Base colors per part class 1..6 (index 0 unused).
const std::array<Rgb, kNumParts + 1>& part_base_colors();

// Integer-geometry rasterizers. Shapes are drawn back to front within one
// object; colors[i] paints the object's i-th part (0-based within object).
void draw_creature(Sample& s, int cx, int cy, int scale, const std::array<Rgb, 3>& colors);
void draw_vehicle(Sample& s, int cx, int cy, int scale, const std::array<Rgb, 3>& colors);

// Bounding box half extents used for placement, per object class.
void creature_extents(int scale, int* half_w, int* up, int* down);
void vehicle_extents(int scale, int* half_w, int* up, int* down);

Sample gen_sample(Rng& rng, const GenConfig& cfg);

struct OcclusionResult {
  Sample sample;
  int rect_y = 0, rect_x = 0, rect_h = 0, rect_w = 0;
  double covered_fraction = 0.0;  // achieved fraction of object pixels
  bool within_target = false;
};

// Places a gray-textured rectangle covering a fraction of the union object
// mask inside [min_cov, max_cov]. Labels are kept untouched. Falls back to
// the best attempt after 100 placements, with the achieved fraction
// recorded.
OcclusionResult apply_occlusion(const Sample& s, Rng& rng, double min_cov = 0.2,
                                double max_cov = 0.4);

// Dataset container: magic "LGSYN1\0", u32 version, u32 count, u16 h,
// u16 w, u8 P, u8 O, then per sample raw RGB + part map + object map.
// Little-endian throughout.
void dataset_write(const std::string& path, const std::vector<Sample>& samples,
                   int num_parts = kNumParts, int num_objects = kNumObjects);
std::vector<Sample> dataset_read(const std::string& path, int* num_parts = nullptr,
                                 int* num_objects = nullptr);

}  // namespace hiseg
