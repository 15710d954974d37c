#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hiseg/synthshapes.hpp"

namespace hiseg {

// P6, maxval 255.
void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int h, int w);

// P5, maxval 255.
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, int h, int w);

// Fixed palette color for a label/segment id; id 0 maps to near-black.
Rgb palette_color(int id);

std::vector<std::uint8_t> colorize_labels(const std::vector<std::uint8_t>& labels);

// 50/50 blend of the image with per-id palette colors (id 0 left as-is).
std::vector<std::uint8_t> overlay_ids(const std::vector<std::uint8_t>& rgb,
                                      const std::vector<int>& ids, int h, int w);

// Nearest-neighbor upscale of an id map by an integer factor.
std::vector<int> upscale_ids(const std::vector<int>& ids, int h, int w, int factor);

}  // namespace hiseg
