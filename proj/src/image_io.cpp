#include "hiseg/image_io.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace hiseg {

void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int h, int w) {
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3)
    throw std::invalid_argument("write_ppm: buffer does not match " + std::to_string(h) + "x" +
                                std::to_string(w));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, int h, int w) {
  if (gray.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("write_pgm: buffer does not match " + std::to_string(h) + "x" +
                                std::to_string(w));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

Rgb palette_color(int id) {
  if (id <= 0) return {12, 12, 12};
  // golden-angle hue walk, constant-ish saturation/value
  const double hue = std::fmod(id * 137.508, 360.0) / 60.0;
  const int i = static_cast<int>(hue);
  const double f = hue - i;
  const double v = 0.92, s = 0.78;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (i % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
  return {static_cast<std::uint8_t>(r * 255), static_cast<std::uint8_t>(g * 255),
          static_cast<std::uint8_t>(b * 255)};
}

std::vector<std::uint8_t> colorize_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out(labels.size() * 3);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Rgb c = palette_color(labels[i]);
    out[i * 3] = c[0];
    out[i * 3 + 1] = c[1];
    out[i * 3 + 2] = c[2];
  }
  return out;
}

std::vector<std::uint8_t> overlay_ids(const std::vector<std::uint8_t>& rgb,
                                      const std::vector<int>& ids, int h, int w) {
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3 ||
      ids.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("overlay_ids: sizes do not match");
  std::vector<std::uint8_t> out(rgb);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Rgb c = palette_color(ids[i] + 1);  // id 0 gets a real color too
    for (int ch = 0; ch < 3; ++ch)
      out[i * 3 + ch] = static_cast<std::uint8_t>((rgb[i * 3 + ch] + c[ch]) / 2);
  }
  return out;
}

std::vector<int> upscale_ids(const std::vector<int>& ids, int h, int w, int factor) {
  std::vector<int> out(static_cast<std::size_t>(h) * factor * w * factor);
  for (int y = 0; y < h * factor; ++y)
    for (int x = 0; x < w * factor; ++x)
      out[static_cast<std::size_t>(y) * w * factor + x] =
          ids[static_cast<std::size_t>(y / factor) * w + x / factor];
  return out;
}

}  // namespace hiseg
