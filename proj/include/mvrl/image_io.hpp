#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/sim.hpp"

namespace mvrl {

// Binary P6. Converts the planar Image8 layout to interleaved RGB rows.
inline void write_ppm(const std::string& path, const Image8& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("write_ppm: cannot open " + path);
  os << "P6\n" << img.hw << ' ' << img.hw << "\n255\n";
  const int hw = img.hw;
  std::vector<char> row(static_cast<std::size_t>(hw) * 3);
  for (int r = 0; r < hw; ++r) {
    for (int c = 0; c < hw; ++c)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<std::size_t>(c) * 3 + ch] =
            static_cast<char>(img.at(ch, r, c));
    os.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

// ASCII P2 grayscale, one image row per text line.
inline void write_pgm(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& gray) {
  if (gray.size() != static_cast<std::size_t>(width) * height)
    throw ShapeError("write_pgm: size mismatch");
  std::ofstream os(path);
  if (!os) throw ConfigError("write_pgm: cannot open " + path);
  os << "P2\n" << width << ' ' << height << "\n255\n";
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (c) os << ' ';
      os << static_cast<int>(gray[static_cast<std::size_t>(r) * width + c]);
    }
    os << '\n';
  }
}

struct PgmImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> gray;
};

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("read_pgm: cannot open " + path);
  std::string magic;
  is >> magic;
  if (magic != "P2") throw ConfigError("read_pgm: expected ASCII P2 format");
  PgmImage img;
  int maxval = 0;
  is >> img.width >> img.height >> maxval;
  if (img.width <= 0 || img.height <= 0 || maxval != 255)
    throw ConfigError("read_pgm: bad header");
  img.gray.resize(static_cast<std::size_t>(img.width) * img.height);
  for (auto& g : img.gray) {
    int v;
    if (!(is >> v)) throw ConfigError("read_pgm: truncated pixel data");
    g = static_cast<std::uint8_t>(v);
  }
  return img;
}

}  // namespace mvrl
