// SPDX-License-Identifier: Apache-2.0

#include "cma/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace cma {

void write_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw IoError("write_ppm: expected (1|3,H,W), got " +
                  shape_str(image.shape()));
  int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(size_t(W) * 3);
  const float* px = image.data();
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = px[(size_t(C == 1 ? 0 : c) * H + y) * W + x];
        v = std::min(1.0f, std::max(0.0f, v));
        row[size_t(x) * 3 + c] = (unsigned char)std::lround(v * 255.0f);
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!f) throw IoError("write_ppm: short write to " + path);
}

namespace {

int read_ppm_int(std::istream& in) {
  // skips whitespace and '#' comments per the netpbm grammar
  int c = in.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = in.get();
    c = in.get();
  }
  int v = 0;
  bool any = false;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw IoError("read_ppm: malformed header");
  return v;
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("read_ppm: not a P6 file: " + path);
  int W = read_ppm_int(f);
  int H = read_ppm_int(f);
  int maxval = read_ppm_int(f);
  if (maxval != 255) throw IoError("read_ppm: unsupported maxval in " + path);
  std::vector<unsigned char> raw(size_t(W) * H * 3);
  f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (f.gcount() != std::streamsize(raw.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  Tensor<float> img = Tensor<float>::zeros({3, H, W});
  float* px = img.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        px[(size_t(c) * H + y) * W + x] =
            float(raw[(size_t(y) * W + x) * 3 + c]) / 255.0f;
  return img;
}

}  // namespace cma
