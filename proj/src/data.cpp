// SPDX-License-Identifier: Apache-2.0

#include "cma/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cma {

const Vocab& Vocab::builtin() {
  static const Vocab v = [] {
    Vocab vb;
    vb.words = {
        "[PAD]", "[UNK]", "[CLS]",
        // function words
        "a", "and", "at", "the", "in", "on", "of", "is",
        // colors
        "red", "green", "blue", "yellow", "orange", "purple", "cyan",
        "magenta",
        // shape kinds
        "square", "circle", "triangle",
        // coarse locations
        "top", "middle", "bottom", "left", "center", "right",
        // filler for user-facing text
        "background", "textured", "image", "shows", "contains", "with",
        "there", "are", "small", "large", "tiny", "big", "upper", "lower",
        "near", "above", "below", "beside", "dark", "light", "pale", "bright",
        "one", "two", "three", "shape", "shapes", "color", "colored",
        "region", "area", "corner", "edge", "side", "scene", "object",
    };
    for (size_t i = 0; i < vb.words.size(); ++i)
      vb.index[vb.words[i]] = int(i);
    return vb;
  }();
  return v;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab,
                          int max_len) {
  std::vector<int> ids;
  ids.reserve(size_t(max_len));
  ids.push_back(Vocab::kCls);
  std::istringstream ss(text);
  std::string w;
  while (int(ids.size()) < max_len && ss >> w) {
    for (char& c : w) c = char(std::tolower((unsigned char)c));
    ids.push_back(vocab.id_of(w));
  }
  while (int(ids.size()) < max_len) ids.push_back(Vocab::kPad);
  return ids;
}

Mask center_mask(int H, int W, double area_fraction) {
  if (area_fraction <= 0.0 || area_fraction > 1.0)
    throw ConfigError("center_mask: area fraction must be in (0,1]");
  int s = int(std::lround(std::sqrt(area_fraction * double(H) * double(W))));
  s = std::min(s, std::min(H, W));
  if (s == 0) throw ConfigError("center_mask: degenerate zero-size mask");
  Mask m;
  m.h = H;
  m.w = W;
  m.grid.assign(size_t(H) * W, 0.0f);
  int y0 = (H - s) / 2;  // extra row goes below
  int x0 = (W - s) / 2;  // extra column goes right
  for (int y = y0; y < y0 + s; ++y)
    for (int x = x0; x < x0 + s; ++x) m.grid[size_t(y) * W + x] = 1.0f;
  return m;
}

Mask object_mask(int H, int W, const std::vector<Box>& boxes) {
  if (boxes.empty())
    throw ConfigError("object_mask: undefined without boxes");
  Mask m;
  m.h = H;
  m.w = W;
  m.grid.assign(size_t(H) * W, 0.0f);
  for (const Box& b : boxes) {
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > W || b.y1 > H || b.x0 >= b.x1 ||
        b.y0 >= b.y1)
      throw ConfigError("object_mask: box out of bounds");
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x) m.grid[size_t(y) * W + x] = 1.0f;
  }
  return m;
}

Tensor<float> apply_mask(const Tensor<float>& image, const Mask& mask) {
  if (image.rank() != 3 || image.dim(1) != mask.h || image.dim(2) != mask.w)
    throw ShapeError("apply_mask: image " + shape_str(image.shape()) +
                     " does not match mask " + std::to_string(mask.h) + "x" +
                     std::to_string(mask.w));
  Tensor<float> out = image.detach();
  int C = image.dim(0), H = mask.h, W = mask.w;
  float* px = out.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask.grid[size_t(y) * W + x] > 0.5f)
        for (int c = 0; c < C; ++c) px[(size_t(c) * H + y) * W + x] = 0.5f;
  return out;
}

std::vector<bool> patch_mask_of(const Mask& mask, int patch) {
  if (patch <= 0 || mask.h % patch != 0 || mask.w % patch != 0)
    throw ConfigError("patch_mask_of: mask extent not divisible by patch");
  int gh = mask.h / patch, gw = mask.w / patch;
  std::vector<bool> pm(size_t(gh) * gw, false);
  int half = patch * patch / 2;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int cnt = 0;
      for (int y = gy * patch; y < (gy + 1) * patch; ++y)
        for (int x = gx * patch; x < (gx + 1) * patch; ++x)
          cnt += mask.grid[size_t(y) * mask.w + x] > 0.5f ? 1 : 0;
      pm[size_t(gy) * gw + gx] = cnt > half;
    }
  return pm;
}

Tensor<float> patchify(const Tensor<float>& image, int patch) {
  if (image.rank() != 3)
    throw ShapeError("patchify: expected (C,H,W), got " +
                     shape_str(image.shape()));
  int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (patch <= 0 || H % patch != 0 || W % patch != 0)
    throw ShapeError("patchify: extent " + std::to_string(H) + "x" +
                     std::to_string(W) + " not divisible by patch " +
                     std::to_string(patch));
  int gh = H / patch, gw = W / patch;
  int N = gh * gw;
  int dim = patch * patch * C;
  Tensor<float> out = Tensor<float>::zeros({N, dim});
  const float* px = image.data();
  float* po = out.data();
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      float* row = po + (size_t(gy) * gw + gx) * dim;
      int i = 0;
      for (int py = 0; py < patch; ++py)
        for (int pxx = 0; pxx < patch; ++pxx)
          for (int c = 0; c < C; ++c)
            row[i++] = px[(size_t(c) * H + gy * patch + py) * W + gx * patch +
                          pxx];
    }
  return out;
}

Tensor<float> unpatchify(const Tensor<float>& patches, int patch, int channels,
                         int H, int W) {
  int gh = H / patch, gw = W / patch;
  if (patches.rank() != 2 || patches.dim(0) != gh * gw ||
      patches.dim(1) != patch * patch * channels)
    throw ShapeError("unpatchify: bad patch matrix " +
                     shape_str(patches.shape()));
  Tensor<float> out = Tensor<float>::zeros({channels, H, W});
  const float* pp = patches.data();
  float* po = out.data();
  int dim = patch * patch * channels;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const float* row = pp + (size_t(gy) * gw + gx) * dim;
      int i = 0;
      for (int py = 0; py < patch; ++py)
        for (int pxx = 0; pxx < patch; ++pxx)
          for (int c = 0; c < channels; ++c)
            po[(size_t(c) * H + gy * patch + py) * W + gx * patch + pxx] =
                row[i++];
    }
  return out;
}

namespace {

struct Palette {
  const char* name;
  float r, g, b;
};

constexpr Palette kColors[8] = {
    {"red", 0.92f, 0.12f, 0.12f},    {"green", 0.10f, 0.75f, 0.22f},
    {"blue", 0.15f, 0.25f, 0.90f},   {"yellow", 0.95f, 0.88f, 0.10f},
    {"orange", 0.95f, 0.55f, 0.10f}, {"purple", 0.55f, 0.15f, 0.75f},
    {"cyan", 0.10f, 0.80f, 0.85f},   {"magenta", 0.90f, 0.15f, 0.75f},
};

const char* loc_row(int cy, int H) {
  if (cy < H / 3) return "top";
  if (cy < 2 * H / 3) return "middle";
  return "bottom";
}
const char* loc_col(int cx, int W) {
  if (cx < W / 3) return "left";
  if (cx < 2 * W / 3) return "center";
  return "right";
}

}  // namespace

Sample synth_sample(uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xda7au));
  int H = cfg.image_size, W = cfg.image_size, C = cfg.channels;
  Sample s;
  s.seed = seed;
  s.image = Tensor<float>::zeros({C, H, W});
  float* px = s.image.data();

  // textured background: two low-frequency waves plus hash noise
  double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
  double phase = rng.uniform(0.0, 6.283);
  float base[3] = {float(rng.uniform(0.3, 0.6)), float(rng.uniform(0.3, 0.6)),
                   float(rng.uniform(0.3, 0.6))};
  uint64_t noise_seed = rng.next_u64();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double wave = 0.08 * std::sin(6.283 * (fx * x + fy * y) / H + phase);
      double n = (double(mix_seed(noise_seed, uint64_t(y) * W + x) >> 40) /
                      double(1 << 24) -
                  0.5) *
                 0.06;
      for (int c = 0; c < C && c < 3; ++c) {
        float v = float(base[c] + wave + n);
        px[(size_t(c) * H + y) * W + x] = std::min(0.85f, std::max(0.15f, v));
      }
    }

  int nshapes = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  std::string caption;
  for (int si = 0; si < nshapes; ++si) {
    const Palette& col = kColors[rng.uniform_int(0, 7)];
    int kind = rng.uniform_int(0, 2);  // 0 square, 1 circle, 2 triangle
    int size = rng.uniform_int(H / 5, 2 * H / 5);
    int x0 = rng.uniform_int(0, W - size);
    int y0 = rng.uniform_int(0, H - size);
    Box b{x0, y0, x0 + size, y0 + size};
    float rgb[3] = {col.r, col.g, col.b};
    auto put = [&](int x, int y) {
      for (int c = 0; c < C && c < 3; ++c)
        px[(size_t(c) * H + y) * W + x] = rgb[c];
    };
    if (kind == 0) {
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) put(x, y);
    } else if (kind == 1) {
      double cx = x0 + (size - 1) / 2.0, cy = y0 + (size - 1) / 2.0;
      double r = size / 2.0;
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) put(x, y);
    } else {
      // upward triangle: apex centered on the top edge of the box
      int rows = size;
      for (int dy = 0; dy < rows; ++dy) {
        double half = (size - 1) / 2.0 * dy / std::max(1, rows - 1);
        int cx = x0 + (size - 1) / 2;
        int lo = int(std::ceil(cx - half)), hi = int(std::floor(cx + half));
        for (int x = std::max(b.x0, lo); x <= std::min(b.x1 - 1, hi); ++x)
          put(x, y0 + dy);
      }
    }
    s.boxes.push_back(b);
    const char* kinds[3] = {"square", "circle", "triangle"};
    int cy = (b.y0 + b.y1) / 2, cx2 = (b.x0 + b.x1) / 2;
    std::string row = loc_row(cy, H), colw = loc_col(cx2, W);
    std::string loc = (row == "middle" && colw == "center")
                          ? "center"
                          : row + " " + colw;
    if (si) caption += " and ";
    caption += std::string(col.name) + " " + kinds[kind] + " " + loc;
  }
  s.caption = caption;
  s.tokens = tokenize(caption, Vocab::builtin(), cfg.max_text_len);
  return s;
}

void write_manifest(const std::string& path, const std::vector<Sample>& set) {
  std::ofstream f(path);
  if (!f) throw IoError("write_manifest: cannot open " + path);
  for (const Sample& s : set) {
    f << s.seed << '\t' << s.caption << '\t';
    for (size_t i = 0; i < s.boxes.size(); ++i) {
      const Box& b = s.boxes[i];
      if (i) f << ';';
      f << b.x0 << ',' << b.y0 << ',' << b.x1 << ',' << b.y1;
    }
    f << '\n';
  }
}

}  // namespace cma
