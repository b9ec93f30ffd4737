// SPDX-License-Identifier: Apache-2.0

#include "cma/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cma {
namespace {

constexpr char kMagic[4] = {'C', 'M', 'A', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8 & 0xff),
                        (unsigned char)(v >> 16 & 0xff),
                        (unsigned char)(v >> 24 & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_i64(std::ostream& os, int64_t v) {
  uint64_t u = uint64_t(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(u >> (8 * i) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, const float* p, size_t n) {
  // IEEE-754 little-endian words
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, &p[i], 4);
    put_u32(os, bits);
  }
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

int64_t get_i64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint: truncated file");
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= uint64_t(b[i]) << (8 * i);
  return int64_t(u);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f.write(kMagic, 4);
  put_u32(f, ckpt.version);
  put_i64(f, ckpt.step);
  put_u32(f, uint32_t(ckpt.config_echo.size()));
  f.write(ckpt.config_echo.data(), std::streamsize(ckpt.config_echo.size()));
  put_u32(f, uint32_t(ckpt.tensors.size()));
  for (const auto& [name, blob] : ckpt.tensors) {
    put_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put_u32(f, uint32_t(blob.shape.size()));
    for (int d : blob.shape) put_u32(f, uint32_t(d));
    put_f32(f, blob.data.data(), blob.data.size());
  }
  if (!f) throw IoError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = get_u32(f);
  if (ckpt.version != 1)
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(ckpt.version));
  ckpt.step = get_i64(f);
  uint32_t clen = get_u32(f);
  ckpt.config_echo.resize(clen);
  f.read(ckpt.config_echo.data(), clen);
  uint32_t count = get_u32(f);
  ckpt.tensors.reserve(count);
  for (uint32_t t = 0; t < count; ++t) {
    uint32_t nlen = get_u32(f);
    std::string name(nlen, '\0');
    f.read(name.data(), nlen);
    uint32_t nd = get_u32(f);
    TensorBlob blob;
    blob.shape.resize(nd);
    int64_t numel = 1;
    for (uint32_t i = 0; i < nd; ++i) {
      blob.shape[i] = int(get_u32(f));
      numel *= blob.shape[i];
    }
    blob.data.resize(size_t(numel));
    for (int64_t i = 0; i < numel; ++i) {
      uint32_t bits = get_u32(f);
      std::memcpy(&blob.data[size_t(i)], &bits, 4);
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(blob));
  }
  if (!f) throw IoError("checkpoint: truncated file " + path);
  return ckpt;
}

}  // namespace cma
