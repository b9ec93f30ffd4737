// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: magic "CMA1", little-endian, a named tensor table plus
// step counter and a config echo. save(load(x)) is byte-identical.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cma/common.hpp"

namespace cma {

struct TensorBlob {
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  uint32_t version = 1;
  int64_t step = 0;
  std::string config_echo;
  std::vector<std::pair<std::string, TensorBlob>> tensors;  // ordered

  const TensorBlob* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cma
