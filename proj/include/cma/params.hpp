// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cma/tensor.hpp"

namespace cma {

// Flat registry of named tensors a module exposes for optimization and
// checkpointing. Buffers persist but are not touched by the optimizer
// (e.g. spectral-norm u vectors).
template <class T>
struct ParamSet {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, Tensor<T>>> buffers;

  void param(const std::string& name, Tensor<T> t) {
    params.emplace_back(name, std::move(t));
  }
  void buffer(const std::string& name, Tensor<T> t) {
    buffers.emplace_back(name, std::move(t));
  }
};

}  // namespace cma
