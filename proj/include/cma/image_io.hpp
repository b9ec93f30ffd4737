// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "cma/tensor.hpp"

namespace cma {

// Binary PPM (P6, maxval 255). Images are (C,H,W) floats in [0,1]; C must be
// 1 or 3 on write (grayscale is expanded), always 3 on read.
void write_ppm(const std::string& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::string& path);

}  // namespace cma
