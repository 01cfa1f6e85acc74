#pragma once

#include <string>

#include "tensor.hpp"

namespace dm {

// 8-bit RGB PNG I/O. Tensors are [3,H,W] with values in [0,1]; writes clamp.
void write_png(const std::string& path, const Tensor& img);
Tensor read_png(const std::string& path);

}  // namespace dm
