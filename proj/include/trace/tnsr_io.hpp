#pragma once

#include <filesystem>
#include <string>

#include "trace/tensor.hpp"

namespace trace {

// "TNSR" binary tensor file: magic bytes `TNSR`, u32 little-endian rank,
// rank x u32 dims, then the row-major f32 little-endian payload. All dataset
// and checkpoint tensors use this format.

void write_tnsr(const std::filesystem::path& path, const Tensor& t);
Tensor read_tnsr(const std::filesystem::path& path);

}  // namespace trace
