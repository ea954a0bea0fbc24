#pragma once

#include <string>

#include "mim/tensor.h"

namespace mim {

// Container format for named tensors (extension .mimt), used for
// checkpoints and teacher weights:
//
//   offset 0: magic "MIMALIGN" (8 bytes)
//   u32 version = 1
//   u32 entry count
//   per entry: u32 name length, name bytes (UTF-8, no NUL),
//              u32 rank, u64 dims..., payload of little-endian f32
//
// All integers little-endian. Roundtrips are bit-exact at the payload level.

void tensor_save(const ParamStore& store, const std::string& path);

// Loaded entries keep file order; the trainable flag is not part of the
// format and defaults to true.
ParamStore tensor_load(const std::string& path);

}  // namespace mim
