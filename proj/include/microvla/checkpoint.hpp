#pragma once

#include <string>
#include <vector>

#include "microvla/tensor.hpp"

namespace microvla {

// Checkpoint container: magic "FVCK", version u32, parameter count u32, then
// per parameter: name length u32 + name bytes + rank u32 + dims (u32 each) +
// row-major 64-bit little-endian values.
void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params);

// Loads values into the given parameters, matched by name. Every stored
// parameter must exist with an identical shape, and vice versa.
void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params);

}  // namespace microvla
