#pragma once

#include <string>

#include "mism/model.hpp"

namespace mism {

struct Checkpoint {
    ModelConfig config;
    ModelParameters params;
};

// Binary format: magic "MISM", u32 version, u64 config-JSON length + bytes
// (canonical key-sorted JSON), u64 parameter count, then per parameter:
// u32 name length, name bytes, u32 rank, u64 extents, little-endian fp32
// payload. Parameters are written in sorted name order.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParameters& params);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mism
