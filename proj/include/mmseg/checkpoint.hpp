#pragma once

#include <string>
#include <vector>

#include "mmseg/network.hpp"

namespace mmseg {

struct Checkpoint {
  ModelParams<float> params;
  ModelConfig config;
};

/// MMCK v1: "MMCK", u32 version, u32 length + canonical config text, then per tensor
/// u32 name length, name, u32 ndim, u32 dims..., f32 payload; tensors run to end of file.
std::vector<char> encode_checkpoint(const ModelParams<float>& params, const ModelConfig& config);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

void save_checkpoint(const std::string& path, const ModelParams<float>& params, const ModelConfig& config);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mmseg
