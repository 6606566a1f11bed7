// Shared checkpoint container: named tensors in little-endian float32 plus a
// config blob and RNG state. Tokenizer checkpoints use magic "OTK1", denoiser
// checkpoints "ODM1".
//
// Saving also rounds the live double-precision tensors through float32, so a
// run that keeps training after a save is bit-identical to a run resumed from
// that file.
#pragma once

#include <string>
#include <vector>

#include "occ4d/nn/tensor.hpp"

namespace occ4d::nn {

struct NamedTensor {
    std::string name;
    Tensor t;
};

struct CheckpointData {
    std::string config_json;
    std::vector<uint8_t> rng_state;
    std::vector<NamedTensor> tensors;
};

// Rounds every element through float32 in place.
void round_to_f32(Tensor& t);

void write_checkpoint(const std::string& path, const char magic[4], const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path, const char expected_magic[4]);

}  // namespace occ4d::nn
