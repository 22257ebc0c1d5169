#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snic/codec.hpp"

namespace snic {

// Content hash over the config block and every parameter tensor (row-major
// float32 little-endian, canonical parameter order).
uint64_t model_fingerprint(const CodecModel<float>& model);

// Checkpoint format: magic "SNICMDL1", config block, parameter tensors as
// row-major 32-bit little-endian reals, then the fingerprint. Round-trips
// bit-exactly.
void save_model(const CodecModel<float>& model, const std::string& path);
CodecModel<float> load_model(const std::string& path);

std::vector<uint8_t> serialize_model(const CodecModel<float>& model);
CodecModel<float> deserialize_model(const std::vector<uint8_t>& bytes);

}  // namespace snic
