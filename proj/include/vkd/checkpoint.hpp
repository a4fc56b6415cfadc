#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vkd/encoder.hpp"

namespace vkd {

// Bit-exact tensor container: magic "MDST", u32 version, u32 tensor count,
// then per tensor a u16-length UTF-8 name, u8 rank, u64 dims, and raw
// little-endian 32-bit floats.
struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

std::vector<NamedTensor> snapshot(const ParamRegistry& registry);
// writes values back into an existing registry; names and shapes must match
void restore(ParamRegistry& registry, const std::vector<NamedTensor>& tensors);

void save_registry(const std::string& path, const ParamRegistry& registry);
void load_registry(const std::string& path, ParamRegistry& registry);

}  // namespace vkd
