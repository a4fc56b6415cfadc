#include "vkd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "vkd/error.hpp"

namespace vkd {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'S', 'T'};

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i)
    bytes[i] = static_cast<unsigned char>((static_cast<uint64_t>(value) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  uint64_t value = 0;
  for (size_t i = 0; i < sizeof(T); ++i) value |= static_cast<uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(value);
}

void write_f32_le(std::ostream& out, float value) {
  uint32_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  write_le<uint32_t>(out, bits);
}

float read_f32_le(std::istream& in) {
  const uint32_t bits = read_le<uint32_t>(in);
  float value;
  std::memcpy(&value, &bits, sizeof(value));
  return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("io", "cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_le<uint32_t>(out, kCheckpointVersion);
  write_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) fail("io", "tensor name too long: " + t.name);
    write_le<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_le<uint8_t>(out, static_cast<uint8_t>(t.dims.size()));
    int64_t numel = 1;
    for (int d : t.dims) {
      write_le<uint64_t>(out, static_cast<uint64_t>(d));
      numel *= d;
    }
    if (numel != static_cast<int64_t>(t.data.size()))
      fail("io", "tensor data does not match dims for " + t.name);
    for (float v : t.data) write_f32_le(out, v);
  }
  if (!out) fail("io", "short write on checkpoint " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot read checkpoint " + path);
  char magic[4];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail("io", "not a checkpoint file: " + path);
  const uint32_t version = read_le<uint32_t>(in);
  if (version != kCheckpointVersion)
    fail("io", "unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = read_le<uint32_t>(in);
  std::vector<NamedTensor> tensors(count);
  for (auto& t : tensors) {
    const uint16_t name_len = read_le<uint16_t>(in);
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    const uint8_t rank = read_le<uint8_t>(in);
    int64_t numel = 1;
    t.dims.resize(rank);
    for (auto& d : t.dims) {
      d = static_cast<int>(read_le<uint64_t>(in));
      numel *= d;
    }
    if (!in || numel < 0) fail("io", "corrupt checkpoint " + path);
    t.data.resize(static_cast<size_t>(numel));
    for (auto& v : t.data) v = read_f32_le(in);
    if (!in) fail("io", "truncated checkpoint " + path);
  }
  return tensors;
}

std::vector<NamedTensor> snapshot(const ParamRegistry& registry) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(registry.size());
  for (const auto& e : registry.entries())
    tensors.push_back({e.name, e.tensor->dims, e.tensor->data});
  return tensors;
}

void restore(ParamRegistry& registry, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != registry.size())
    fail("registry-mismatch", "checkpoint tensor count does not match model");
  for (const auto& t : tensors) {
    const auto& entry = registry.entry(t.name);
    if (entry.tensor->dims != t.dims)
      fail("registry-mismatch", "checkpoint shape differs for " + t.name);
    entry.tensor->data = t.data;
  }
}

void save_registry(const std::string& path, const ParamRegistry& registry) {
  save_checkpoint(path, snapshot(registry));
}

void load_registry(const std::string& path, ParamRegistry& registry) {
  restore(registry, load_checkpoint(path));
}

}  // namespace vkd
