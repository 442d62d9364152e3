#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace echotune {

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
};

// Self-describing binary container: little-endian layout, f64 values, one
// trailing FNV-1a checksum over everything before it. load(save(x)) is
// byte-identical.
struct Checkpoint {
    uint32_t version = 1;
    uint64_t config_hash = 0;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
    int64_t total_values() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Serialized bytes (used by save and by byte-level tests).
std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

uint64_t fnv1a64_bytes(const uint8_t* data, size_t n);

} // namespace echotune
