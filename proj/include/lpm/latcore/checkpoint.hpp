#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lpm/latcore/tensor.hpp"

namespace lpm {

struct NamedTensor {
    std::string name;
    Tensor2D tensor;
};

// On-disk layout:
//   8 bytes   magic "LPMCKPT1"
//   8 bytes   little-endian u64 header length H
//   H bytes   UTF-8 JSON header {"format","version","meta","tensors":[{name,shape,offset}]}
//   rest      little-endian f32 payload, tensors back to back in header order;
//             "offset" counts floats from the start of the payload.
struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const Tensor2D& at(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Little-endian f32 helpers, shared with the KV snapshot writer.
void append_f32_le(std::string& out, std::span<const float> values);
std::vector<float> read_f32_le(const std::string& bytes, std::size_t byte_offset, std::size_t count);

}  // namespace lpm
