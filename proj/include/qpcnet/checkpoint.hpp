#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "qpcnet/nn.hpp"

namespace qpcnet::nn {

// QDM1 checkpoint, little-endian:
//   "QDM1" | u32 version | u32 input_len | u32 kernel | u32 conv1_filters
//   | u32 conv2_filters | u32 dense_units | u32 classes | f64 dropout_rate
//   | parameter blocks as f32 in declaration order
//   | u8 has_optimizer [ | u64 step | f64 lr, beta1, beta2, epsilon
//   | first-moment blocks f32 | second-moment blocks f32 ]
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    Parameters<float> params;
    std::optional<AdamState<float>> optimizer;

    bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qpcnet::nn
