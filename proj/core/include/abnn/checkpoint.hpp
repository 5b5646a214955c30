#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "abnn/networks.hpp"

namespace abnn {

/// Binary checkpoint layout (little-endian):
///
///   "ABNNCKPT"                  8-byte magic
///   u8  format version          kCheckpointVersion
///   u8  scalar width in bytes   8 (float64) or 4 (float32)
///   u32 tensor count
///   per tensor:
///     u32 name length, name bytes (UTF-8, no terminator)
///     u32 rank, u64 extent[rank]
///     scalar[product(extents)] raw IEEE-754 values
inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 over names, shapes and raw value bytes, in order.
std::uint64_t tensor_digest(std::span<const NamedTensor> tensors);
/// Digest of every parameter and running statistic of `model`.
std::uint64_t parameter_digest(const BNNetwork& model);

}  // namespace abnn
