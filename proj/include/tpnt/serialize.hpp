#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tpnt/net.hpp"

namespace tpnt {

// Model file layout, little-endian:
//   "TPNT" | u32 version | u32 module count
//   per module: u16 id length, id bytes, u8 kind, u8 frozen, u16 layer count
//     per layer: u8 kind, then
//       conv    : u16 m, u16 D, u16 C, u16 p, f32 weights[m*m*D*C], f32 bias[C]
//       relu    : u8 pseudo mode
//       pools   : u16 k
//       gap     : (nothing)
//       dropout : f32 rate
//       reorder : u16 n, u16 perm[n]
//       rescale : f32 beta
//   per adapter module, in module order: u16 category index, u16 task index
// Modules are written categories, tasks, adapters, each in id order.
inline constexpr std::uint32_t kModelVersion = 1;

std::vector<std::uint8_t> serialize_net(const TransplantNet& net);
TransplantNet deserialize_net(std::span<const std::uint8_t> bytes);

void save_net(const TransplantNet& net, const std::filesystem::path& path);
TransplantNet load_net(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace tpnt
