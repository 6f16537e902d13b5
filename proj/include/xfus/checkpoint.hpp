// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xfus/tensor.hpp"

namespace xfus {

inline constexpr std::uint32_t kArchiveVersion = 1;

enum class Role : std::uint8_t { base, dsa_expert, rl_expert, merged };

const char* to_string(Role r);
Role role_from_string(std::string_view s);

struct MergeSource {
  std::string role;
  std::string fingerprint;
  bool operator==(const MergeSource&) const = default;
};

struct MergeInfo {
  std::string method;
  double density = 0.0;
  double eta = 0.0;
  std::vector<MergeSource> sources;
  bool operator==(const MergeInfo&) const = default;
};

/// Provenance metadata embedded in every archive. Fingerprints are stored as
/// 16-digit lowercase hex in the JSON encoding so no 64-bit value passes
/// through a JSON number.
struct Manifest {
  Role role = Role::base;
  std::optional<std::string> domain;
  std::uint64_t base_fingerprint = 0;
  std::uint64_t training_config_digest = 0;
  std::optional<int> lora_rank;
  std::optional<double> lora_alpha;
  std::optional<MergeInfo> merge;
  bool operator==(const Manifest&) const = default;
};

std::string fingerprint_hex(std::uint64_t v);
std::uint64_t fingerprint_from_hex(std::string_view s);

/// Single-file tensor archive, format "XFUS" v1. Layout, all integers
/// little-endian:
///   magic "XFUS" | version u32 | tensor_count u32 | manifest_len u32 |
///   manifest JSON | index records | zero pad | data region.
/// Index records are sorted by name: name_len u32, name bytes, dtype u8,
/// rank u8, extents u64 each, absolute byte offset u64, byte length u64.
/// The data region starts at the first 64-byte boundary past the index;
/// scalars are packed tightly in index order (f32 4 bytes, f64 8 bytes).
/// Bytes are a pure function of (map, manifest).
void write_archive(const NamedTensorMap& map, const Manifest& manifest,
                   const std::filesystem::path& path);

std::pair<NamedTensorMap, Manifest> read_archive(const std::filesystem::path& path);

}  // namespace xfus
