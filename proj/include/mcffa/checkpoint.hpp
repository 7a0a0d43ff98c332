#pragma once

// Binary checkpoint files (.mcff).
//
// Layout, little-endian:
//   "MCFF"  u32 version  u32 tensor_count
//   per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank], f32 values
//   u32 metadata_len, metadata bytes ("key=value\n" lines)
//   u32 CRC-32 of every preceding byte

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcffa/blocks.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kCheckpointExtension = ".mcff";

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;
  // Insertion order is preserved, unknown keys included.
  std::vector<std::pair<std::string, std::string>> metadata;

  const CheckpointTensor* find(const std::string& name) const;
  std::optional<std::string> meta(const std::string& key) const;
  void set_meta(const std::string& key, const std::string& value);
};

std::uint32_t crc32_of(std::string_view bytes);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

// Writes to a sibling temporary file, then renames it over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from(const ParameterList& params,
                           std::vector<std::pair<std::string, std::string>> metadata = {});

// Copies every tensor into the identically named parameter. Any missing,
// extra or differently shaped tensor raises CheckpointMismatch.
void load_parameters(const Checkpoint& ckpt, const ParameterList& params);

// A model parameter named to_prefix + rest reads checkpoint tensor
// from_prefix + rest. The first matching rule wins.
struct NameMapRule {
  std::string from_prefix;
  std::string to_prefix;
};

std::vector<NameMapRule> parse_name_map(const std::string& spec);  // "from=to,from=to"

struct ImportSummary {
  std::vector<std::string> loaded;   // model names copied
  std::vector<std::string> skipped;  // mapped, present, but shaped differently
  std::vector<std::string> missing;  // mapped, absent from the checkpoint
};

// Parameters that no rule covers are left untouched. In strict mode any
// skipped or missing entry raises CheckpointMismatch before anything is copied.
ImportSummary import_partial(const Checkpoint& ckpt, const ParameterList& params,
                             const std::vector<NameMapRule>& rules, bool strict = false);

}  // namespace mcffa
