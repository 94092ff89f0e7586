#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "diffender/common.hpp"

namespace diffender {

enum class CheckpointKind { diffusion, classifier, prompts, idc_token, attack_cache };

std::string to_string(CheckpointKind kind);
CheckpointKind checkpoint_kind_from_string(const std::string& name);

inline constexpr const char* kFormatVersionKey = "format_version";
inline constexpr const char* kFormatVersion = "diffender-ckpt/1";

/// Named arrays plus string metadata.
///
/// On disk: the 8-byte magic "DFCKPT\0\1", a little-endian u64 header length,
/// a JSON header {kind, metadata, arrays:[{name,dtype,shape,offset,nbytes,crc32}]},
/// then the raw array bytes back to back. Arrays and metadata keys are
/// written in sorted order, so identical checkpoints give identical files.
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::diffusion;
  std::map<std::string, torch::Tensor> arrays;
  std::map<std::string, std::string> metadata{{kFormatVersionKey, kFormatVersion}};

  /// Bit-exact comparison of arrays (dtype, shape, bytes) and metadata.
  bool operator==(const Checkpoint& other) const;
};

/// Writes atomically (temp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws MissingArtifactError when absent, FormatError on a bad magic, a
/// missing or different format version, or an array block whose CRC fails.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every parameter and buffer of `module` into `ckpt.arrays`.
void store_module(const torch::nn::Module& module, Checkpoint& ckpt, const std::string& prefix = "");

/// Loads parameters and buffers by name; throws FormatError on missing names
/// or shape mismatch.
void restore_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix = "");

}  // namespace diffender
