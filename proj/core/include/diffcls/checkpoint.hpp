#pragma once

#include <filesystem>
#include <string>

#include "diffcls/config.hpp"
#include "diffcls/layers.hpp"
#include "diffcls/networks.hpp"

namespace diffcls {

enum class CheckpointKind { Guidance, Diffusion };

std::string to_string(CheckpointKind kind);

/// Metadata stored in the JSON manifest of a checkpoint.
struct CheckpointInfo {
  CheckpointKind kind = CheckpointKind::Diffusion;
  RunConfig config;
  std::string config_hash;
  std::string guidance_hash;
  ImageShape image;
  std::size_t classes = 2;
  std::vector<std::string> class_names;
};

/// Writes `path` (binary tensor blob: "CKPT", u32 version, u32 count, then per
/// tensor u32 name length, name, u32 rank, u64 dims, f32 values) and a JSON
/// manifest with the same stem and a .json extension.
void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info,
                     const StateList& state);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Copies every tensor of the blob into `state`. Names and shapes must match
/// exactly; missing or surplus tensors raise FormatError.
void load_checkpoint_state(const std::filesystem::path& path, StateList& state);

std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& path);

/// Rounds every value to f32, as if saved and reloaded.
void quantize_state(StateList& state);

}  // namespace diffcls
