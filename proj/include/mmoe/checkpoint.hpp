#pragma once

// Binary checkpoint:
//   "MMOE" | version u32 LE | header length u64 LE | UTF-8 JSON header |
//   zero padding to a 64-byte boundary | tensor payloads.
// The header holds the model config, strategy, step and a tensor index
// {name: {shape, offset}} in parameter order; offsets are relative to the
// start of the payload section and 64-byte aligned. Payloads are raw
// little-endian f32.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mmoe/config.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointAlign = 64;

struct CheckpointMeta {
  StrategyConfig strategy;
  std::int64_t step = 0;
  std::optional<SyntheticTask> task;
  std::optional<std::size_t> seq_len;
};

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const CheckpointMeta& meta);
LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Header only, without materialising tensors.
Json read_checkpoint_header(const std::filesystem::path& path);

// The same framing around a single f32 array, for other binary artifacts.
// The header gains a "count" field holding the number of floats.
std::vector<std::uint8_t> frame_f32(Json header, std::span<const float> payload);
std::pair<Json, std::vector<float>> unframe_f32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mmoe
