#pragma once

#include <filesystem>
#include <string>

#include "ntpseg/config.hpp"
#include "ntpseg/trainer.hpp"

namespace ntpseg {

// "NTPSEG01", u64 little-endian header length, JSON header (config, tensor
// index with byte offsets, training state, HET memory), then raw
// little-endian f32 data: parameters followed by adam.m/* and adam.v/*.
inline constexpr char kCheckpointMagic[9] = "NTPSEG01";

std::string encode_checkpoint(const RunConfig& cfg, const TrainState& state);
void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                     const TrainState& state);

struct LoadedCheckpoint {
  RunConfig config;
  TrainState state;
};
LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ntpseg
