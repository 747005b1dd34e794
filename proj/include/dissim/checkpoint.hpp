#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dissim/nn.hpp"
#include "dissim/repsim.hpp"

namespace dissim {

/// Unreadable, corrupt, or incompatible checkpoint file.
class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    ModelConfig model;
    uint64_t seed = 0;
    double lambda = 0;
    Metric metric = Metric::ExpVar;
    std::vector<int> tap_ids;
    int sequence_position = 1;  // 1-based
    int n_models = 1;
    std::string config_hash;

    bool operator==(const CheckpointMeta&) const = default;
};

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};

/// Layout: "DSCK", u32 version, u64 metadata length, metadata JSON,
/// u32 tensor count, then per tensor u32 name length, name, u32 rank,
/// i64 extents, float32 values; finally the CRC-32 of every preceding byte.
/// Integers and floats are little-endian.
void save_checkpoint(Model& model, const CheckpointMeta& meta, const std::filesystem::path& path);

/// With `expected_preset` set, a checkpoint of another preset is rejected.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_preset = std::nullopt);

}  // namespace dissim
