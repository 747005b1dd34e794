#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "dissim/data.hpp"
#include "dissim/nn.hpp"
#include "dissim/train.hpp"
#include "json.hpp"

namespace dissim {

/// Invalid or unreadable-as-JSON run configuration. The message names the
/// offending field.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetSpec {
    std::string kind = "synth";  // synth | cifar10 | cifar100
    std::string root;            // empty: $DISSIM_DATA_DIR
    std::string cifar100_labels = "fine";
    SynthSpec synth;

    int num_classes() const;
    int side() const;
    bool operator==(const DatasetSpec&) const;
};

struct RunConfig {
    int schema_version = kConfigSchemaVersion;
    DatasetSpec dataset;
    std::string preset = "resnet_s";
    DissimConfig training;  // training.seed is ignored in favour of `seed`
    int n_models = 1;
    std::string output_dir = "run";
    uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;
    ModelConfig model_config() const;
    DissimConfig dissim_config() const;
};

/// Every field, defaults included.
nlohmann::json to_json(const RunConfig& cfg);
/// Rejects unknown keys and wrong types. A "resolved" section is ignored.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a 64 of the compact serialization without output_dir, as 16 hex
/// digits.
std::string config_hash(const RunConfig& cfg);

/// to_json(cfg) plus a "resolved" section: hash, tap layout, model seeds,
/// data root, ensemble rule and recorded deviations.
nlohmann::json resolved_config(const RunConfig& cfg);

/// Dataset root after the $DISSIM_DATA_DIR fallback; empty for synth.
std::filesystem::path dataset_root(const DatasetSpec& spec);
DatasetPair load_dataset(const DatasetSpec& spec);

}  // namespace dissim
