#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dissim/autodiff.hpp"

namespace dissim {

class ModelError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// Architecture of a CIFAR-style ResNet: a 3×3 stem followed by four stages
/// of residual units. `block_depths[s]` units in stage s, each emitting
/// `block_channels[s]` channels; stages 2–4 halve the spatial extent.
struct ModelConfig {
    std::string preset = "custom";
    std::array<int, 4> block_depths{2, 2, 2, 2};
    std::array<int, 4> block_channels{64, 128, 256, 512};
    bool bottleneck = false;
    int num_classes = 10;
    std::array<int, 3> input_shape{3, 32, 32};

    void validate() const;
    int stem_channels() const { return bottleneck ? block_channels[0] / 4 : block_channels[0]; }
    bool operator==(const ModelConfig&) const = default;
};

/// Presets: "resnet_s" (desk scale), "resnet18", "resnet34", "resnet101".
ModelConfig preset_config(std::string_view name, int num_classes = 10);
std::vector<std::string> preset_names();

/// A pre-ReLU capture point at the output of a residual unit (after the
/// residual addition). Ids run 1..k in depth order.
struct TapPoint {
    int id = 0;
    int channels = 0;
    int height = 0;
    int width = 0;
    int block_index = 0;  // stage, 1..4
    int unit_index = 0;   // unit within the stage, 0-based
};

enum class Mode { Train, Eval };

struct ForwardResult {
    Var<float> logits;
    std::map<int, Var<float>> taps;
};

struct NamedTensor {
    std::string name;
    Tensor<float>* tensor;
};

class Model {
   public:
    Model() = default;

    const ModelConfig& config() const { return cfg_; }
    const std::vector<TapPoint>& taps() const { return taps_; }
    const TapPoint& tap(int id) const;
    int num_taps() const { return static_cast<int>(taps_.size()); }

    /// Runs the network on `batch` [B,C,H,W]. Representations at `tap_ids`
    /// are returned as recorded variables; they are observers and do not alter
    /// the logits. With `track_params` false the parameters enter the tape as
    /// constants (frozen model).
    ForwardResult forward(Tape<float>& tape, const Tensor<float>& batch, std::span<const int> tap_ids, Mode mode,
                          bool track_params = true);

    /// Trainable parameters in a stable order.
    std::vector<Parameter<float>*> parameters();
    std::vector<const Parameter<float>*> parameters() const;

    /// Parameters followed by batch-norm running statistics, all by name.
    std::vector<NamedTensor> state();

    friend Model build_model(const ModelConfig& cfg, uint64_t seed);

   private:
    struct ConvBn {
        Parameter<float> weight;
        Parameter<float> gamma;
        Parameter<float> beta;
        BatchNormState<float> bn;
        int stride = 1;
        int padding = 0;
    };
    struct Unit {
        std::vector<ConvBn> path;
        std::optional<ConvBn> shortcut;
        int tap_id = 0;
    };

    static Var<float> apply(Tape<float>& tape, ConvBn& cb, const Var<float>& x, Mode mode, bool track);
    template <typename Fn>
    void for_each_conv(Fn&& fn);

    ModelConfig cfg_;
    ConvBn stem_;
    std::vector<Unit> units_;
    Parameter<float> fc_weight_;
    Parameter<float> fc_bias_;
    std::vector<TapPoint> taps_;
};

/// Builds a model with deterministic initialization: Kaiming-normal fan-in
/// convolution weights, unit/zero batch-norm affine, zero biases.
Model build_model(const ModelConfig& cfg, uint64_t seed);

}  // namespace dissim
