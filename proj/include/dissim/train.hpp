#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dissim/autodiff.hpp"
#include "dissim/data.hpp"
#include "dissim/nn.hpp"
#include "dissim/optim.hpp"
#include "dissim/repsim.hpp"

namespace dissim {

/// Raised when a training loss or gradient becomes non-finite.
class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct DissimConfig {
    Metric metric = Metric::ExpVar;
    double lambda = 1.0;
    std::vector<int> tap_ids;
    double proj_lr = 0.1;
    int proj_steps = 1;  // projection updates per model update
    int epochs = 250;
    int64_t batch_size = 128;
    double base_lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 5e-4;
    uint64_t seed = 0;
    AugmentPolicy augment;

    void validate() const;
};

/// 1×1 convolution from the concatenated trained-model channels at one tap
/// onto the new model's channels.
struct Projection {
    int tap_id = 0;
    std::vector<int> in_channels;  // one entry per trained model
    Parameter<float> weight;       // [C_U, ΣC_T, 1, 1]
    Parameter<float> bias;         // [C_U]

    int in_total() const { return static_cast<int>(weight.value.extent(1)); }
    int out_channels() const { return static_cast<int>(weight.value.extent(0)); }
    /// weight ⊛ z + bias; parameters are recorded as leaves with
    /// `requires_grad` = track.
    Var<float> apply(Tape<float>& tape, const Var<float>& z, bool track);
};

/// Weights uniform in ±0.1/√fan_in, bias zero.
Projection make_projection(std::span<const int> channels_per_trained_model, int c_out, uint64_t seed,
                           int tap_id = 0);

struct DissimLoss {
    Var<float> loss;  // λ·S, differentiable w.r.t. z_U only
    double sim = 0;
};

/// ẑ_U = proj(concat(z_T)); S(z_U, ẑ_U) for aligned metrics, or
/// S(z_U, concat(z_T)) for LinCKA. Projection parameters are registered on
/// the tape with gradients enabled but the projected target is detached, so
/// their gradient from this term is exactly zero.
DissimLoss dissim_loss(const Var<float>& z_u, std::span<const Tensor<float>> z_t, Projection& proj, Metric metric,
                       double lambda);

/// Value of −S(z_U, proj(concat(z_T))) without updating anything.
double projection_objective(Projection& proj, const Tensor<float>& z_u, std::span<const Tensor<float>> z_t,
                            Metric metric);

/// One SGD step of the projection on −S(z_U, proj(concat(z_T))) with z_U
/// constant. Returns the objective before the update.
double projection_update(Projection& proj, const Tensor<float>& z_u, std::span<const Tensor<float>> z_t, Metric metric,
                         double lr);

struct TapStats {
    int tap_id = 0;
    double sim = 0;
    double proj_objective = 0;  // before this step's projection update
    double act_var_mean = 0;    // per-channel variance of z_U, averaged
    double act_var_min = 0;
};

struct StepStats {
    int64_t step = 0;
    int epoch = 0;
    double lr = 0;
    double task_loss = 0;
    double total_loss = 0;
    double train_acc = 0;  // on this batch
    std::vector<TapStats> taps;
    double proj_grad_absmax = 0;  // projection gradient from the model update
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double train_acc = 0;
    double test_acc = 0;
};

/// Trains one model U against frozen models with one projection per tap.
/// With no frozen models (or λ = 0 and no taps) steps are plain
/// cross-entropy steps.
class DissimTrainer {
   public:
    DissimTrainer(Model& model, std::vector<Model*> frozen, const DissimConfig& cfg, uint64_t seed);

    StepStats step(const Batch& batch, double lr);

    std::vector<Projection>& projections() { return projs_; }
    bool regularized() const { return !projs_.empty(); }

   private:
    Model* model_;
    std::vector<Model*> frozen_;
    DissimConfig cfg_;
    Sgd<float> opt_;
    std::vector<Projection> projs_;
    std::vector<Parameter<float>*> params_;
    int64_t steps_ = 0;
};

struct TrainHooks {
    std::function<void(const StepStats&)> on_step;
    std::function<void(const EpochStats&)> on_epoch;
};

struct TrainResult {
    Model model;
    uint64_t seed = 0;
    std::vector<EpochStats> epochs;
    std::vector<Projection> projections;
};

/// Full training run of one model with cosine learning-rate annealing.
TrainResult train_model(const ModelConfig& mcfg, uint64_t seed, std::vector<Model*> frozen, const DissimConfig& cfg,
                        const DatasetPair& data, const TrainHooks& hooks = {});

/// Trains `n_models` sequentially; model i (0-based) uses seed cfg.seed + i
/// and is regularized against models 0..i-1. Model 0 is unregularized.
/// `hooks_for(i)` supplies per-model hooks; `on_model(i, result)` runs as
/// soon as model i is trained.
std::vector<TrainResult> train_sequence(const ModelConfig& mcfg, const DissimConfig& cfg, int n_models,
                                        const DatasetPair& data,
                                        const std::function<TrainHooks(int)>& hooks_for = {},
                                        const std::function<void(int, TrainResult&)>& on_model = {});

/// Eval-mode logits [N, classes] for every sample of `ds`, in index order.
Tensor<float> predict_logits(Model& model, const Dataset& ds, int64_t batch_size = 256);

double accuracy(const Tensor<float>& logits, std::span<const int> labels);

}  // namespace dissim
