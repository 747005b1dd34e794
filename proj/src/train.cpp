#include "dissim/train.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dissim {

namespace {

constexpr uint64_t kShuffleStream = 1'000'000;
constexpr uint64_t kProjectionStream = 2'000'000;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("dissim config: " + msg);
}

Var<float> concat_targets(Tape<float>& tape, std::span<const Tensor<float>> z_t) {
    if (z_t.empty()) throw ShapeError("dissim: no trained-model representations");
    std::vector<Var<float>> parts;
    for (const auto& z : z_t) parts.push_back(tape.constant(z));
    return parts.size() == 1 ? parts[0] : concat_channels(parts);
}

void check_compatible(const Shape& u, std::span<const Tensor<float>> z_t, const Projection& proj) {
    int64_t total = 0;
    for (const auto& z : z_t) {
        const Shape& s = z.shape();
        if (s.size() != 4 || u.size() != 4 || s[0] != u[0] || s[2] != u[2] || s[3] != u[3]) {
            throw ShapeError("dissim: representation " + shape_str(s) + " does not share B,H,W with " + shape_str(u));
        }
        total += s[1];
    }
    if (total != proj.in_total() || u[1] != proj.out_channels()) {
        throw ShapeError("dissim: projection " + shape_str(proj.weight.value.shape()) + " does not map " +
                         std::to_string(total) + " to " + std::to_string(u[1]) + " channels");
    }
}

Var<float> projected_similarity(Tape<float>& tape, Projection& proj, const Tensor<float>& z_u,
                                std::span<const Tensor<float>> z_t, Metric metric, bool track) {
    check_compatible(z_u.shape(), z_t, proj);
    auto zhat = proj.apply(tape, concat_targets(tape, z_t), track);
    return similarity(metric, tape.constant(z_u), zhat);
}

void channel_variance(const Tensor<float>& z, double& mean_var, double& min_var) {
    const int64_t B = z.extent(0), C = z.extent(1), HW = static_cast<int64_t>(z.size()) / (B * C);
    const double n = static_cast<double>(B * HW);
    double acc = 0;
    min_var = INFINITY;
    for (int64_t c = 0; c < C; ++c) {
        double s = 0, s2 = 0;
        for (int64_t b = 0; b < B; ++b) {
            const float* p = z.ptr() + (b * C + c) * HW;
            for (int64_t k = 0; k < HW; ++k) {
                s += p[k];
                s2 += static_cast<double>(p[k]) * p[k];
            }
        }
        const double m = s / n;
        const double v = std::max(0.0, s2 / n - m * m);
        acc += v;
        min_var = std::min(min_var, v);
    }
    mean_var = acc / static_cast<double>(C);
}

double batch_accuracy(const Tensor<float>& logits, std::span<const int> labels) { return accuracy(logits, labels); }

}  // namespace

void DissimConfig::validate() const {
    require(std::isfinite(lambda) && lambda >= 0, "lambda must be finite and >= 0");
    require(lambda == 0 || !tap_ids.empty(), "tap_ids must be non-empty when lambda > 0");
    require(std::set<int>(tap_ids.begin(), tap_ids.end()).size() == tap_ids.size(), "tap_ids must be distinct");
    require(proj_lr > 0 && std::isfinite(proj_lr), "proj_lr must be positive");
    require(proj_steps >= 1, "proj_steps must be >= 1");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= kMinBatch, "batch_size must be >= " + std::to_string(kMinBatch));
    require(base_lr >= 0 && std::isfinite(base_lr), "base_lr must be >= 0");
    require(momentum >= 0 && momentum < 1, "momentum must be in [0, 1)");
    require(weight_decay >= 0, "weight_decay must be >= 0");
}

Var<float> Projection::apply(Tape<float>& tape, const Var<float>& z, bool track) {
    auto w = tape.param(weight, track);
    auto b = tape.param(bias, track);
    return add(conv2d(z, w, 1, 0), reshape(b, Shape{1, out_channels(), 1, 1}));
}

Projection make_projection(std::span<const int> channels, int c_out, uint64_t seed, int tap_id) {
    if (channels.empty()) throw std::invalid_argument("make_projection: no trained-model channels");
    if (c_out < 1) throw std::invalid_argument("make_projection: output channels must be positive");
    int total = 0;
    for (int c : channels) {
        if (c < 1) throw std::invalid_argument("make_projection: channel counts must be positive");
        total += c;
    }
    Projection p;
    p.tap_id = tap_id;
    p.in_channels.assign(channels.begin(), channels.end());
    std::mt19937_64 rng(seed);
    const double bound = 0.1 / std::sqrt(static_cast<double>(total));
    std::uniform_real_distribution<float> ud(static_cast<float>(-bound), static_cast<float>(bound));
    Tensor<float> w(Shape{c_out, total, 1, 1});
    for (auto& v : w.data()) v = ud(rng);
    const std::string prefix = "proj.tap" + std::to_string(tap_id);
    p.weight = Parameter<float>(prefix + ".weight", std::move(w));
    p.bias = Parameter<float>(prefix + ".bias", Tensor<float>(Shape{c_out}, 0.0f));
    return p;
}

DissimLoss dissim_loss(const Var<float>& z_u, std::span<const Tensor<float>> z_t, Projection& proj, Metric metric,
                       double lambda) {
    check_compatible(z_u.shape(), z_t, proj);
    Tape<float>& tape = *z_u.tape();
    auto cat = concat_targets(tape, z_t);
    auto zhat = detach(proj.apply(tape, cat, true));
    auto s = similarity(metric, z_u, metric == Metric::LinCKA ? cat : zhat);
    return {scale(s, static_cast<float>(lambda)), static_cast<double>(s.value().item())};
}

double projection_objective(Projection& proj, const Tensor<float>& z_u, std::span<const Tensor<float>> z_t,
                            Metric metric) {
    Tape<float> tape;
    return -static_cast<double>(projected_similarity(tape, proj, z_u, z_t, metric, false).value().item());
}

double projection_update(Projection& proj, const Tensor<float>& z_u, std::span<const Tensor<float>> z_t, Metric metric,
                         double lr) {
    Tape<float> tape;
    auto obj = scale(projected_similarity(tape, proj, z_u, z_t, metric, true), -1.0f);
    const double before = obj.value().item();
    tape.backward(obj);
    Parameter<float>* ps[] = {&proj.weight, &proj.bias};
    Sgd<float>({lr, 0.0, false, 0.0}).step(ps);
    return before;
}

DissimTrainer::DissimTrainer(Model& model, std::vector<Model*> frozen, const DissimConfig& cfg, uint64_t seed)
    : model_(&model),
      frozen_(std::move(frozen)),
      cfg_(cfg),
      opt_(SgdOptions{cfg.base_lr, cfg.momentum, cfg.nesterov, cfg.weight_decay}),
      params_(model.parameters()) {
    cfg_.validate();
    if (frozen_.empty()) return;
    for (int id : cfg_.tap_ids) {
        const TapPoint& tu = model.tap(id);
        std::vector<int> channels;
        for (Model* f : frozen_) {
            const TapPoint& tf = f->tap(id);
            if (tf.height != tu.height || tf.width != tu.width) {
                throw ModelError("tap " + std::to_string(id) + " has different spatial extents across models");
            }
            channels.push_back(tf.channels);
        }
        projs_.push_back(make_projection(channels, tu.channels, derive_seed(seed, kProjectionStream + id), id));
    }
}

StepStats DissimTrainer::step(const Batch& batch, double lr) {
    StepStats st;
    st.step = steps_++;
    st.lr = lr;
    const std::vector<int> ids = regularized() ? cfg_.tap_ids : std::vector<int>{};
    try {
        // Frozen models: eval mode, parameters as constants.
        std::vector<std::vector<Tensor<float>>> z_t(ids.size());
        for (Model* f : frozen_) {
            if (ids.empty()) break;
            Tape<float> t;
            auto out = f->forward(t, batch.images, ids, Mode::Eval, false);
            for (size_t k = 0; k < ids.size(); ++k) z_t[k].push_back(out.taps.at(ids[k]).value());
        }

        Tape<float> tape;
        auto out = model_->forward(tape, batch.images, ids, Mode::Train);
        auto ce = cross_entropy(out.logits, std::span<const int>(batch.labels));
        st.task_loss = ce.value().item();
        st.train_acc = batch_accuracy(out.logits.value(), batch.labels);

        // Projection adversary first, against the detached z_U.
        for (size_t k = 0; k < ids.size(); ++k) {
            const Tensor<float>& zu = out.taps.at(ids[k]).value();
            TapStats ts;
            ts.tap_id = ids[k];
            ts.proj_objective = projection_update(projs_[k], zu, z_t[k], cfg_.metric, cfg_.proj_lr);
            for (int r = 1; r < cfg_.proj_steps; ++r) projection_update(projs_[k], zu, z_t[k], cfg_.metric, cfg_.proj_lr);
            channel_variance(zu, ts.act_var_mean, ts.act_var_min);
            st.taps.push_back(ts);
        }

        auto total = ce;
        if (!ids.empty()) {
            Var<float> reg;
            for (size_t k = 0; k < ids.size(); ++k) {
                const auto& zu = out.taps.at(ids[k]);
                // λ = 0 measures on a detached copy so that the model update is
                // exactly the plain cross-entropy update.
                auto dl = cfg_.lambda > 0 ? dissim_loss(zu, z_t[k], projs_[k], cfg_.metric, cfg_.lambda)
                                          : dissim_loss(detach(zu), z_t[k], projs_[k], cfg_.metric, 0.0);
                st.taps[k].sim = dl.sim;
                reg = k == 0 ? dl.loss : add(reg, dl.loss);
            }
            if (cfg_.lambda > 0) total = add(ce, scale(reg, 1.0f / static_cast<float>(ids.size())));
        }
        st.total_loss = total.value().item();
        if (!std::isfinite(st.total_loss)) throw NumericError("non-finite loss");
        tape.backward(total);

        for (auto& p : projs_) {
            for (const auto* t : {&p.weight.grad, &p.bias.grad}) {
                for (float g : t->data()) st.proj_grad_absmax = std::max(st.proj_grad_absmax, std::abs(double{g}));
            }
        }
        for (auto* p : params_) {
            for (float g : p->grad.data()) {
                if (!std::isfinite(g)) throw NumericError("non-finite gradient for " + p->name);
            }
        }
        opt_.step(params_, lr);
    } catch (const NumericError& e) {
        throw DivergenceError("training diverged at step " + std::to_string(st.step) + " (lr " + std::to_string(lr) +
                              ", last task loss " + std::to_string(st.task_loss) + "): " + e.what());
    }
    return st;
}

double accuracy(const Tensor<float>& logits, std::span<const int> labels) {
    const int64_t N = logits.extent(0), K = logits.extent(1);
    if (static_cast<int64_t>(labels.size()) != N) throw ShapeError("accuracy: label count mismatch");
    int64_t correct = 0;
    for (int64_t i = 0; i < N; ++i) {
        const float* row = logits.ptr() + i * K;
        correct += (std::max_element(row, row + K) - row) == labels[static_cast<size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(N);
}

Tensor<float> predict_logits(Model& model, const Dataset& ds, int64_t batch_size) {
    if (batch_size < 1) throw std::invalid_argument("predict_logits: batch_size must be >= 1");
    const int64_t N = ds.size(), K = model.config().num_classes;
    Tensor<float> out(Shape{N, K});
    for (int64_t b = 0; b < N; b += batch_size) {
        const int64_t e = std::min(N, b + batch_size);
        Tape<float> tape;
        auto logits = model.forward(tape, normalized_images(ds, b, e), {}, Mode::Eval, false).logits.value();
        std::copy(logits.ptr(), logits.ptr() + logits.size(), out.ptr() + b * K);
    }
    return out;
}

TrainResult train_model(const ModelConfig& mcfg, uint64_t seed, std::vector<Model*> frozen, const DissimConfig& cfg,
                        const DatasetPair& data, const TrainHooks& hooks) {
    cfg.validate();
    TrainResult result;
    result.seed = seed;
    Model model = build_model(mcfg, seed);
    {
        DissimTrainer trainer(model, std::move(frozen), cfg, seed);
        const int64_t per_epoch = BatchIterator::train(data.train, cfg.batch_size, 0, cfg.augment).num_batches();
        const int64_t total = per_epoch * cfg.epochs;
        int64_t step = 0;
        for (int e = 0; e < cfg.epochs; ++e) {
            auto it = BatchIterator::train(data.train, cfg.batch_size, derive_seed(seed, kShuffleStream + e), cfg.augment);
            double loss_sum = 0, acc_sum = 0;
            int64_t seen = 0;
            while (auto batch = it.next()) {
                StepStats st = trainer.step(*batch, cosine_lr(step++, total, cfg.base_lr));
                st.epoch = e;
                const auto n = static_cast<double>(batch->labels.size());
                loss_sum += st.task_loss * n;
                acc_sum += st.train_acc * n;
                seen += static_cast<int64_t>(batch->labels.size());
                if (hooks.on_step) hooks.on_step(st);
            }
            EpochStats es;
            es.epoch = e;
            es.train_loss = loss_sum / static_cast<double>(seen);
            es.train_acc = acc_sum / static_cast<double>(seen);
            es.test_acc = accuracy(predict_logits(model, data.test), data.test.labels);
            result.epochs.push_back(es);
            if (hooks.on_epoch) hooks.on_epoch(es);
        }
        result.projections = std::move(trainer.projections());
    }
    result.model = std::move(model);
    return result;
}

std::vector<TrainResult> train_sequence(const ModelConfig& mcfg, const DissimConfig& cfg, int n_models,
                                        const DatasetPair& data, const std::function<TrainHooks(int)>& hooks_for,
                                        const std::function<void(int, TrainResult&)>& on_model) {
    if (n_models < 1) throw std::invalid_argument("train_sequence: n_models must be >= 1");
    cfg.validate();
    std::vector<TrainResult> out;
    out.reserve(static_cast<size_t>(n_models));
    for (int i = 0; i < n_models; ++i) {
        std::vector<Model*> frozen;
        for (auto& r : out) frozen.push_back(&r.model);
        const TrainHooks hooks = hooks_for ? hooks_for(i) : TrainHooks{};
        out.push_back(train_model(mcfg, cfg.seed + static_cast<uint64_t>(i), std::move(frozen), cfg, data, hooks));
        if (on_model) on_model(i, out.back());
    }
    return out;
}

}  // namespace dissim
