#include "dissim/nn.hpp"

#include <cmath>
#include <random>

namespace dissim {

void ModelConfig::validate() const {
    for (int s = 0; s < 4; ++s) {
        if (block_depths[s] < 1) throw ModelError("block_depths must be positive");
        if (block_channels[s] < 1) throw ModelError("block_channels must be positive");
        if (bottleneck && block_channels[s] % 4 != 0) {
            throw ModelError("bottleneck block_channels must be divisible by 4");
        }
    }
    if (num_classes < 2) throw ModelError("num_classes must be at least 2");
    if (input_shape[0] < 1) throw ModelError("input channels must be positive");
    if (input_shape[1] < 8 || input_shape[2] < 8 || input_shape[1] % 8 != 0 || input_shape[2] % 8 != 0) {
        throw ModelError("input height/width must be positive multiples of 8");
    }
}

ModelConfig preset_config(std::string_view name, int num_classes) {
    ModelConfig cfg;
    cfg.preset = std::string(name);
    cfg.num_classes = num_classes;
    if (name == "resnet_s") {
        cfg.block_depths = {2, 2, 2, 2};
        cfg.block_channels = {16, 32, 64, 128};
    } else if (name == "resnet18") {
        cfg.block_depths = {2, 2, 2, 2};
        cfg.block_channels = {64, 128, 256, 512};
    } else if (name == "resnet34") {
        cfg.block_depths = {3, 4, 6, 3};
        cfg.block_channels = {64, 128, 256, 512};
    } else if (name == "resnet101") {
        cfg.block_depths = {3, 4, 23, 3};
        cfg.block_channels = {256, 512, 1024, 2048};
        cfg.bottleneck = true;
    } else {
        throw ModelError("unknown model preset '" + std::string(name) + "'");
    }
    return cfg;
}

std::vector<std::string> preset_names() { return {"resnet_s", "resnet18", "resnet34", "resnet101"}; }

namespace {

Tensor<float> kaiming_normal(const Shape& shape, std::mt19937_64& rng) {
    const int64_t fan_in = shape_numel(shape) / shape[0];
    std::normal_distribution<float> nd(0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

}  // namespace

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.cfg_ = cfg;

    auto make = [&](const std::string& prefix, int cin, int cout, int k, int stride) {
        Model::ConvBn cb;
        cb.weight = Parameter<float>(prefix + ".conv.weight",
                                     kaiming_normal(Shape{cout, cin, k, k}, rng));
        cb.gamma = Parameter<float>(prefix + ".bn.weight", Tensor<float>(Shape{cout}, 1.0f));
        cb.beta = Parameter<float>(prefix + ".bn.bias", Tensor<float>(Shape{cout}, 0.0f));
        cb.bn = BatchNormState<float>(cout);
        cb.stride = stride;
        cb.padding = k / 2;
        return cb;
    };

    int in_ch = cfg.stem_channels();
    m.stem_ = make("stem", cfg.input_shape[0], in_ch, 3, 1);
    int h = cfg.input_shape[1];
    int w = cfg.input_shape[2];
    int tap_id = 0;
    for (int s = 0; s < 4; ++s) {
        const int out_ch = cfg.block_channels[s];
        for (int u = 0; u < cfg.block_depths[s]; ++u) {
            const int stride = (s > 0 && u == 0) ? 2 : 1;
            const std::string prefix = "layer" + std::to_string(s + 1) + "." + std::to_string(u);
            Model::Unit unit;
            if (cfg.bottleneck) {
                const int mid = out_ch / 4;
                unit.path.push_back(make(prefix + ".c1", in_ch, mid, 1, 1));
                unit.path.push_back(make(prefix + ".c2", mid, mid, 3, stride));
                unit.path.push_back(make(prefix + ".c3", mid, out_ch, 1, 1));
            } else {
                unit.path.push_back(make(prefix + ".c1", in_ch, out_ch, 3, stride));
                unit.path.push_back(make(prefix + ".c2", out_ch, out_ch, 3, 1));
            }
            if (stride != 1 || in_ch != out_ch) unit.shortcut = make(prefix + ".shortcut", in_ch, out_ch, 1, stride);
            h /= stride;
            w /= stride;
            unit.tap_id = ++tap_id;
            m.taps_.push_back(TapPoint{tap_id, out_ch, h, w, s + 1, u});
            m.units_.push_back(std::move(unit));
            in_ch = out_ch;
        }
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch));
    std::uniform_real_distribution<float> ud(static_cast<float>(-bound), static_cast<float>(bound));
    Tensor<float> fc(Shape{in_ch, cfg.num_classes});
    for (auto& v : fc.data()) v = ud(rng);
    m.fc_weight_ = Parameter<float>("fc.weight", std::move(fc));
    m.fc_bias_ = Parameter<float>("fc.bias", Tensor<float>(Shape{1, cfg.num_classes}, 0.0f));
    return m;
}

const TapPoint& Model::tap(int id) const {
    if (id < 1 || id > num_taps()) {
        throw ModelError("unknown tap id " + std::to_string(id) + " (model has taps 1.." + std::to_string(num_taps()) +
                         ")");
    }
    return taps_[static_cast<size_t>(id - 1)];
}

Var<float> Model::apply(Tape<float>& tape, ConvBn& cb, const Var<float>& x, Mode mode, bool track) {
    auto w = tape.param(cb.weight, track);
    auto g = tape.param(cb.gamma, track);
    auto b = tape.param(cb.beta, track);
    return batch_norm(conv2d(x, w, cb.stride, cb.padding), g, b, cb.bn, mode == Mode::Train);
}

ForwardResult Model::forward(Tape<float>& tape, const Tensor<float>& batch, std::span<const int> tap_ids, Mode mode,
                             bool track_params) {
    const Shape& s = batch.shape();
    if (s.size() != 4 || s[1] != cfg_.input_shape[0] || s[2] != cfg_.input_shape[1] || s[3] != cfg_.input_shape[2]) {
        throw ModelError("input batch " + shape_str(s) + " does not match model input shape");
    }
    std::vector<bool> wanted(taps_.size() + 1, false);
    for (int id : tap_ids) {
        tap(id);
        wanted[static_cast<size_t>(id)] = true;
    }

    ForwardResult out;
    auto x = relu(apply(tape, stem_, tape.constant(batch), mode, track_params));
    for (auto& unit : units_) {
        auto h = x;
        for (size_t i = 0; i < unit.path.size(); ++i) {
            h = apply(tape, unit.path[i], h, mode, track_params);
            if (i + 1 < unit.path.size()) h = relu(h);
        }
        auto skip = unit.shortcut ? apply(tape, *unit.shortcut, x, mode, track_params) : x;
        auto z = add(h, skip);
        if (wanted[static_cast<size_t>(unit.tap_id)]) out.taps.emplace(unit.tap_id, z);
        x = relu(z);
    }
    auto pooled = mean(x, {2, 3});  // [B, C]
    auto logits = matmul(pooled, tape.param(fc_weight_, track_params));
    out.logits = add(logits, tape.param(fc_bias_, track_params));
    return out;
}

template <typename Fn>
void Model::for_each_conv(Fn&& fn) {
    fn(stem_);
    for (auto& unit : units_) {
        for (auto& cb : unit.path) fn(cb);
        if (unit.shortcut) fn(*unit.shortcut);
    }
}

std::vector<Parameter<float>*> Model::parameters() {
    std::vector<Parameter<float>*> out;
    for_each_conv([&](ConvBn& cb) {
        out.push_back(&cb.weight);
        out.push_back(&cb.gamma);
        out.push_back(&cb.beta);
    });
    out.push_back(&fc_weight_);
    out.push_back(&fc_bias_);
    return out;
}

std::vector<const Parameter<float>*> Model::parameters() const {
    auto ps = const_cast<Model*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

std::vector<NamedTensor> Model::state() {
    std::vector<NamedTensor> out;
    for (auto* p : parameters()) out.push_back({p->name, &p->value});
    for_each_conv([&](ConvBn& cb) {
        const std::string prefix = cb.gamma.name.substr(0, cb.gamma.name.size() - std::string(".weight").size());
        out.push_back({prefix + ".running_mean", &cb.bn.running_mean});
        out.push_back({prefix + ".running_var", &cb.bn.running_var});
    });
    return out;
}

}  // namespace dissim
