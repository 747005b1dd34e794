#include "dissim/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dissim/diversity.hpp"

namespace dissim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Section {
   public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(field(key) + ": wrong type");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    Section child(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        auto it = j_.find(key);
        return Section(it == j_.end() ? empty : *it, field(key));
    }

    void ignore(const char* key) { seen_.insert(key); }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(field(k.c_str()) + ": unknown field");
        }
    }

    std::string field(const char* key) const { return path_.empty() ? std::string(key) : path_ + "." + key; }

   private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json augment_json(const AugmentPolicy& a) {
    return {{"enabled", a.enabled},
            {"horizontal_flip", a.horizontal_flip},
            {"crop_padding", a.crop_padding},
            {"cutout_size", a.cutout_size}};
}

json tap_json(const TapPoint& t) {
    return {{"id", t.id},         {"channels", t.channels},       {"height", t.height},
            {"width", t.width},   {"block_index", t.block_index}, {"unit_index", t.unit_index}};
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace

int DatasetSpec::num_classes() const {
    if (kind == "cifar10") return 10;
    if (kind == "cifar100") return cifar100_labels == "coarse" ? 20 : 100;
    return synth.classes;
}

int DatasetSpec::side() const { return kind == "synth" ? synth.side : 32; }

bool DatasetSpec::operator==(const DatasetSpec& o) const {
    const SynthSpec &a = synth, &b = o.synth;
    return kind == o.kind && root == o.root && cifar100_labels == o.cifar100_labels && a.seed == b.seed &&
           a.n_train == b.n_train && a.n_test == b.n_test && a.classes == b.classes && a.side == b.side &&
           a.noise == b.noise && a.mix == b.mix;
}

void RunConfig::validate() const {
    check(schema_version == kConfigSchemaVersion,
          "schema_version: unsupported value " + std::to_string(schema_version));
    check(dataset.kind == "synth" || dataset.kind == "cifar10" || dataset.kind == "cifar100",
          "dataset.kind: expected synth, cifar10 or cifar100");
    check(dataset.cifar100_labels == "fine" || dataset.cifar100_labels == "coarse",
          "dataset.cifar100_labels: expected fine or coarse");
    if (dataset.kind == "synth") {
        const SynthSpec& s = dataset.synth;
        check(s.n_train >= kMinBatch, "dataset.synth.n_train: too small");
        check(s.n_test >= kMinBatch, "dataset.synth.n_test: too small");
        check(s.classes >= 2, "dataset.synth.classes: must be >= 2");
        check(s.side >= 8, "dataset.synth.side: must be >= 8");
        check(s.noise >= 0, "dataset.synth.noise: must be >= 0");
        check(s.mix >= 0 && s.mix <= 1, "dataset.synth.mix: must be in [0, 1]");
    }
    check(n_models >= 1, "n_models: must be >= 1");
    check(!output_dir.empty(), "output_dir: must not be empty");
    ModelConfig m;
    try {
        m = model_config();
        m.validate();
    } catch (const ModelError& e) {
        throw ConfigError(std::string("model.preset: ") + e.what());
    }
    try {
        training.validate();
        training.augment.validate(dataset.side());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("training: ") + e.what());
    }
    const int n_taps = std::accumulate(m.block_depths.begin(), m.block_depths.end(), 0);
    for (int id : training.tap_ids) {
        check(id >= 1 && id <= n_taps,
              "training.tap_ids: id " + std::to_string(id) + " outside 1.." + std::to_string(n_taps));
    }
}

DissimConfig RunConfig::dissim_config() const {
    DissimConfig d = training;
    d.seed = seed;
    return d;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m = preset_config(preset, dataset.num_classes());
    m.input_shape = {3, dataset.side(), dataset.side()};
    return m;
}

json to_json(const RunConfig& c) {
    const SynthSpec& s = c.dataset.synth;
    const DissimConfig& t = c.training;
    return {
        {"schema_version", c.schema_version},
        {"seed", c.seed},
        {"n_models", c.n_models},
        {"output_dir", c.output_dir},
        {"dataset",
         {{"kind", c.dataset.kind},
          {"root", c.dataset.root},
          {"cifar100_labels", c.dataset.cifar100_labels},
          {"synth",
           {{"seed", s.seed},
            {"n_train", s.n_train},
            {"n_test", s.n_test},
            {"classes", s.classes},
            {"side", s.side},
            {"noise", s.noise},
            {"mix", s.mix}}}}},
        {"model", {{"preset", c.preset}}},
        {"training",
         {{"metric", std::string(metric_name(t.metric))},
          {"lambda", t.lambda},
          {"tap_ids", t.tap_ids},
          {"proj_lr", t.proj_lr},
          {"proj_steps", t.proj_steps},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"base_lr", t.base_lr},
          {"momentum", t.momentum},
          {"nesterov", t.nesterov},
          {"weight_decay", t.weight_decay},
          {"augment", augment_json(t.augment)}}},
    };
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("schema_version", c.schema_version);
    check(root.has("schema_version"), "schema_version: required");
    root.get("seed", c.seed);
    root.get("n_models", c.n_models);
    root.get("output_dir", c.output_dir);
    root.ignore("resolved");

    Section ds = root.child("dataset");
    ds.get("kind", c.dataset.kind);
    ds.get("root", c.dataset.root);
    ds.get("cifar100_labels", c.dataset.cifar100_labels);
    Section sy = ds.child("synth");
    sy.get("seed", c.dataset.synth.seed);
    sy.get("n_train", c.dataset.synth.n_train);
    sy.get("n_test", c.dataset.synth.n_test);
    sy.get("classes", c.dataset.synth.classes);
    sy.get("side", c.dataset.synth.side);
    sy.get("noise", c.dataset.synth.noise);
    sy.get("mix", c.dataset.synth.mix);
    sy.finish();
    ds.finish();

    Section md = root.child("model");
    md.get("preset", c.preset);
    md.finish();

    Section tr = root.child("training");
    DissimConfig& t = c.training;
    std::string metric(metric_name(t.metric));
    tr.get("metric", metric);
    try {
        t.metric = parse_metric(metric);
    } catch (const std::exception&) {
        throw ConfigError("training.metric: unknown metric '" + metric + "'");
    }
    tr.get("lambda", t.lambda);
    tr.get("tap_ids", t.tap_ids);
    tr.get("proj_lr", t.proj_lr);
    tr.get("proj_steps", t.proj_steps);
    tr.get("epochs", t.epochs);
    tr.get("batch_size", t.batch_size);
    tr.get("base_lr", t.base_lr);
    tr.get("momentum", t.momentum);
    tr.get("nesterov", t.nesterov);
    tr.get("weight_decay", t.weight_decay);
    Section au = tr.child("augment");
    au.get("enabled", t.augment.enabled);
    au.get("horizontal_flip", t.augment.horizontal_flip);
    au.get("crop_padding", t.augment.crop_padding);
    au.get("cutout_size", t.augment.cutout_size);
    au.finish();
    tr.finish();
    root.finish();

    t.seed = c.seed;
    c.validate();
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
    json j = to_json(cfg);
    j.erase("output_dir");
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

json resolved_config(const RunConfig& cfg) {
    json j = to_json(cfg);
    const ModelConfig m = cfg.model_config();
    const Model probe = build_model(m, 0);
    json taps = json::array();
    for (const auto& t : probe.taps()) taps.push_back(tap_json(t));
    json seeds = json::array();
    for (int i = 0; i < cfg.n_models; ++i) seeds.push_back(cfg.seed + static_cast<uint64_t>(i));

    json deviations = json::array();
    deviations.push_back("AutoAugment replaced by horizontal flip, pad-and-crop and cutout");
    if (cfg.dataset.kind == "synth") deviations.push_back("synthetic dataset in place of CIFAR");
    if (cfg.preset == "resnet_s") deviations.push_back("desk-scale ResNet-S preset");

    j["resolved"] = {
        {"config_hash", config_hash(cfg)},
        {"data_root", dataset_root(cfg.dataset).string()},
        {"num_classes", m.num_classes},
        {"input_shape", m.input_shape},
        {"block_depths", m.block_depths},
        {"block_channels", m.block_channels},
        {"bottleneck", m.bottleneck},
        {"tap_convention", "residual unit outputs after the addition, before the ReLU; ids 1..k in depth order"},
        {"taps", taps},
        {"model_seeds", seeds},
        {"model_0_regularized", false},
        {"projection",
         {{"init", "uniform(+-0.1/sqrt(fan_in)) weights, zero bias"},
          {"optimizer", "plain SGD, no momentum or weight decay"},
          {"updates_per_model_step", cfg.training.proj_steps}}},
        {"similarity_evaluation_mode", "eval"},
        {"lr_schedule", "cosine annealing per step from base_lr to 0"},
        {"ensemble_rule", kEnsembleRule},
        {"deviations", deviations},
    };
    return j;
}

fs::path dataset_root(const DatasetSpec& spec) {
    if (spec.kind == "synth") return {};
    if (!spec.root.empty()) return spec.root;
    if (const char* env = std::getenv("DISSIM_DATA_DIR"); env && *env) return env;
    throw ConfigError("dataset.root: empty and DISSIM_DATA_DIR is not set");
}

DatasetPair load_dataset(const DatasetSpec& spec) {
    if (spec.kind == "synth") return synth_split(spec.synth);
    const fs::path root = dataset_root(spec);
    if (spec.kind == "cifar10") return load_cifar10(root);
    return load_cifar100(root, spec.cifar100_labels == "coarse" ? Cifar100Labels::Coarse : Cifar100Labels::Fine);
}

}  // namespace dissim
