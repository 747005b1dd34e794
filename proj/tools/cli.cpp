#include "cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <optional>

#include "dissim/checkpoint.hpp"
#include "dissim/config.hpp"
#include "dissim/diversity.hpp"
#include "dissim/export.hpp"
#include "dissim/train.hpp"

namespace dissim::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kStatsSchemaVersion = 1;

std::string model_name(int index) { return fmt::format("model_{:03d}", index + 1); }

json step_record(int model, const StepStats& s) {
    json taps = json::array();
    for (const auto& t : s.taps) {
        taps.push_back({{"tap_id", t.tap_id},
                        {"sim", t.sim},
                        {"proj_objective", t.proj_objective},
                        {"act_var_mean", t.act_var_mean},
                        {"act_var_min", t.act_var_min}});
    }
    return {{"schema_version", kStatsSchemaVersion},
            {"record", "step"},
            {"model", model},
            {"step", s.step},
            {"epoch", s.epoch},
            {"lr", s.lr},
            {"task_loss", s.task_loss},
            {"total_loss", s.total_loss},
            {"train_acc", s.train_acc},
            {"proj_grad_absmax", s.proj_grad_absmax},
            {"taps", taps}};
}

json epoch_record(int model, const EpochStats& e) {
    return {{"schema_version", kStatsSchemaVersion},
            {"record", "epoch"},
            {"model", model},
            {"epoch", e.epoch},
            {"train_loss", e.train_loss},
            {"train_acc", e.train_acc},
            {"test_acc", e.test_acc}};
}

// Line-delimited log; each record is flushed so a diverged run keeps its
// history.
class StatsLog {
   public:
    explicit StatsLog(const fs::path& path) : path_(path), out_(path, std::ios::trunc) {
        if (!out_) throw IoError("cannot write " + path.string());
    }
    void write(const json& j) {
        out_ << j.dump() << '\n';
        out_.flush();
        if (!out_) throw IoError("write failed for " + path_.string());
    }

   private:
    fs::path path_;
    std::ofstream out_;
};

// Dataset for eval/heatmap: explicit config, else the resolved config
// stored beside the first checkpoint.
RunConfig eval_config(const std::string& config_path, const fs::path& first_ckpt) {
    if (!config_path.empty()) return load_run_config(config_path);
    const fs::path beside = first_ckpt.parent_path() / "resolved_config.json";
    if (!fs::exists(beside)) {
        throw ConfigError("--config: not given and no resolved_config.json next to " + first_ckpt.string());
    }
    return load_run_config(beside);
}

void check_compatible(const ModelConfig& m, const DatasetSpec& ds, const std::string& what) {
    if (m.num_classes != ds.num_classes()) {
        throw ConfigError(what + ": incompatible class counts (model " + std::to_string(m.num_classes) + ", dataset " +
                          std::to_string(ds.num_classes()) + ")");
    }
    if (m.input_shape[1] != ds.side() || m.input_shape[2] != ds.side()) {
        throw ConfigError(what + ": model input size does not match the dataset");
    }
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              const std::optional<uint64_t>& seed_override) {
    RunConfig cfg = load_run_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (!out_override.empty()) cfg.output_dir = out_override;
    cfg.validate();

    const fs::path out = cfg.output_dir;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

    const json resolved = resolved_config(cfg);
    write_file(out / "resolved_config.json", resolved.dump(2) + "\n");
    spdlog::info("config hash {}; writing to {}", config_hash(cfg), out.string());

    const DatasetPair data = load_dataset(cfg.dataset);
    spdlog::info("dataset {}: {} train / {} test samples", cfg.dataset.kind, data.train.size(), data.test.size());

    const ModelConfig mcfg = cfg.model_config();
    const DissimConfig dcfg = cfg.dissim_config();
    const std::string hash = config_hash(cfg);
    std::optional<StatsLog> log;
    int current = 0;
    json last_step;

    auto hooks_for = [&](int i) {
        current = i;
        log.emplace(out / (model_name(i) + ".stats.jsonl"));
        spdlog::info("training {} (seed {})", model_name(i), dcfg.seed + static_cast<uint64_t>(i));
        TrainHooks h;
        h.on_step = [&, i](const StepStats& s) {
            last_step = step_record(i + 1, s);
            log->write(last_step);
            spdlog::debug("{} step {} loss {:.4f} acc {:.3f}", model_name(i), s.step, s.total_loss, s.train_acc);
        };
        h.on_epoch = [&, i](const EpochStats& e) {
            log->write(epoch_record(i + 1, e));
            spdlog::info("{} epoch {} train_loss {:.4f} train_acc {:.4f} test_acc {:.4f}", model_name(i), e.epoch,
                         e.train_loss, e.train_acc, e.test_acc);
        };
        return h;
    };
    auto on_model = [&](int i, TrainResult& r) {
        CheckpointMeta meta;
        meta.model = mcfg;
        meta.seed = r.seed;
        meta.lambda = i == 0 ? 0.0 : dcfg.lambda;
        meta.metric = dcfg.metric;
        meta.tap_ids = dcfg.tap_ids;
        meta.sequence_position = i + 1;
        meta.n_models = cfg.n_models;
        meta.config_hash = hash;
        save_checkpoint(r.model, meta, out / (model_name(i) + ".ckpt"));
        spdlog::info("wrote {}", (out / (model_name(i) + ".ckpt")).string());
    };

    try {
        train_sequence(mcfg, dcfg, cfg.n_models, data, hooks_for, on_model);
    } catch (const DivergenceError& e) {
        const json diag = {{"model", current + 1}, {"error", e.what()}, {"last_step", last_step}};
        write_file(out / "divergence.json", diag.dump(2) + "\n");
        throw;
    }
    return kOk;
}

std::vector<LoadedCheckpoint> load_all(const std::vector<std::string>& paths) {
    std::vector<LoadedCheckpoint> out;
    for (const auto& p : paths) out.push_back(load_checkpoint(p));
    return out;
}

int cmd_eval(const std::vector<std::string>& ckpts, const std::string& config_path, std::string out_prefix) {
    if (ckpts.size() < 2) throw ConfigError("eval: at least two checkpoints are required");
    const RunConfig cfg = eval_config(config_path, ckpts.front());
    auto models = load_all(ckpts);
    for (size_t i = 0; i < models.size(); ++i) check_compatible(models[i].meta.model, cfg.dataset, ckpts[i]);
    const DatasetPair data = load_dataset(cfg.dataset);

    std::vector<PredictionSet> sets;
    for (size_t i = 0; i < models.size(); ++i) {
        const auto logits = predict_logits(models[i].model, data.test);
        sets.push_back(PredictionSet::from_logits(fs::path(ckpts[i]).stem().string(), logits, data.test.labels));
        spdlog::info("{}: test accuracy {:.4f}", sets.back().model_id, sets.back().accuracy());
    }
    const DiversityReport report = pairwise_report(sets, data.test.labels);
    if (out_prefix.empty()) out_prefix = (fs::path(ckpts.front()).parent_path() / "diversity").string();
    write_file(out_prefix + ".json", report_to_json(report).dump(2) + "\n");
    write_file(out_prefix + ".csv", report_to_csv(report));
    spdlog::info("ensemble accuracy {:.4f}; wrote {}.json and {}.csv", report.ensemble_accuracy, out_prefix,
                 out_prefix);
    return kOk;
}

int cmd_heatmap(const std::string& a, const std::string& b, const std::string& config_path, std::string out_prefix,
                int64_t batch_size) {
    const RunConfig cfg = eval_config(config_path, a);
    auto models = load_all({a, b});
    check_compatible(models[0].meta.model, cfg.dataset, a);
    check_compatible(models[1].meta.model, cfg.dataset, b);
    if (models[0].meta.model.input_shape != models[1].meta.model.input_shape) {
        throw ConfigError("heatmap: checkpoints expect different input shapes");
    }
    const DatasetPair data = load_dataset(cfg.dataset);

    auto ids = [](const Model& m) {
        std::vector<int> v;
        for (const auto& t : m.taps()) v.push_back(t.id);
        return v;
    };
    const auto ta = ids(models[0].model), tb = ids(models[1].model);
    const Tensor<double> h = cka_heatmap(models[0].model, models[1].model, data.test, batch_size, ta, tb);
    if (out_prefix.empty()) out_prefix = (fs::path(a).parent_path() / "heatmap").string();
    write_file(out_prefix + ".csv", matrix_csv(h, ta, tb));
    write_file(out_prefix + "_diagonal.csv", diagonal_csv(h, ta));
    const auto img = render_ppm(h);
    write_file(out_prefix + ".ppm", std::span<const unsigned char>(img));
    spdlog::info("wrote {}.csv, {}_diagonal.csv and {}.ppm", out_prefix, out_prefix, out_prefix);
    return kOk;
}

std::shared_ptr<spdlog::logger> cli_logger() {
    static auto logger = [] {
        auto l = spdlog::stderr_color_st("dissim");
        l->set_pattern("[%l] %v");
        return l;
    }();
    return logger;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    spdlog::set_default_logger(cli_logger());

    CLI::App app{"Representational dissimilarity training and ensemble diversity analysis"};
    app.require_subcommand(1);
    std::string log_level = "info", device = "cpu";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();
    app.add_option("--device", device, "Compute device; only cpu is supported")->capture_default_str();

    std::string config_path, out;
    std::optional<uint64_t> seed_override;
    auto* train = app.add_subcommand("train", "Train a sequence of models");
    train->add_option("--config", config_path, "Run config JSON")->required();
    train->add_option("--out", out, "Output directory (overrides output_dir)");
    train->add_option("--seed-override", seed_override, "Replace the config seed");

    std::vector<std::string> ckpts;
    int64_t batch_size = 256;
    auto* eval = app.add_subcommand("eval", "Diversity report over two or more checkpoints");
    eval->add_option("checkpoints", ckpts, "Checkpoint files")->required();
    eval->add_option("--config", config_path, "Config whose dataset section is used");
    eval->add_option("--out", out, "Output prefix for .json and .csv");

    auto* heat = app.add_subcommand("heatmap", "Linear CKA between every tap pair of two checkpoints");
    heat->add_option("checkpoints", ckpts, "Two checkpoint files")->required()->expected(2);
    heat->add_option("--config", config_path, "Config whose dataset section is used");
    heat->add_option("--out", out, "Output prefix for .csv, _diagonal.csv and .ppm");
    heat->add_option("--batch-size", batch_size, "Samples per CKA minibatch")->capture_default_str();

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        const auto level = spdlog::level::from_str(log_level);
        if (level == spdlog::level::off && log_level != "off") throw ConfigError("--log-level: unknown level");
        spdlog::set_level(level);
        if (device != "cpu") throw ConfigError("--device: only cpu is supported");
        if (heat->parsed() && batch_size < kMinBatch) throw ConfigError("--batch-size: too small");

        if (train->parsed()) return cmd_train(config_path, out, seed_override);
        if (eval->parsed()) return cmd_eval(ckpts, config_path, out);
        return cmd_heatmap(ckpts[0], ckpts[1], config_path, out, batch_size);
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return kConfigError;
    } catch (const DivergenceError& e) {
        spdlog::error("training diverged: {}", e.what());
        return kDivergence;
    } catch (const DataError& e) {
        spdlog::error("{}", e.what());
        return kIoError;
    } catch (const CheckpointError& e) {
        spdlog::error("{}", e.what());
        return kIoError;
    } catch (const IoError& e) {
        spdlog::error("{}", e.what());
        return kIoError;
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return kIoError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kFailure;
    }
}

}  // namespace dissim::cli
