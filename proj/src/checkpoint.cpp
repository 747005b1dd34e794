#include "dissim/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "json.hpp"

namespace dissim {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(sizeof(float) == 4);

namespace {

constexpr char kMagic[4] = {'D', 'S', 'C', 'K'};

template <typename T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

class Writer {
   public:
    template <typename T>
    void put(T v) {
        v = to_le(v);
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), c, c + n);
    }
    std::vector<unsigned char> buf;
};

class Reader {
   public:
    Reader(const unsigned char* p, size_t n, std::string path) : p_(p), n_(n), path_(std::move(path)) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return to_le(v);
    }
    const unsigned char* take(size_t n) {
        if (n > n_ - pos_) throw CheckpointError(path_ + ": truncated checkpoint");
        const unsigned char* r = p_ + pos_;
        pos_ += n;
        return r;
    }
    size_t remaining() const { return n_ - pos_; }

   private:
    const unsigned char* p_;
    size_t n_;
    size_t pos_ = 0;
    std::string path_;
};

uint32_t crc32_of(const unsigned char* p, size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<uint32_t>(c);
}

json meta_json(const CheckpointMeta& m) {
    return {
        {"model",
         {{"preset", m.model.preset},
          {"block_depths", m.model.block_depths},
          {"block_channels", m.model.block_channels},
          {"bottleneck", m.model.bottleneck},
          {"num_classes", m.model.num_classes},
          {"input_shape", m.model.input_shape}}},
        {"provenance",
         {{"seed", m.seed},
          {"lambda", m.lambda},
          {"metric", std::string(metric_name(m.metric))},
          {"tap_ids", m.tap_ids},
          {"sequence_position", m.sequence_position},
          {"n_models", m.n_models}}},
        {"config_hash", m.config_hash},
    };
}

CheckpointMeta meta_from_json(const json& j) {
    CheckpointMeta m;
    const json& mj = j.at("model");
    m.model.preset = mj.at("preset").get<std::string>();
    m.model.block_depths = mj.at("block_depths").get<std::array<int, 4>>();
    m.model.block_channels = mj.at("block_channels").get<std::array<int, 4>>();
    m.model.bottleneck = mj.at("bottleneck").get<bool>();
    m.model.num_classes = mj.at("num_classes").get<int>();
    m.model.input_shape = mj.at("input_shape").get<std::array<int, 3>>();
    const json& pj = j.at("provenance");
    m.seed = pj.at("seed").get<uint64_t>();
    m.lambda = pj.at("lambda").get<double>();
    m.metric = parse_metric(pj.at("metric").get<std::string>());
    m.tap_ids = pj.at("tap_ids").get<std::vector<int>>();
    m.sequence_position = pj.at("sequence_position").get<int>();
    m.n_models = pj.at("n_models").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    return m;
}

}  // namespace

void save_checkpoint(Model& model, const CheckpointMeta& meta, const fs::path& path) {
    if (!(meta.model == model.config())) throw CheckpointError("save_checkpoint: metadata does not describe the model");
    Writer w;
    w.bytes(kMagic, 4);
    w.put<uint32_t>(kCheckpointVersion);
    const std::string mj = meta_json(meta).dump();
    w.put<uint64_t>(mj.size());
    w.bytes(mj.data(), mj.size());
    const auto state = model.state();
    w.put<uint32_t>(static_cast<uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        w.put<uint32_t>(static_cast<uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<uint32_t>(static_cast<uint32_t>(t->rank()));
        for (int64_t d : t->shape()) w.put<int64_t>(d);
        for (size_t i = 0; i < t->size(); ++i) w.put<float>(t->ptr()[i]);
    }
    w.put<uint32_t>(crc32_of(w.buf.data(), w.buf.size()));

    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const fs::path& path, const std::optional<std::string>& expected_preset) {
    const std::string where = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + where);
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r(buf.data(), buf.size(), where);
    if (std::memcmp(r.take(4), kMagic, 4) != 0) throw CheckpointError(where + ": not a checkpoint file");
    const auto version = r.get<uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointError(where + ": unsupported checkpoint version " + std::to_string(version) +
                              " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
    }
    if (buf.size() < 12) throw CheckpointError(where + ": truncated checkpoint");
    uint32_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
    if (to_le(stored) != crc32_of(buf.data(), buf.size() - 4)) throw CheckpointError(where + ": checksum mismatch");

    const auto meta_len = r.get<uint64_t>();
    if (meta_len > r.remaining()) throw CheckpointError(where + ": truncated checkpoint");
    const auto* mp = reinterpret_cast<const char*>(r.take(meta_len));
    CheckpointMeta meta;
    try {
        meta = meta_from_json(json::parse(mp, mp + meta_len));
    } catch (const std::exception& e) {
        throw CheckpointError(where + ": bad metadata: " + e.what());
    }
    if (expected_preset && meta.model.preset != *expected_preset) {
        throw CheckpointError(where + ": model preset mismatch: file has '" + meta.model.preset + "', expected '" +
                              *expected_preset + "'");
    }

    LoadedCheckpoint lc{build_model(meta.model, 0), meta};
    std::map<std::string, Tensor<float>*> slots;
    for (const auto& nt : lc.model.state()) slots[nt.name] = nt.tensor;

    const auto count = r.get<uint32_t>();
    if (count != slots.size()) {
        throw CheckpointError(where + ": expected " + std::to_string(slots.size()) + " tensors, found " +
                              std::to_string(count));
    }
    for (uint32_t k = 0; k < count; ++k) {
        const auto nlen = r.get<uint32_t>();
        const auto* np = reinterpret_cast<const char*>(r.take(nlen));
        const std::string name(np, nlen);
        auto it = slots.find(name);
        if (it == slots.end()) throw CheckpointError(where + ": unexpected tensor '" + name + "'");
        Tensor<float>& t = *it->second;
        const auto rank = r.get<uint32_t>();
        Shape shape;
        for (uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<int64_t>());
        if (shape != t.shape()) throw CheckpointError(where + ": tensor '" + name + "' has the wrong shape");
        for (size_t i = 0; i < t.size(); ++i) t.ptr()[i] = r.get<float>();
        slots.erase(it);
    }
    if (r.remaining() != 4) throw CheckpointError(where + ": trailing bytes after tensors");
    return lc;
}

}  // namespace dissim
