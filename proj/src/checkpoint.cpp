#include "arithlens/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace arithlens {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'L', 'C', 'K'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

class Writer {
public:
    template <typename T>
    void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void put_bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string& str() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, s_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void get_bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, s_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "checkpoint truncated");
    }

    const std::string& s_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelBundle& model) {
    Writer w;
    w.put_bytes(kMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const ModelConfig& c = model.config();
    w.put<std::int32_t>(c.n_layers);
    w.put<std::int32_t>(c.d_model);
    w.put<std::int32_t>(c.n_heads);
    w.put<std::int32_t>(c.d_ff);
    w.put<std::int32_t>(c.max_seq);
    w.put<std::int32_t>(c.vocab_size);
    w.put<double>(c.rope_base);
    w.put<std::uint64_t>(c.seed);
    w.put<std::uint64_t>(model.meta.dataset_hash);
    w.put<std::int64_t>(model.meta.steps);
    w.put<double>(model.meta.heldout_accuracy);
    const auto& tensors = model.layout().tensors();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
        w.put_bytes(t.name.data(), t.name.size());
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
        for (auto dim : t.shape) w.put<std::uint64_t>(dim);
        w.put_bytes(model.parameters().data() + t.offset, t.size * sizeof(double));
    }
    const std::uint64_t sum = fnv1a(w.str().data(), w.str().size());
    w.put<std::uint64_t>(sum);
    return std::move(w.str());
}

ModelBundle deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "not a checkpoint (bad magic)");
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof(version));
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrc::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                                                   ", expected " + std::to_string(kCheckpointVersion));
    }
    if (bytes.size() < 16) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "checkpoint truncated");
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, sizeof(stored));

    Reader r(bytes, body);
    char magic[4];
    r.get_bytes(magic, 4);
    r.get<std::uint32_t>();
    ModelConfig c;
    c.n_layers = r.get<std::int32_t>();
    c.d_model = r.get<std::int32_t>();
    c.n_heads = r.get<std::int32_t>();
    c.d_ff = r.get<std::int32_t>();
    c.max_seq = r.get<std::int32_t>();
    c.vocab_size = r.get<std::int32_t>();
    c.rope_base = r.get<double>();
    c.seed = r.get<std::uint64_t>();
    TrainingMeta meta;
    meta.dataset_hash = r.get<std::uint64_t>();
    meta.steps = r.get<std::int64_t>();
    meta.heldout_accuracy = r.get<double>();

    if (fnv1a(bytes.data(), body) != stored) {
        throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "checkpoint checksum mismatch");
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(CheckpointErrc::CorruptCheckpoint, std::string("checkpoint config invalid: ") + e.what());
    }
    ModelBundle model(c);
    model.meta = meta;
    const auto count = r.get<std::uint32_t>();
    const auto& tensors = model.layout().tensors();
    if (count != tensors.size()) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "tensor count mismatch");
    for (const auto& t : tensors) {
        const auto name_len = r.get<std::uint32_t>();
        if (name_len > 256) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "tensor name too long");
        std::string name(name_len, '\0');
        r.get_bytes(name.data(), name_len);
        if (name != t.name) {
            throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "unexpected tensor " + name + ", wanted " + t.name);
        }
        const auto rank = r.get<std::uint32_t>();
        if (rank != t.shape.size()) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "rank mismatch for " + name);
        for (auto dim : t.shape) {
            if (r.get<std::uint64_t>() != dim) {
                throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "shape mismatch for " + name);
            }
        }
        r.get_bytes(model.parameters().data() + t.offset, t.size * sizeof(double));
    }
    if (r.pos() != body) throw CheckpointError(CheckpointErrc::CorruptCheckpoint, "trailing bytes in checkpoint");
    return model;
}

void save_checkpoint(const ModelBundle& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointErrc::Io, "cannot write checkpoint " + path);
    const std::string bytes = serialize_checkpoint(model);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrc::Io, "short write to " + path);
}

ModelBundle load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointErrc::Io, "cannot open checkpoint " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace arithlens
