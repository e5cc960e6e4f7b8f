#include "bda/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bda/error.hpp"

namespace bda::cli {

namespace {

constexpr std::string_view kMagic = "bda-checkpoint\n";
constexpr std::size_t kTrailer = 15;  // "crc32 xxxxxxxx\n"

constexpr const char* kTeacher = "teacher.";
constexpr const char* kCenter = "state.center";
constexpr const char* kMoment1 = "adam.m.";
constexpr const char* kMoment2 = "adam.v.";

std::uint32_t crc_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), n);
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

void put_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

// Sequential reader over the index; any malformed field is an integrity failure.
class Cursor {
public:
    explicit Cursor(std::string_view s) : s_(s) {}

    std::string line() {
        const auto nl = s_.find('\n', pos_);
        if (nl == std::string_view::npos) throw IntegrityError("checkpoint index is truncated");
        std::string out(s_.substr(pos_, nl - pos_));
        pos_ = nl + 1;
        return out;
    }
    std::string_view take(std::size_t n) {
        if (s_.size() - pos_ < n) throw IntegrityError("checkpoint is shorter than its index declares");
        auto out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::size_t remaining() const { return s_.size() - pos_; }

private:
    std::string_view s_;
    std::size_t pos_ = 0;
};

std::size_t parse_count(std::istringstream& in, const char* what) {
    long long v = -1;
    if (!(in >> v) || v < 0) throw IntegrityError(std::string("checkpoint index has a bad ") + what);
    return static_cast<std::size_t>(v);
}

void expect_word(std::istringstream& in, const char* word) {
    std::string w;
    if (!(in >> w) || w != word) throw IntegrityError(std::string("checkpoint index is missing '") + word + "'");
}

void add_prefixed(ParameterSet& dst, const ParameterSet& src, const std::string& prefix) {
    for (const auto& [name, t] : src) dst.add(prefix + name, t);
}

ParameterSet strip_prefix(const ParameterSet& src, const std::string& prefix) {
    ParameterSet out;
    for (const auto& [name, t] : src)
        if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
    return out;
}

void store_optimizer(ParameterSet& dst, const Adam& adam) {
    add_prefixed(dst, adam.first_moments(), kMoment1);
    add_prefixed(dst, adam.second_moments(), kMoment2);
}

void load_optimizer(Adam& adam, const Checkpoint& ckpt) {
    adam.first_moments() = strip_prefix(ckpt.tensors, kMoment1);
    adam.second_moments() = strip_prefix(ckpt.tensors, kMoment2);
    adam.set_steps(ckpt.meta.at("optimizer_steps").get<std::int64_t>());
}

void require_layout(const ParameterSet& got, const ParameterSet& want, const std::string& what) {
    if (!got.same_layout(want)) {
        throw ConfigError(what + " in the checkpoint does not match the configured architecture");
    }
}

}  // namespace

std::string Checkpoint::stage() const { return meta.value("stage", std::string()); }

bool Checkpoint::has_head() const { return !tensors.with_prefix(downstream::kPrefix).empty(); }

RunConfig Checkpoint::config() const {
    if (!meta.contains("config")) throw IntegrityError("checkpoint carries no config snapshot");
    return config_from_json(meta.at("config"));
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string meta = ckpt.meta.dump();
    std::string payload;
    std::ostringstream index;
    index << kMagic << "version " << ckpt.format_version << "\n";
    index << "meta " << meta.size() << "\n" << meta << "\n";
    index << "tensors " << ckpt.tensors.size() << "\n";
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.empty() || name.find_first_of(" \n\t") != std::string::npos) {
            throw Error("tensor name '" + name + "' cannot be stored");
        }
        index << name << " f64 " << payload.size() << " " << t.rank();
        for (auto d : t.shape()) index << " " << d;
        index << "\n";
        for (double v : t.values()) put_le(payload, v);
    }
    index << "payload " << payload.size() << "\n";
    std::string out = index.str() + payload;
    char trailer[kTrailer + 1];
    std::snprintf(trailer, sizeof trailer, "crc32 %08x\n", crc_of(out));
    out.append(trailer, kTrailer);
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < kMagic.size() + kTrailer || bytes.substr(0, kMagic.size()) != kMagic) {
        throw IntegrityError("not a checkpoint archive or truncated header");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - kTrailer);
    const std::string trailer(bytes.substr(bytes.size() - kTrailer));
    if (trailer.compare(0, 6, "crc32 ") != 0 || trailer.back() != '\n') {
        throw IntegrityError("checkpoint checksum trailer is missing (file truncated?)");
    }
    char expected[kTrailer + 1];
    std::snprintf(expected, sizeof expected, "crc32 %08x\n", crc_of(body));
    if (trailer != expected) throw IntegrityError("checkpoint checksum mismatch: archive is corrupted");

    Cursor cur(body);
    cur.take(kMagic.size());
    Checkpoint ckpt;
    {
        std::istringstream in(cur.line());
        expect_word(in, "version");
        if (!(in >> ckpt.format_version)) throw IntegrityError("checkpoint version is unreadable");
        if (ckpt.format_version != kCheckpointVersion) {
            throw VersionError("checkpoint format version " + std::to_string(ckpt.format_version) +
                               " cannot be read by this build (expects " + std::to_string(kCheckpointVersion) +
                               "); convert it with a matching release");
        }
    }
    {
        std::istringstream in(cur.line());
        expect_word(in, "meta");
        const auto n = parse_count(in, "meta length");
        auto text = cur.take(n);
        if (cur.take(1) != "\n") throw IntegrityError("checkpoint meta block is malformed");
        try {
            ckpt.meta = nlohmann::ordered_json::parse(text);
        } catch (const nlohmann::json::exception&) {
            throw IntegrityError("checkpoint meta block is not valid JSON");
        }
    }
    struct Entry {
        std::string name;
        std::size_t offset;
        Shape shape;
    };
    std::vector<Entry> entries;
    {
        std::istringstream in(cur.line());
        expect_word(in, "tensors");
        const auto n = parse_count(in, "tensor count");
        for (std::size_t i = 0; i < n; ++i) {
            std::istringstream e(cur.line());
            Entry entry;
            std::string dtype;
            if (!(e >> entry.name >> dtype) || dtype != "f64") throw IntegrityError("checkpoint tensor entry is malformed");
            entry.offset = parse_count(e, "tensor offset");
            const auto rank = parse_count(e, "tensor rank");
            for (std::size_t r = 0; r < rank; ++r) entry.shape.push_back(parse_count(e, "tensor dimension"));
            entries.push_back(std::move(entry));
        }
    }
    std::istringstream in(cur.line());
    expect_word(in, "payload");
    const auto payload_size = parse_count(in, "payload length");
    if (cur.remaining() != payload_size) {
        throw IntegrityError("checkpoint payload is " + std::to_string(cur.remaining()) + " bytes, index declares " +
                             std::to_string(payload_size));
    }
    const std::string_view payload = cur.take(payload_size);
    std::size_t expected_offset = 0;
    for (auto& e : entries) {
        const std::size_t n = shape_numel(e.shape);
        if (e.offset != expected_offset || n * 8 > payload.size() - e.offset) {
            throw IntegrityError("checkpoint tensor '" + e.name + "' lies outside the payload");
        }
        Tensor t(e.shape);
        for (std::size_t i = 0; i < n; ++i) t[i] = get_le(payload.data() + e.offset + 8 * i);
        expected_offset += 8 * n;
        try {
            ckpt.tensors.add(e.name, std::move(t));
        } catch (const Error&) {
            throw IntegrityError("checkpoint names tensor '" + e.name + "' twice");
        }
    }
    if (expected_offset != payload.size()) throw IntegrityError("checkpoint payload has trailing bytes");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

Checkpoint pretrain_checkpoint(const pretrain::TwinState& state, const RunConfig& config) {
    Checkpoint c;
    c.meta["stage"] = "pretrain";
    c.meta["step"] = state.step;
    c.meta["total_steps"] = state.total_steps;
    c.meta["optimizer_steps"] = state.optimizer.steps();
    c.meta["config"] = config_to_json(config);
    add_prefixed(c.tensors, state.student, "");
    add_prefixed(c.tensors, state.decoder, "");
    add_prefixed(c.tensors, state.loss_weights, "");
    add_prefixed(c.tensors, state.teacher, kTeacher);
    c.tensors.add(kCenter, state.center);
    store_optimizer(c.tensors, state.optimizer);
    return c;
}

pretrain::TwinState restore_pretrain_state(const Checkpoint& ckpt, const RunConfig& config) {
    if (ckpt.stage() != "pretrain") throw ConfigError("resuming pre-training needs a pre-training checkpoint");
    const auto configs = config.pretrain_configs();
    pretrain::TwinState s = pretrain::init_state(configs, config.pretrain_hyper(), 1);
    const ParameterSet& t = ckpt.tensors;
    auto pick = [&](const ParameterSet& like, const std::string& prefix) {
        ParameterSet out;
        for (const auto& [name, v] : like) {
            if (!t.contains(prefix + name)) throw ConfigError("checkpoint lacks '" + prefix + name + "'");
            out.add(name, t.at(prefix + name));
        }
        require_layout(out, like, prefix.empty() ? "parameters" : prefix);
        return out;
    };
    s.student = pick(s.student, "");
    s.decoder = pick(s.decoder, "");
    s.loss_weights = pick(s.loss_weights, "");
    s.teacher = pick(s.teacher, kTeacher);
    if (!t.contains(kCenter) || t.at(kCenter).shape() != s.center.shape()) {
        throw ConfigError("checkpoint center does not match the projector output size");
    }
    s.center = t.at(kCenter);
    s.step = ckpt.meta.at("step").get<std::int64_t>();
    s.total_steps = ckpt.meta.at("total_steps").get<std::int64_t>();
    s.optimizer = Adam(Adam::Options{config.pretrain.hyper.learning_rate});
    load_optimizer(s.optimizer, ckpt);
    s.validate();
    return s;
}

Checkpoint finetune_checkpoint(const downstream::FinetuneState& state, const RunConfig& config, std::size_t epoch) {
    Checkpoint c;
    c.meta["stage"] = "finetune";
    c.meta["step"] = state.step;
    c.meta["epoch"] = epoch;
    c.meta["optimizer_steps"] = state.optimizer.steps();
    c.meta["config"] = config_to_json(config);
    add_prefixed(c.tensors, state.encoder, "");
    add_prefixed(c.tensors, state.head, "");
    store_optimizer(c.tensors, state.optimizer);
    return c;
}

downstream::FinetuneState restore_finetune_state(const Checkpoint& ckpt, const RunConfig& config) {
    if (!ckpt.has_head()) throw ConfigError("stage-2 checkpoint required: this checkpoint has no segmentation head");
    const auto configs = config.downstream_configs();
    downstream::FinetuneState s;
    s.encoder = ckpt.encoder_params();
    s.head = ckpt.tensors.with_prefix(downstream::kPrefix);
    require_layout(s.encoder, encoder::init_params(configs.encoder, 0), "encoder");
    require_layout(s.head, downstream::init_head_params(configs, 0), "segmentation head");
    s.step = ckpt.meta.value("step", std::int64_t{0});
    s.optimizer = Adam(Adam::Options{config.finetune.learning_rate});
    if (ckpt.meta.contains("optimizer_steps")) load_optimizer(s.optimizer, ckpt);
    return s;
}

}  // namespace bda::cli
