#include "rlrc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace rlrc {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'L', 'R', 'C'};

template <class T>
void put(std::ostream & os, T v) {
    os.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

class Reader {
public:
    Reader(std::istream & is, std::string path) : is_(is), path_(std::move(path)) {}

    template <class T>
    T get(const char * what) {
        T v{};
        read(&v, sizeof(T), what);
        return v;
    }

    void read(void * dst, std::size_t n, const char * what) {
        is_.read(static_cast<char *>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw Error(path_ + ": truncated checkpoint while reading " + what);
        }
    }

    bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

private:
    std::istream & is_;
    std::string path_;
};

}  // namespace

void write_container(const std::string & path, const Container & c) {
    json header = c.header;
    json byte_names = json::array();
    for (const auto & r : c.records) {
        if (r.is_bytes) {
            byte_names.push_back(r.name);
        }
    }
    header["byte_tensors"] = byte_names;
    header["tensor_count"] = c.records.size();
    const std::string text = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open checkpoint for writing: " + path);
    }
    f.write(kMagic, 4);
    put<std::uint32_t>(f, kCheckpointVersion);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(text.size()));
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto & r : c.records) {
        const std::size_t expect = shape_numel(r.shape);
        if ((r.is_bytes ? r.bytes.size() : r.f32.size()) != expect) {
            throw ShapeError("record '" + r.name + "' payload does not match shape " + shape_str(r.shape));
        }
        put<std::uint32_t>(f, static_cast<std::uint32_t>(r.name.size()));
        f.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        put<std::uint32_t>(f, static_cast<std::uint32_t>(r.shape.size()));
        for (auto e : r.shape) {
            put<std::uint64_t>(f, e);
        }
        if (r.is_bytes) {
            f.write(reinterpret_cast<const char *>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
        } else {
            f.write(reinterpret_cast<const char *>(r.f32.data()), static_cast<std::streamsize>(r.f32.size() * sizeof(float)));
        }
    }
    if (!f) {
        throw Error("write failed for checkpoint: " + path);
    }
}

Container read_container(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error("cannot open checkpoint: " + path);
    }
    Reader rd(f, path);
    char magic[4];
    rd.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw Error(path + ": not an RLRC checkpoint (bad magic)");
    }
    const auto version = rd.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw Error(path + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len = rd.get<std::uint32_t>("header length");
    if (header_len > (64u << 20)) {
        throw Error(path + ": implausible header length " + std::to_string(header_len));
    }
    std::string text(header_len, '\0');
    rd.read(text.data(), header_len, "header");
    Container c;
    try {
        c.header = json::parse(text);
    } catch (const json::exception & e) {
        throw Error(path + ": corrupt checkpoint header: " + e.what());
    }
    if (!c.header.is_object() || !c.header.contains("tensor_count")) {
        throw Error(path + ": corrupt checkpoint header: missing tensor_count");
    }
    std::set<std::string> byte_names;
    for (const auto & n : c.header.value("byte_tensors", json::array())) {
        byte_names.insert(n.get<std::string>());
    }
    const auto count = c.header.at("tensor_count").get<std::size_t>();
    for (std::size_t i = 0; i < count; ++i) {
        TensorRecord r;
        const auto name_len = rd.get<std::uint32_t>("tensor name length");
        if (name_len > 4096) {
            throw Error(path + ": implausible tensor name length " + std::to_string(name_len));
        }
        r.name.resize(name_len);
        rd.read(r.name.data(), name_len, "tensor name");
        const auto rank = rd.get<std::uint32_t>("tensor rank");
        if (rank == 0 || rank > 8) {
            throw Error(path + ": tensor '" + r.name + "' has invalid rank " + std::to_string(rank));
        }
        for (std::uint32_t d = 0; d < rank; ++d) {
            r.shape.push_back(static_cast<std::size_t>(rd.get<std::uint64_t>("tensor extent")));
        }
        const std::size_t n = shape_numel(r.shape);
        if (n == 0 || n > (std::size_t{1} << 32)) {
            throw Error(path + ": tensor '" + r.name + "' has invalid shape " + shape_str(r.shape));
        }
        r.is_bytes = byte_names.count(r.name) > 0;
        if (r.is_bytes) {
            r.bytes.resize(n);
            rd.read(r.bytes.data(), n, "tensor payload");
        } else {
            r.f32.resize(n);
            rd.read(r.f32.data(), n * sizeof(float), "tensor payload");
        }
        c.records.push_back(std::move(r));
    }
    if (!rd.at_end()) {
        throw Error(path + ": trailing bytes after " + std::to_string(count) + " tensors");
    }
    return c;
}

namespace {

TensorRecord f32_record(const std::string & name, const Tensor & t) {
    return {name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()), {}, false};
}

json info_header(const CheckpointInfo & info, const ModelConfig & config, const char * kind) {
    return json{{"format", "rlrc-checkpoint"}, {"kind", kind}, {"stage", info.stage}, {"config", config_to_json(config)},
                {"meta", info.meta}};
}

std::size_t model_payload(const Container & c) {
    std::size_t n = 0;
    for (const auto & r : c.records) {
        if (r.name.rfind("value.", 0) != 0) {
            n += r.payload_bytes();
        }
    }
    return n;
}

void check_loaded_shape(const std::string & name, const Shape & got, const Shape & expected) {
    if (got != expected) {
        throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(got) + ", config implies " +
                         shape_str(expected));
    }
}

}  // namespace

std::size_t save_checkpoint(const std::string & path, const PolicyModel & model, const CheckpointInfo & info,
                            const ValueHead * value_head) {
    Container c;
    c.header = info_header(info, model.config, "policy");
    for (const auto & [name, t] : model.named_parameters()) {
        c.records.push_back(f32_record(name, *t));
    }
    if (value_head) {
        for (const auto & [name, t] : value_head->named_parameters()) {
            c.records.push_back(f32_record(name, *t));
        }
    }
    write_container(path, c);
    return model_payload(c);
}

std::size_t save_checkpoint(const std::string & path, const QuantizedModel & model, const CheckpointInfo & info) {
    Container c;
    c.header = info_header(info, model.config(), "quantized_policy");
    c.header["quantization"] = json{{"bits", model.bits}, {"block_size", model.block_size}};
    for (const auto & [name, t] : model.base.named_parameters()) {
        if (!t->empty()) {
            c.records.push_back(f32_record(name, *t));
        }
    }
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (Proj p : kAllProjs) {
            const auto & qt = model.weight(l, p);
            const std::string base = "layers." + std::to_string(l) + "." + proj_name(p);
            c.records.push_back({base + ".scales", {qt.scales.size()}, qt.scales, {}, false});
            c.records.push_back({base + ".codes", {qt.packed.size()}, {}, qt.packed, true});
        }
    }
    write_container(path, c);
    return model_payload(c);
}

LoadedCheckpoint load_checkpoint(const std::string & path) {
    Container c = read_container(path);
    LoadedCheckpoint out;
    // Records are moved out below, so count the payload first.
    out.model_payload_bytes = model_payload(c);
    ModelConfig config;
    std::string kind;
    try {
        if (c.header.value("format", "") != "rlrc-checkpoint") {
            throw Error(path + ": corrupt checkpoint header: unknown format");
        }
        kind = c.header.at("kind").get<std::string>();
        out.info.stage = c.header.at("stage").get<std::string>();
        out.info.meta = c.header.value("meta", json::object());
        config = config_from_json(c.header.at("config"));
        config.normalize();
    } catch (const json::exception & e) {
        throw Error(path + ": corrupt checkpoint header: " + e.what());
    }

    std::map<std::string, TensorRecord *> by_name;
    for (auto & r : c.records) {
        if (!by_name.emplace(r.name, &r).second) {
            throw Error(path + ": duplicate tensor '" + r.name + "'");
        }
    }
    std::set<std::string> used;
    auto take_f32 = [&](const std::string & name, Tensor & dst, const Shape & expected) {
        auto it = by_name.find(name);
        if (it == by_name.end() || it->second->is_bytes) {
            throw Error(path + ": missing tensor '" + name + "'");
        }
        check_loaded_shape(name, it->second->shape, expected);
        dst.assign(it->second->shape, std::move(it->second->f32));
        dst.set_requires_grad(true);
        used.insert(name);
    };

    // Expected shapes come from the config so a pruned checkpoint restores
    // its per-layer widths.
    PolicyModel m;
    m.config = config;
    const std::size_t d = config.d_model, hd = config.head_dim();
    const bool quantized = kind == "quantized_policy";
    if (!quantized && kind != "policy") {
        throw Error(path + ": unknown checkpoint kind '" + kind + "'");
    }
    take_f32("tok_emb", m.tok_emb, {config.vocab_size(), d});
    take_f32("pos_emb", m.pos_emb, {config.max_seq_len, d});
    QuantizedModel q;
    if (quantized) {
        q.bits = c.header.at("quantization").at("bits").get<int>();
        q.block_size = c.header.at("quantization").at("block_size").get<std::size_t>();
        quant_q_max(q.bits);
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const std::size_t width = config.heads(l) * hd, ff = config.ff(l);
        DecoderLayer L;
        take_f32(p + "attn_norm", L.attn_norm, {d});
        take_f32(p + "mlp_norm", L.mlp_norm, {d});
        const std::map<Proj, Shape> shapes = {{Proj::Q, {d, width}},  {Proj::K, {d, width}}, {Proj::V, {d, width}},
                                              {Proj::O, {width, d}},  {Proj::Gate, {d, ff}}, {Proj::Up, {d, ff}},
                                              {Proj::Down, {ff, d}}};
        if (!quantized) {
            for (Proj pr : kAllProjs) {
                take_f32(p + proj_name(pr), layer_weight(L, pr), shapes.at(pr));
            }
        } else {
            std::array<QuantizedTensor, 7> qs;
            for (Proj pr : kAllProjs) {
                const std::string base = p + proj_name(pr);
                auto s = by_name.find(base + ".scales");
                auto k = by_name.find(base + ".codes");
                if (s == by_name.end() || k == by_name.end() || s->second->is_bytes || !k->second->is_bytes) {
                    throw Error(path + ": missing quantized tensor '" + base + "'");
                }
                QuantizedTensor & qt = qs[static_cast<std::size_t>(pr)];
                qt.bits = q.bits;
                qt.block_size = q.block_size;
                qt.shape = shapes.at(pr);
                qt.scales = std::move(s->second->f32);
                qt.packed = std::move(k->second->bytes);
                qt.validate();
                used.insert(base + ".scales");
                used.insert(base + ".codes");
            }
            q.layers.push_back(std::move(qs));
        }
        m.layers.push_back(std::move(L));
    }
    take_f32("final_norm", m.final_norm, {d});
    take_f32("action_head", m.action_head, {d, config.action_vocab});

    if (by_name.count("value.w1")) {
        ValueHead vh;
        take_f32("value.w1", vh.w1, {d, ValueHead::hidden});
        take_f32("value.b1", vh.b1, {ValueHead::hidden});
        take_f32("value.w2", vh.w2, {ValueHead::hidden, 1});
        take_f32("value.b2", vh.b2, {1});
        out.value_head = std::move(vh);
    }
    for (const auto & r : c.records) {
        if (!used.count(r.name)) {
            throw Error(path + ": unexpected tensor '" + r.name + "'");
        }
    }
    if (quantized) {
        m.set_requires_grad(false);
        q.base = std::move(m);
        out.quantized = std::move(q);
    } else {
        out.model = std::move(m);
    }
    return out;
}

PolicyModel load_policy(const std::string & path) {
    auto ck = load_checkpoint(path);
    if (!ck.model) {
        throw Error(path + ": expected a full-precision policy checkpoint, found stage '" + ck.info.stage + "'");
    }
    return std::move(*ck.model);
}

}  // namespace rlrc
