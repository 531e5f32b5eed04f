#pragma once

// Single-file checkpoints:
//
//   "ADASAPCKPT1\n"                  12-byte magic
//   u64 little-endian                manifest length in bytes
//   manifest (JSON)                  {"metadata": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
//   blob region                      raw little-endian values; offsets are relative to its start
//
// Values round-trip bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "adasap/model.hpp"
#include "adasap/tensor.hpp"

namespace adasap {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "ADASAPCKPT1\n";

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::string dtype;  // f64 | f32 | u8
    std::vector<std::uint8_t> bytes;
};

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U bits) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f64") return 8;
    if (dtype == "f32") return 4;
    if (dtype == "u8") return 1;
    throw CheckpointError("unknown dtype '" + dtype + "'");
}

}  // namespace detail

class Checkpoint {
public:
    nlohmann::json metadata = nlohmann::json::object();

    void add(const std::string& name, const Shape& shape, std::span<const real> values) {
        CheckpointEntry e{name, shape, kRealDtype, {}};
        e.bytes.reserve(values.size() * sizeof(real));
        using Bits = std::conditional_t<sizeof(real) == 8, std::uint64_t, std::uint32_t>;
        for (auto v : values) detail::put_le(e.bytes, std::bit_cast<Bits>(v));
        push(std::move(e));
    }

    void add(const std::string& name, const Tensor& t) { add(name, t.shape(), t.data()); }

    void add_mask(const std::string& name, const std::vector<bool>& mask) {
        CheckpointEntry e{name, {mask.size()}, "u8", {}};
        for (bool b : mask) e.bytes.push_back(b ? 1 : 0);
        push(std::move(e));
    }

    bool contains(const std::string& name) const { return find(name) != nullptr; }
    const std::vector<CheckpointEntry>& entries() const { return entries_; }

    const CheckpointEntry& entry(const std::string& name) const {
        const auto* e = find(name);
        if (!e) throw CheckpointError("checkpoint has no tensor '" + name + "'");
        return *e;
    }

    std::vector<real> values(const std::string& name) const {
        const auto& e = entry(name);
        const auto n = shape_numel(e.shape);
        std::vector<real> out(n);
        const auto* p = e.bytes.data();
        for (std::size_t i = 0; i < n; ++i) {
            if (e.dtype == "f64") out[i] = static_cast<real>(std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i)));
            else if (e.dtype == "f32") out[i] = static_cast<real>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i)));
            else out[i] = static_cast<real>(p[i]);
        }
        return out;
    }

    Tensor tensor(const std::string& name, bool requires_grad = false) const {
        return Tensor(entry(name).shape, values(name), requires_grad);
    }

    std::vector<bool> mask(const std::string& name) const {
        const auto& e = entry(name);
        if (e.dtype != "u8") throw CheckpointError("'" + name + "' is not a mask");
        std::vector<bool> out;
        for (auto b : e.bytes) out.push_back(b != 0);
        return out;
    }

    void save(const std::string& path) const {
        nlohmann::json manifest{{"metadata", metadata}, {"tensors", nlohmann::json::array()}};
        std::uint64_t offset = 0;
        for (const auto& e : entries_) {
            manifest["tensors"].push_back(
                {{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", offset}, {"nbytes", e.bytes.size()}});
            offset += e.bytes.size();
        }
        const std::string text = manifest.dump();
        std::vector<std::uint8_t> len;
        detail::put_le(len, static_cast<std::uint64_t>(text.size()));
        std::ofstream os(path, std::ios::binary);
        if (!os) throw CheckpointError("cannot write " + path);
        os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
        os.write(reinterpret_cast<const char*>(len.data()), static_cast<std::streamsize>(len.size()));
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& e : entries_)
            os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
        if (!os) throw CheckpointError("write failed for " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw CheckpointError("cannot open " + path);
        std::vector<char> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        constexpr std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
        if (file.size() < magic_len + 8 || std::memcmp(file.data(), kCheckpointMagic, magic_len) != 0)
            throw CheckpointError(path + ": not a checkpoint file");
        const auto* base = reinterpret_cast<const std::uint8_t*>(file.data());
        const auto mlen = detail::get_le<std::uint64_t>(base + magic_len);
        const std::size_t blob_start = magic_len + 8 + mlen;
        if (blob_start > file.size()) throw CheckpointError(path + ": truncated manifest");
        Checkpoint ck;
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(file.begin() + static_cast<long>(magic_len + 8),
                                             file.begin() + static_cast<long>(blob_start));
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(path + ": bad manifest: " + e.what());
        }
        ck.metadata = manifest.value("metadata", nlohmann::json::object());
        for (const auto& t : manifest.at("tensors")) {
            CheckpointEntry e;
            e.name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<Shape>();
            e.dtype = t.at("dtype").get<std::string>();
            const auto off = t.at("offset").get<std::uint64_t>();
            const auto nbytes = t.at("nbytes").get<std::uint64_t>();
            if (nbytes != shape_numel(e.shape) * detail::dtype_size(e.dtype))
                throw CheckpointError(path + ": size mismatch for '" + e.name + "'");
            if (blob_start + off + nbytes > file.size()) throw CheckpointError(path + ": truncated blob for '" + e.name + "'");
            e.bytes.assign(base + blob_start + off, base + blob_start + off + nbytes);
            ck.push(std::move(e));
        }
        return ck;
    }

private:
    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }
    void push(CheckpointEntry e) {
        if (contains(e.name)) throw CheckpointError("duplicate tensor name '" + e.name + "'");
        entries_.push_back(std::move(e));
    }

    std::vector<CheckpointEntry> entries_;
};

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return {{"architecture", to_string(s.architecture)},
            {"widths", s.widths},
            {"classes", s.classes},
            {"in_channels", s.in_channels},
            {"height", s.height},
            {"width", s.width},
            {"kernel", s.kernel}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.architecture = parse_architecture(j.at("architecture").get<std::string>());
    s.widths = j.at("widths").get<std::vector<std::size_t>>();
    s.classes = j.at("classes").get<std::size_t>();
    s.in_channels = j.at("in_channels").get<std::size_t>();
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    s.kernel = j.at("kernel").get<std::size_t>();
    return s;
}

inline Checkpoint model_checkpoint(const Model& model, nlohmann::json extra = nlohmann::json::object()) {
    Checkpoint ck;
    ck.metadata = std::move(extra);
    ck.metadata["model_spec"] = spec_to_json(model.spec());
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) ck.add(model.parameter_name(i), params[i]);
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        if (!model.layers()[l].prunable) continue;
        const auto m = model.channel_mask(l);
        std::vector<bool> alive(m.size());
        for (std::size_t c = 0; c < m.size(); ++c) alive[c] = m[c] != 0;
        ck.add_mask("layer" + std::to_string(l) + ".mask", alive);
    }
    return ck;
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
    const auto spec = spec_from_json(ck.metadata.at("model_spec"));
    std::vector<Tensor> params;
    for (std::size_t i = 0; i < 2 * (spec.widths.size() + 1); ++i)
        params.push_back(ck.tensor("layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".weight" : ".bias"), true));
    Model m(spec, std::move(params));
    for (auto& p : m.partitions()) {
        const auto name = "layer" + std::to_string(p.layer) + ".mask";
        if (p.prunable && ck.contains(name) && !ck.mask(name).at(p.channel)) p.alive = false;
    }
    return m;
}

inline void save_model(const Model& model, const std::string& path, nlohmann::json extra = nlohmann::json::object()) {
    model_checkpoint(model, std::move(extra)).save(path);
}

inline Model load_model(const std::string& path) { return model_from_checkpoint(Checkpoint::load(path)); }

}  // namespace adasap
