#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "thermalgen/tensor.hpp"

// Checkpoint container (see docs/checkpoint_format.md):
//
//   bytes 0..3    magic "TGCK"
//   bytes 4..7    uint32 LE container version (1)
//   bytes 8..15   uint64 LE manifest length M
//   next M bytes  UTF-8 JSON manifest {"meta": {...}, "tensors": [{name, shape, offset, count}]}
//   remainder     payload of little-endian IEEE-754 binary64 values; `offset` is
//                 the byte offset of a tensor's first value from payload start

namespace thermalgen {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return t;
        }
        throw LookupError("checkpoint has no tensor named '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return true;
        }
        return false;
    }
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

inline void put_f64(std::string& out, double value) {
    put_le(out, std::bit_cast<std::uint64_t>(value));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["meta"] = ckpt.meta;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
        offset += 8 * t.numel();
    }
    const std::string text = manifest.dump();
    std::string out = "TGCK";
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : ckpt.tensors) {
        for (double v : t.values()) detail::put_f64(out, v);
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16 || bytes.compare(0, 4, "TGCK") != 0) throw DataError("not a checkpoint container");
    const auto version = detail::get_le<std::uint32_t>(p + 4);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto mlen = detail::get_le<std::uint64_t>(p + 8);
    if (16 + mlen > bytes.size()) throw DataError("truncated checkpoint manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(16, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
    }
    const std::size_t payload = 16 + mlen;
    Checkpoint ckpt;
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto count = entry.at("count").get<std::uint64_t>();
        if (count != numel(shape) || payload + offset + 8 * count > bytes.size()) {
            throw DataError("checkpoint tensor '" + entry.at("name").get<std::string>() + "' out of bounds");
        }
        Buffer values(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + payload + offset + 8 * i));
        }
        ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
    }
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

/// Copies checkpoint values into existing parameters, checking names and shapes.
inline void load_into(const Checkpoint& ckpt, std::vector<std::pair<std::string, Tensor>>& params,
                      const std::string& prefix = "") {
    for (auto& [name, t] : params) {
        const Tensor& src = ckpt.at(prefix + name);
        if (src.shape() != t.shape()) {
            throw DimensionError("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(src.shape()) +
                                 ", expected " + shape_str(t.shape()));
        }
        std::copy(src.values().begin(), src.values().end(), t.mutable_values().begin());
    }
}

}  // namespace thermalgen
