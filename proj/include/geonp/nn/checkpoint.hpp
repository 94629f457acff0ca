#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "geonp/nn/params.hpp"

// Checkpoint container: one file holding a single-line JSON header followed by
// '\n' and the concatenated little-endian float32 payload. Offsets in the
// header are byte offsets into the payload.

namespace geonp::nn {

inline constexpr const char* kCheckpointFormat = "geonp-ckpt-v1";

namespace detail {

inline void put_f32_le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float get_f32_le(const char* p) {
    std::uint32_t bits = (static_cast<std::uint32_t>(static_cast<unsigned char>(p[0]))) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const ParamStoreT<Real>& store, const std::string& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    std::size_t offset = 0;
    for (const auto& [name, e] : store) {
        tensors.push_back({{"name", name},
                           {"shape", e.tensor.shape},
                           {"offset", offset},
                           {"trainable", e.trainable}});
        for (Real v : e.tensor.values) detail::put_f32_le(payload, static_cast<float>(v));
        offset += e.tensor.numel() * 4;
    }
    nlohmann::json header = {{"format", kCheckpointFormat}, {"tensors", tensors}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << header.dump() << '\n';
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

/// Loads into an existing store; every named tensor must exist with the same
/// shape, and the file must not contain tensors the store lacks.
template <typename Real>
void load_checkpoint(ParamStoreT<Real>& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw std::runtime_error("checkpoint truncated: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint header is not valid JSON: " + path + ": " + e.what());
    }
    if (header.value("format", "") != kCheckpointFormat)
        throw std::runtime_error("unsupported checkpoint format in " + path);
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::size_t matched = 0;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        TensorT<Real>* t = store.find(name);
        if (!t) throw std::runtime_error("checkpoint tensor not in model: " + name);
        if (t->shape != shape)
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": file has " +
                                     shape_str(shape) + ", model has " + shape_str(t->shape));
        const std::size_t bytes = t->numel() * 4;
        if (offset + bytes > payload.size())
            throw std::runtime_error("checkpoint payload truncated at tensor " + name);
        for (std::size_t i = 0; i < t->numel(); ++i)
            t->values[i] = static_cast<Real>(detail::get_f32_le(payload.data() + offset + i * 4));
        ++matched;
    }
    if (matched != store.size())
        throw std::runtime_error("checkpoint has " + std::to_string(matched) +
                                 " tensors, model expects " + std::to_string(store.size()));
}

}  // namespace geonp::nn
