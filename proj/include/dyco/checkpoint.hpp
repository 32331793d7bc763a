#pragma once

// Checkpoint layout (all integers and reals little-endian):
//   magic "DYCOCKPT" | u32 version | u32 tensor count |
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 values[...]
// Tensors are written in name order.

#include <string>
#include <vector>

#include "dyco/binary_io.hpp"
#include "dyco/nn.hpp"

namespace dyco {

inline constexpr char kCheckpointMagic[8] = {'D', 'Y', 'C', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const Params& params) {
    io::ByteWriter w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        for (double v : t.values()) w.f64(v);
    }
    return w.buffer();
}

inline Params decode_checkpoint(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes), "checkpoint");
    if (r.str(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
        throw Error("checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.u32();
    Params params;
    for (std::uint32_t k = 0; k < count; ++k) {
        std::string name = r.str(r.u32());
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u64();
        if (shape_size(shape) * 8 > r.remaining()) throw Error("checkpoint: tensor '" + name + "' truncated");
        std::vector<double> values(shape_size(shape));
        for (double& v : values) v = r.f64();
        if (!params.emplace(name, Tensor(std::move(shape), std::move(values))).second)
            throw Error("checkpoint: duplicate tensor '" + name + "'");
    }
    if (!r.done()) throw Error("checkpoint: trailing bytes");
    return params;
}

inline void save_checkpoint(const std::string& path, const Params& params) {
    io::write_file(path, encode_checkpoint(params));
}

inline Params load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace dyco
