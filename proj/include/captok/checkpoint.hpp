#pragma once

// Versioned binary checkpoint container: named f64 arrays, optimizer slots,
// RNG state and free-form metadata. Loads refuse mismatched architecture
// digests unless forced, and detect truncation.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "captok/common.hpp"
#include "captok/optim.hpp"
#include "captok/param.hpp"

namespace captok {

namespace ckpt_detail {

constexpr char kMagic[4] = {'C', 'P', 'K', 'T'};
constexpr uint32_t kVersion = 1;

inline void put_u32(std::ostream& o, uint32_t v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_u64(std::ostream& o, uint64_t v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_str(std::ostream& o, const std::string& s) {
    put_u32(o, static_cast<uint32_t>(s.size()));
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_doubles(std::ostream& o, const std::vector<double>& v) {
    put_u64(o, v.size());
    o.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw DataError("cannot open checkpoint " + p);
    }
    void need(bool ok) {
        if (!ok || !in) throw DataError("checkpoint " + path + " is truncated or corrupt");
    }
    uint32_t u32() {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        need(static_cast<bool>(in));
        return v;
    }
    uint64_t u64() {
        uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        need(static_cast<bool>(in));
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 24)) throw DataError("checkpoint " + path + ": absurd string length");
        std::string s(n, '\0');
        in.read(s.data(), n);
        need(static_cast<bool>(in));
        return s;
    }
    std::vector<double> doubles() {
        const uint64_t n = u64();
        if (n > (1ull << 32)) throw DataError("checkpoint " + path + ": absurd array length");
        std::vector<double> v(n);
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        need(static_cast<bool>(in));
        return v;
    }
};

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const ParamSet& params,
                            uint64_t config_digest,
                            const std::map<std::string, std::string>& meta,
                            const AdamW* opt = nullptr, const std::string& rng_state = "") {
    namespace d = ckpt_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(d::kMagic, 4);
    d::put_u32(out, d::kVersion);
    d::put_u64(out, config_digest);
    d::put_u32(out, static_cast<uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        d::put_str(out, k);
        d::put_str(out, v);
    }
    d::put_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto& p : params.all()) {
        d::put_str(out, p.name);
        d::put_u32(out, static_cast<uint32_t>(p.tensor.shape().size()));
        for (int dim : p.tensor.shape()) d::put_u32(out, static_cast<uint32_t>(dim));
        d::put_doubles(out, p.tensor.data());
    }
    if (opt) {
        d::put_u32(out, 1);
        std::map<std::string, const AdamW::Slot*> sorted;
        for (const auto& [name, slot] : opt->state()) sorted[name] = &slot;
        d::put_u32(out, static_cast<uint32_t>(sorted.size()));
        for (const auto& [name, slot] : sorted) {
            d::put_str(out, name);
            d::put_u64(out, static_cast<uint64_t>(slot->t));
            d::put_doubles(out, slot->m);
            d::put_doubles(out, slot->v);
        }
    } else {
        d::put_u32(out, 0);
    }
    d::put_str(out, rng_state);
    if (!out) throw DataError("short write on checkpoint " + path);
}

// Loads arrays into an already-constructed ParamSet; every stored array must
// match an existing parameter's name and shape.
inline std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                          ParamSet& params,
                                                          uint64_t config_digest,
                                                          AdamW* opt = nullptr,
                                                          std::string* rng_state = nullptr,
                                                          bool force = false) {
    namespace d = ckpt_detail;
    d::Reader r(path);
    char magic[4] = {};
    r.in.read(magic, 4);
    r.need(static_cast<bool>(r.in));
    if (std::string(magic, 4) != std::string(d::kMagic, 4))
        throw DataError("checkpoint " + path + ": bad magic");
    const uint32_t version = r.u32();
    if (version != d::kVersion)
        throw DataError("checkpoint " + path + ": unsupported version " +
                        std::to_string(version));
    const uint64_t digest = r.u64();
    if (digest != config_digest && !force)
        throw DataError("checkpoint " + path + ": config digest mismatch (stored " +
                        hex64(digest) + ", expected " + hex64(config_digest) +
                        "); pass force to override");
    std::map<std::string, std::string> meta;
    const uint32_t n_meta = r.u32();
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        meta[k] = r.str();
    }
    const uint32_t n_params = r.u32();
    size_t loaded = 0;
    for (uint32_t i = 0; i < n_params; ++i) {
        const std::string name = r.str();
        const uint32_t nd = r.u32();
        std::vector<int> shape;
        for (uint32_t k = 0; k < nd; ++k) shape.push_back(static_cast<int>(r.u32()));
        std::vector<double> data = r.doubles();
        if (!params.contains(name))
            throw DataError("checkpoint " + path + ": unknown parameter " + name);
        Parameter& p = params.get(name);
        if (p.tensor.shape() != shape)
            throw DataError("checkpoint " + path + ": shape mismatch for " + name);
        p.tensor.data() = std::move(data);
        ++loaded;
    }
    if (loaded != params.size())
        throw DataError("checkpoint " + path + ": missing parameters (" +
                        std::to_string(loaded) + " of " + std::to_string(params.size()) + ")");
    const uint32_t has_opt = r.u32();
    if (has_opt) {
        const uint32_t n_slots = r.u32();
        for (uint32_t i = 0; i < n_slots; ++i) {
            const std::string name = r.str();
            AdamW::Slot slot;
            slot.t = static_cast<long>(r.u64());
            slot.m = r.doubles();
            slot.v = r.doubles();
            if (opt) opt->state()[name] = std::move(slot);
        }
    }
    const std::string rng = r.str();
    if (rng_state) *rng_state = rng;
    return meta;
}

}  // namespace captok
