#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "segnet/ops.hpp"
#include "segnet/tensor.hpp"

namespace segnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

struct Parameter {
    std::string name;
    Tensor array;
    bool trainable = true;
};

// Named parameter registry. Registration order is fixed by model
// construction, which keeps checkpoints and optimizer state deterministic.
class ParameterStore {
public:
    Parameter& add(const std::string& name, Tensor t, bool trainable = true) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        if (trainable) t.set_requires_grad(true);
        params_.push_back(std::make_unique<Parameter>(Parameter{name, std::move(t), trainable}));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return *params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }
    Parameter& operator[](std::size_t i) { return *params_[i]; }
    const Parameter& operator[](std::size_t i) const { return *params_[i]; }

    std::vector<Parameter*> trainable() {
        std::vector<Parameter*> out;
        for (auto& p : params_)
            if (p->trainable) out.push_back(p.get());
        return out;
    }

    void zero_grad() {
        for (auto& p : params_)
            if (p->trainable) p->array.zero_grad();
    }

    double grad_norm() const {
        double s = 0;
        for (const auto& p : params_) {
            if (!p->trainable) continue;
            for (Real g : p->array.grad()) s += static_cast<double>(g) * g;
        }
        return std::sqrt(s);
    }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->array.size();
        return n;
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ------------------------------------------------------------ initialization

inline Tensor xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const Real bound = static_cast<Real>(std::sqrt(6.0 / double(fan_in + fan_out)));
    return Tensor::rand_uniform(rng, fan_in, fan_out, -bound, bound);
}

inline Tensor embedding_init(Rng& rng, std::size_t rows, std::size_t cols) {
    return Tensor::rand_normal(rng, rows, cols, Real(0), Real(0.02));
}

// -------------------------------------------------------------- checkpoints

// Single-file parameter checkpoint:
//   magic 'SGNT', u32 version, length-prefixed config text, u64 param
//   count, then per parameter: name, trainable flag, shape, raw float32
//   little-endian values. Save/load/save round-trips byte-exactly.
namespace ckpt {

constexpr std::uint32_t kMagic = 0x544E4753u; // "SGNT"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto len = read_pod<std::uint64_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw DataError("checkpoint: truncated string");
    return s;
}

struct LoadedParam {
    std::string name;
    bool trainable = true;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;
};

struct Loaded {
    std::string config_text;
    std::vector<LoadedParam> params;
};

inline void save(const std::string& path, const std::string& config_text,
                 const ParameterStore& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    write_pod(os, kMagic);
    write_pod(os, kVersion);
    write_string(os, config_text);
    write_pod<std::uint64_t>(os, store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Parameter& p = store[i];
        write_string(os, p.name);
        write_pod<std::uint8_t>(os, p.trainable ? 1 : 0);
        write_pod<std::uint32_t>(os, 2);
        write_pod<std::uint64_t>(os, p.array.rows());
        write_pod<std::uint64_t>(os, p.array.cols());
        for (Real v : p.array.values()) write_pod<float>(os, static_cast<float>(v));
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

inline Loaded load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint: " + path);
    if (read_pod<std::uint32_t>(is) != kMagic)
        throw DataError("not a segnet checkpoint: " + path);
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    Loaded out;
    out.config_text = read_string(is);
    const auto count = read_pod<std::uint64_t>(is);
    out.params.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        LoadedParam p;
        p.name = read_string(is);
        p.trainable = read_pod<std::uint8_t>(is) != 0;
        const auto ndim = read_pod<std::uint32_t>(is);
        if (ndim != 2) throw DataError("checkpoint: unexpected rank " + std::to_string(ndim));
        p.rows = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
        p.cols = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
        p.values.resize(p.rows * p.cols);
        is.read(reinterpret_cast<char*>(p.values.data()),
                static_cast<std::streamsize>(p.values.size() * sizeof(float)));
        if (!is) throw DataError("checkpoint: truncated values for " + p.name);
        out.params.push_back(std::move(p));
    }
    return out;
}

// Copy loaded values into a freshly constructed store; names and shapes
// must match exactly.
inline void restore(ParameterStore& store, const Loaded& loaded) {
    if (loaded.params.size() != store.size())
        throw DataError("checkpoint parameter count mismatch: file has " +
                        std::to_string(loaded.params.size()) + ", model has " +
                        std::to_string(store.size()));
    for (const auto& lp : loaded.params) {
        Parameter& p = store.at(lp.name);
        if (p.array.rows() != lp.rows || p.array.cols() != lp.cols)
            throw DataError("checkpoint shape mismatch for " + lp.name);
        for (std::size_t i = 0; i < lp.values.size(); ++i)
            p.array.values()[i] = static_cast<Real>(lp.values[i]);
    }
}

} // namespace ckpt

} // namespace segnet
