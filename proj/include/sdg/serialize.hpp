#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdg/common.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

// Checkpoint container: magic, json header (kind/dtype/meta/tensor index),
// raw tensor payload, trailing sha256 of everything before it. The loader
// recomputes the digest and rejects mismatches; consumers match `kind` and
// their own config fields from `meta`.
struct Checkpoint {
    std::string kind;
    std::string dtype; // "f32" or "f64"
    nlohmann::json meta;
    std::map<std::string, std::pair<std::vector<int64_t>, std::vector<double>>> tensors;

    template <class T>
    void put(const std::string& name, const Tensor<T>& t) {
        std::vector<double> buf(t.v.begin(), t.v.end());
        tensors[name] = {t.shape, std::move(buf)};
    }

    template <class T>
    void get(const std::string& name, Tensor<T>& t) const {
        auto it = tensors.find(name);
        require(it != tensors.end(), "checkpoint: missing tensor '" + name + "'");
        require(it->second.first == t.shape,
                "checkpoint: shape mismatch for '" + name + "' (config/checkpoint disagree)");
        for (size_t i = 0; i < t.v.size(); ++i) t.v[i] = (T)it->second.second[i];
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

// Writes with the payload encoded at the given dtype ("f32" for production).
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind);

} // namespace sdg
