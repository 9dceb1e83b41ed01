#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <string>
#include <vector>

#include "sdg/rng.hpp"

namespace sdg {

// 64-byte-aligned storage. Uniform alignment keeps Eigen's vectorized kernels
// on one code path regardless of where the heap places a buffer, so results
// are bit-identical across runs.
template <class T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAlloc() = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

// Dense row-major tensor. Deliberately minimal: modules know their own shapes
// and index explicitly; heavy lifting goes through Eigen maps in nn.hpp.
template <class T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T, AlignedAlloc<T>> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), v((size_t)numel_of(shape), T(0)) {}
    Tensor(std::initializer_list<int64_t> s) : Tensor(std::vector<int64_t>(s)) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    int64_t numel() const { return (int64_t)v.size(); }
    int64_t dim(int i) const { return shape[(size_t)i]; }
    int rank() const { return (int)shape.size(); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](int64_t i) { return v[(size_t)i]; }
    const T& operator[](int64_t i) const { return v[(size_t)i]; }

    void zero() { std::fill(v.begin(), v.end(), T(0)); }
    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    void add(const Tensor<T>& o) {
        assert(numel() == o.numel());
        for (int64_t i = 0; i < numel(); ++i) v[(size_t)i] += o.v[(size_t)i];
    }

    void scale(T s) {
        for (auto& x : v) x *= s;
    }

    void fill_normal(Rng& rng, T stddev) {
        for (auto& x : v) x = (T)(rng.normal() * (double)stddev);
    }

    void fill_uniform(Rng& rng, T lo, T hi) {
        for (auto& x : v) x = (T)rng.uniform((double)lo, (double)hi);
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = (U)v[i];
        return out;
    }

    bool same_shape(const Tensor<T>& o) const { return shape == o.shape; }
};

template <class T>
inline std::string shape_str(const Tensor<T>& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

} // namespace sdg
