#pragma once

#include <cassert>
#include <cstddef>
#include <cstdlib>
#include <new>
#include <vector>

#include "synth/rng.hpp"

namespace synth {

// 64-byte-aligned storage for every buffer that reaches a SIMD kernel, so the
// chosen instruction path (and therefore the rounding order) never depends on
// where the heap happened to place the data.
template <typename T, size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}

    T* allocate(size_t n) {
        const size_t bytes = ((n * sizeof(T) + Align - 1) / Align) * Align;
        void* p = std::aligned_alloc(Align, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) { std::free(p); }

    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};

using FloatVec = std::vector<float, AlignedAllocator<float>>;

// Dense CHW float tensor. Small images, value semantics throughout.
struct Tensor {
    int c = 0, h = 0, w = 0;
    FloatVec v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(size_t(c_) * h_ * w_, 0.f) {}

    float& at(int ch, int y, int x) { return v[(size_t(ch) * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return v[(size_t(ch) * h + y) * w + x]; }

    size_t size() const { return v.size(); }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    void fill(float x) { std::fill(v.begin(), v.end(), x); }

    Tensor& operator+=(const Tensor& o) {
        assert(same_shape(o));
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        assert(same_shape(o));
        for (size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
        return *this;
    }
    Tensor& operator*=(float s) {
        for (auto& x : v) x *= s;
        return *this;
    }
};

inline Tensor normal_tensor(int c, int h, int w, Rng& rng) {
    Tensor t(c, h, w);
    rng.fill_normal(t.v);
    return t;
}

inline Tensor normal_like(const Tensor& ref, uint64_t seed) {
    Rng rng(seed);
    return normal_tensor(ref.c, ref.h, ref.w, rng);
}

}  // namespace synth
