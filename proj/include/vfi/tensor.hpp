#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "vfi/common.hpp"

namespace vfi {

// Dense 4-D tensor in NCHW layout. Frames are [N,3,H,W] with values in [0,1],
// flow fields are [N,2,H,W] (channel 0 horizontal, channel 1 vertical, in
// pixels of displacement), visibility maps are [N,1,H,W], scalars [1,1,1,1].
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, T(0)) {}

    static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }

    static Tensor full(int n, int c, int h, int w, T value) {
        Tensor t(n, c, h, w);
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return full(1, 1, 1, 1, value); }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }
    size_t plane() const { return static_cast<size_t>(h) * w; }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + "]";
    }

    size_t idx(int ni, int ci, int yi, int xi) const {
        return ((static_cast<size_t>(ni) * c + ci) * h + yi) * w + xi;
    }
    T& at(int ni, int ci, int yi, int xi) { return v[idx(ni, ci, yi, xi)]; }
    T at(int ni, int ci, int yi, int xi) const { return v[idx(ni, ci, yi, xi)]; }

    // Pointer to the [C,H,W] block of sample ni.
    T* sample(int ni) { return v.data() + static_cast<size_t>(ni) * c * h * w; }
    const T* sample(int ni) const { return v.data() + static_cast<size_t>(ni) * c * h * w; }

    void fill(T value) { std::fill(v.begin(), v.end(), value); }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    T min_value() const { return *std::min_element(v.begin(), v.end()); }
    T max_value() const { return *std::max_element(v.begin(), v.end()); }

    double mean() const {
        double s = 0;
        for (T x : v) s += static_cast<double>(x);
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }

    double max_abs_diff(const Tensor& o) const {
        VFI_CHECK(same_shape(o), ShapeError, "max_abs_diff " + shape_str() + " vs " + o.shape_str());
        double m = 0;
        for (size_t i = 0; i < v.size(); ++i)
            m = std::max(m, std::abs(static_cast<double>(v[i]) - static_cast<double>(o.v[i])));
        return m;
    }

    Tensor slice_sample(int ni) const {
        Tensor out(1, c, h, w);
        std::memcpy(out.v.data(), sample(ni), sizeof(T) * c * plane());
        return out;
    }

    void set_sample(int ni, const Tensor& src) {
        VFI_CHECK(src.n == 1 && src.c == c && src.h == h && src.w == w, ShapeError,
                  "set_sample " + src.shape_str() + " into " + shape_str());
        std::memcpy(sample(ni), src.v.data(), sizeof(T) * c * plane());
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(n, c, h, w);
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    Tensor clamped(T lo, T hi) const {
        Tensor out = *this;
        for (T& x : out.v) x = std::min(hi, std::max(lo, x));
        return out;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// A frame is any [N,3,H,W] tensor; validity at ingestion means finite and in [0,1].
template <typename T>
bool is_valid_frame(const Tensor<T>& t) {
    if (t.c != 3 || t.n < 1 || t.h < 1 || t.w < 1) return false;
    for (T x : t.v)
        if (!(x >= T(0) && x <= T(1))) return false;
    return true;
}

// Batch helper: stack n single-sample tensors of identical shape.
template <typename T>
Tensor<T> stack_samples(const std::vector<Tensor<T>>& items) {
    VFI_CHECK(!items.empty(), ShapeError, "stack_samples: empty batch");
    const Tensor<T>& f = items.front();
    Tensor<T> out(static_cast<int>(items.size()), f.c, f.h, f.w);
    for (size_t i = 0; i < items.size(); ++i) out.set_sample(static_cast<int>(i), items[i]);
    return out;
}

} // namespace vfi
