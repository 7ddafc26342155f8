#pragma once

#include "vfi/tensor.hpp"

namespace vfi {

// Backward warping and spatial-gradient primitives. Forward kernels are shared
// by the plain API below and the autodiff ops in graph.hpp, so there is a
// single source of truth for the sampling rule.
//
// Sampling rule: out[y,x] reads src at (x + fx[y,x], y + fy[y,x]) with
// bilinear weights; sample coordinates outside the raster clamp to the
// nearest edge coordinate.

namespace detail {

template <typename T>
void warp_forward(const Tensor<T>& src, const Tensor<T>& flow, Tensor<T>& out) {
    const int N = src.n, C = src.c, H = src.h, W = src.w;
    for (int ni = 0; ni < N; ++ni) {
        const T* fx = flow.v.data() + flow.idx(ni, 0, 0, 0);
        const T* fy = flow.v.data() + flow.idx(ni, 1, 0, 0);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const size_t p = static_cast<size_t>(y) * W + x;
                T sx = static_cast<T>(x) + fx[p];
                T sy = static_cast<T>(y) + fy[p];
                sx = std::min(static_cast<T>(W - 1), std::max(T(0), sx));
                sy = std::min(static_cast<T>(H - 1), std::max(T(0), sy));
                const int x0 = std::min(static_cast<int>(sx), W - 1);
                const int y0 = std::min(static_cast<int>(sy), H - 1);
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const T ax = sx - static_cast<T>(x0);
                const T ay = sy - static_cast<T>(y0);
                const T w00 = (T(1) - ax) * (T(1) - ay);
                const T w01 = ax * (T(1) - ay);
                const T w10 = (T(1) - ax) * ay;
                const T w11 = ax * ay;
                for (int ci = 0; ci < C; ++ci) {
                    const T* s = src.v.data() + src.idx(ni, ci, 0, 0);
                    out.v[out.idx(ni, ci, y, x)] =
                        w00 * s[static_cast<size_t>(y0) * W + x0] +
                        w01 * s[static_cast<size_t>(y0) * W + x1] +
                        w10 * s[static_cast<size_t>(y1) * W + x0] +
                        w11 * s[static_cast<size_t>(y1) * W + x1];
                }
            }
        }
    }
}

// Accumulates into g_src / g_flow (either may be null when not needed).
template <typename T>
void warp_backward(const Tensor<T>& src, const Tensor<T>& flow, const Tensor<T>& g_out,
                   Tensor<T>* g_src, Tensor<T>* g_flow) {
    const int N = src.n, C = src.c, H = src.h, W = src.w;
    for (int ni = 0; ni < N; ++ni) {
        const T* fx = flow.v.data() + flow.idx(ni, 0, 0, 0);
        const T* fy = flow.v.data() + flow.idx(ni, 1, 0, 0);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const size_t p = static_cast<size_t>(y) * W + x;
                T sx = static_cast<T>(x) + fx[p];
                T sy = static_cast<T>(y) + fy[p];
                const bool in_x = sx > T(0) && sx < static_cast<T>(W - 1);
                const bool in_y = sy > T(0) && sy < static_cast<T>(H - 1);
                sx = std::min(static_cast<T>(W - 1), std::max(T(0), sx));
                sy = std::min(static_cast<T>(H - 1), std::max(T(0), sy));
                const int x0 = std::min(static_cast<int>(sx), W - 1);
                const int y0 = std::min(static_cast<int>(sy), H - 1);
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const T ax = sx - static_cast<T>(x0);
                const T ay = sy - static_cast<T>(y0);
                T gfx = 0, gfy = 0;
                for (int ci = 0; ci < C; ++ci) {
                    const T* s = src.v.data() + src.idx(ni, ci, 0, 0);
                    const T go = g_out.v[g_out.idx(ni, ci, y, x)];
                    const T s00 = s[static_cast<size_t>(y0) * W + x0];
                    const T s01 = s[static_cast<size_t>(y0) * W + x1];
                    const T s10 = s[static_cast<size_t>(y1) * W + x0];
                    const T s11 = s[static_cast<size_t>(y1) * W + x1];
                    if (g_src) {
                        T* gs = g_src->v.data() + g_src->idx(ni, ci, 0, 0);
                        gs[static_cast<size_t>(y0) * W + x0] += go * (T(1) - ax) * (T(1) - ay);
                        gs[static_cast<size_t>(y0) * W + x1] += go * ax * (T(1) - ay);
                        gs[static_cast<size_t>(y1) * W + x0] += go * (T(1) - ax) * ay;
                        gs[static_cast<size_t>(y1) * W + x1] += go * ax * ay;
                    }
                    // d/dsx and d/dsy of the bilinear blend; clamp saturates the
                    // coordinate, so the flow gradient vanishes outside the raster.
                    gfx += go * ((T(1) - ay) * (s01 - s00) + ay * (s11 - s10));
                    gfy += go * ((T(1) - ax) * (s10 - s00) + ax * (s11 - s01));
                }
                if (g_flow) {
                    if (in_x) g_flow->v[g_flow->idx(ni, 0, y, x)] += gfx;
                    if (in_y) g_flow->v[g_flow->idx(ni, 1, y, x)] += gfy;
                }
            }
        }
    }
}

// Forward differences; the collapsed last column/row is zero.
template <typename T>
void gradx_forward(const Tensor<T>& in, Tensor<T>& out) {
    const int W = in.w;
    const size_t planes = in.size() / in.plane();
    for (size_t pc = 0; pc < planes; ++pc) {
        const T* s = in.v.data() + pc * in.plane();
        T* d = out.v.data() + pc * in.plane();
        for (int y = 0; y < in.h; ++y) {
            const size_t row = static_cast<size_t>(y) * W;
            for (int x = 0; x + 1 < W; ++x) d[row + x] = s[row + x + 1] - s[row + x];
            d[row + W - 1] = T(0);
        }
    }
}

template <typename T>
void grady_forward(const Tensor<T>& in, Tensor<T>& out) {
    const int W = in.w, H = in.h;
    const size_t planes = in.size() / in.plane();
    for (size_t pc = 0; pc < planes; ++pc) {
        const T* s = in.v.data() + pc * in.plane();
        T* d = out.v.data() + pc * in.plane();
        for (int y = 0; y + 1 < H; ++y)
            for (int x = 0; x < W; ++x)
                d[static_cast<size_t>(y) * W + x] =
                    s[static_cast<size_t>(y + 1) * W + x] - s[static_cast<size_t>(y) * W + x];
        for (int x = 0; x < W; ++x) d[static_cast<size_t>(H - 1) * W + x] = T(0);
    }
}

template <typename T>
void gradx_backward(const Tensor<T>& g_out, Tensor<T>& g_in) {
    const int W = g_out.w;
    const size_t planes = g_out.size() / g_out.plane();
    for (size_t pc = 0; pc < planes; ++pc) {
        const T* go = g_out.v.data() + pc * g_out.plane();
        T* gi = g_in.v.data() + pc * g_out.plane();
        for (int y = 0; y < g_out.h; ++y) {
            const size_t row = static_cast<size_t>(y) * W;
            for (int x = 0; x < W; ++x) {
                T g = 0;
                if (x + 1 < W) g -= go[row + x];
                if (x >= 1) g += go[row + x - 1];
                gi[row + x] += g;
            }
        }
    }
}

template <typename T>
void grady_backward(const Tensor<T>& g_out, Tensor<T>& g_in) {
    const int W = g_out.w, H = g_out.h;
    const size_t planes = g_out.size() / g_out.plane();
    for (size_t pc = 0; pc < planes; ++pc) {
        const T* go = g_out.v.data() + pc * g_out.plane();
        T* gi = g_in.v.data() + pc * g_out.plane();
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                T g = 0;
                if (y + 1 < H) g -= go[static_cast<size_t>(y) * W + x];
                if (y >= 1) g += go[static_cast<size_t>(y - 1) * W + x];
                gi[static_cast<size_t>(y) * W + x] += g;
            }
    }
}

} // namespace detail

template <typename T>
void check_warp_inputs(const Tensor<T>& src, const Tensor<T>& flow) {
    VFI_CHECK(flow.c == 2, ShapeError, "flow must have 2 channels, got " + flow.shape_str());
    VFI_CHECK(src.n == flow.n && src.h == flow.h && src.w == flow.w, ShapeError,
              "warp: src " + src.shape_str() + " vs flow " + flow.shape_str());
    VFI_CHECK(flow.all_finite(), NumericError, "warp: non-finite flow");
}

// The operator that bilinearly samples src at positions displaced by flow.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& src, const Tensor<T>& flow) {
    check_warp_inputs(src, flow);
    Tensor<T> out(src.n, src.c, src.h, src.w);
    detail::warp_forward(src, flow, out);
    return out;
}

// Forward-difference spatial gradients; degenerate 1xN / Nx1 axes yield zeros.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> spatial_gradient(const Tensor<T>& field) {
    Tensor<T> dx(field.n, field.c, field.h, field.w);
    Tensor<T> dy(field.n, field.c, field.h, field.w);
    detail::gradx_forward(field, dx);
    detail::grady_forward(field, dy);
    return {std::move(dx), std::move(dy)};
}

} // namespace vfi
