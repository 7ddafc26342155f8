#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "vfi/blas.hpp"
#include "vfi/tensor.hpp"
#include "vfi/warp.hpp"

namespace vfi::ag {

// Reverse-mode autodiff over Tensor<T>. Ops build a DAG of shared_ptr nodes;
// backward(root) runs one reverse sweep, accumulating into Node::grad.
// Subgraphs whose inputs all have needs_grad=false record no backward closure,
// so frozen-teacher inference costs a plain forward pass.
template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad; // allocated by backward(); same shape as val
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.size() != val.size()) grad = Tensor<T>(val.n, val.c, val.h, val.w);
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(Tensor<T> value, bool needs_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(value);
    n->needs_grad = needs_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return leaf(std::move(value), false);
}

namespace detail_g {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>*)> make_backprop) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(value);
    for (const auto& p : parents)
        if (p->needs_grad) n->needs_grad = true;
    if (n->needs_grad) {
        n->parents = std::move(parents);
        make_backprop(n.get());
    }
    return n;
}

} // namespace detail_g

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    VFI_CHECK(a->val.same_shape(b->val), ShapeError,
              "add " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor<T> out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += b->val.v[i];
    return detail_g::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>* self) {
        self->backprop = [self, a, b]() {
            if (a->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i) a->grad.v[i] += self->grad.v[i];
            if (b->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i) b->grad.v[i] += self->grad.v[i];
        };
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    VFI_CHECK(a->val.same_shape(b->val), ShapeError,
              "sub " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor<T> out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] -= b->val.v[i];
    return detail_g::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>* self) {
        self->backprop = [self, a, b]() {
            if (a->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i) a->grad.v[i] += self->grad.v[i];
            if (b->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i) b->grad.v[i] -= self->grad.v[i];
        };
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    VFI_CHECK(a->val.same_shape(b->val), ShapeError,
              "mul " + a->val.shape_str() + " vs " + b->val.shape_str());
    Tensor<T> out = a->val;
    for (size_t i = 0; i < out.size(); ++i) out.v[i] *= b->val.v[i];
    return detail_g::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>* self) {
        self->backprop = [self, a, b]() {
            if (a->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i)
                    a->grad.v[i] += self->grad.v[i] * b->val.v[i];
            if (b->needs_grad)
                for (size_t i = 0; i < self->grad.size(); ++i)
                    b->grad.v[i] += self->grad.v[i] * a->val.v[i];
        };
    });
}

// y = s * x + o, scalar coefficients.
template <typename T>
Var<T> affine(Var<T> x, T s, T o = T(0)) {
    Tensor<T> out = x->val;
    for (T& v : out.v) v = s * v + o;
    return detail_g::make_op<T>(std::move(out), {x}, [x, s](Node<T>* self) {
        self->backprop = [self, x, s]() {
            for (size_t i = 0; i < self->grad.size(); ++i) x->grad.v[i] += s * self->grad.v[i];
        };
    });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
    return affine(x, s);
}

// Per-sample scalar multiply: y[n] = s[n] * x[n]. Used for the time-dependent
// coefficients in flow combination and blending, one t per batch item.
template <typename T>
Var<T> scale_n(Var<T> x, std::vector<T> s) {
    VFI_CHECK(static_cast<int>(s.size()) == x->val.n, ShapeError, "scale_n coefficient count");
    Tensor<T> out = x->val;
    const size_t per = out.size() / out.n;
    for (int ni = 0; ni < out.n; ++ni)
        for (size_t i = 0; i < per; ++i) out.v[ni * per + i] *= s[ni];
    return detail_g::make_op<T>(std::move(out), {x}, [x, s](Node<T>* self) {
        self->backprop = [self, x, s]() {
            const size_t per = self->grad.size() / self->grad.n;
            for (int ni = 0; ni < self->grad.n; ++ni)
                for (size_t i = 0; i < per; ++i)
                    x->grad.v[ni * per + i] += s[ni] * self->grad.v[ni * per + i];
        };
    });
}

// y[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w] with m broadcast over channels.
template <typename T>
Var<T> mul_bc(Var<T> x, Var<T> m) {
    VFI_CHECK(m->val.c == 1 && m->val.n == x->val.n && m->val.h == x->val.h && m->val.w == x->val.w,
              ShapeError, "mul_bc " + x->val.shape_str() + " vs " + m->val.shape_str());
    Tensor<T> out = x->val;
    const size_t plane = out.plane();
    for (int ni = 0; ni < out.n; ++ni) {
        const T* mm = m->val.sample(ni);
        for (int ci = 0; ci < out.c; ++ci) {
            T* o = out.v.data() + out.idx(ni, ci, 0, 0);
            for (size_t i = 0; i < plane; ++i) o[i] *= mm[i];
        }
    }
    return detail_g::make_op<T>(std::move(out), {x, m}, [x, m](Node<T>* self) {
        self->backprop = [self, x, m]() {
            const size_t plane = self->grad.plane();
            for (int ni = 0; ni < self->grad.n; ++ni) {
                const T* mm = m->val.sample(ni);
                for (int ci = 0; ci < self->grad.c; ++ci) {
                    const T* go = self->grad.v.data() + self->grad.idx(ni, ci, 0, 0);
                    const T* xx = x->val.v.data() + x->val.idx(ni, ci, 0, 0);
                    if (x->needs_grad) {
                        T* gx = x->grad.v.data() + x->grad.idx(ni, ci, 0, 0);
                        for (size_t i = 0; i < plane; ++i) gx[i] += go[i] * mm[i];
                    }
                    if (m->needs_grad) {
                        T* gm = m->grad.sample(ni);
                        for (size_t i = 0; i < plane; ++i) gm[i] += go[i] * xx[i];
                    }
                }
            }
        };
    });
}

// y = x / max(z, eps), z broadcast over channels. Gradient through z passes
// only where z > eps (the guard saturates).
template <typename T>
Var<T> div_bc(Var<T> x, Var<T> z, T eps) {
    VFI_CHECK(z->val.c == 1 && z->val.n == x->val.n && z->val.h == x->val.h && z->val.w == x->val.w,
              ShapeError, "div_bc " + x->val.shape_str() + " vs " + z->val.shape_str());
    Tensor<T> out = x->val;
    const size_t plane = out.plane();
    for (int ni = 0; ni < out.n; ++ni) {
        const T* zz = z->val.sample(ni);
        for (int ci = 0; ci < out.c; ++ci) {
            T* o = out.v.data() + out.idx(ni, ci, 0, 0);
            for (size_t i = 0; i < plane; ++i) o[i] /= std::max(zz[i], eps);
        }
    }
    return detail_g::make_op<T>(std::move(out), {x, z}, [x, z, eps](Node<T>* self) {
        self->backprop = [self, x, z, eps]() {
            const size_t plane = self->grad.plane();
            for (int ni = 0; ni < self->grad.n; ++ni) {
                const T* zz = z->val.sample(ni);
                for (int ci = 0; ci < self->grad.c; ++ci) {
                    const T* go = self->grad.v.data() + self->grad.idx(ni, ci, 0, 0);
                    const T* xx = x->val.v.data() + x->val.idx(ni, ci, 0, 0);
                    if (x->needs_grad) {
                        T* gx = x->grad.v.data() + x->grad.idx(ni, ci, 0, 0);
                        for (size_t i = 0; i < plane; ++i) gx[i] += go[i] / std::max(zz[i], eps);
                    }
                    if (z->needs_grad) {
                        T* gz = z->grad.sample(ni);
                        for (size_t i = 0; i < plane; ++i) {
                            if (zz[i] > eps) {
                                const T zg = zz[i];
                                gz[i] -= go[i] * xx[i] / (zg * zg);
                            }
                        }
                    }
                }
            }
        };
    });
}

// ---- activations ----

template <typename T>
Var<T> leaky_relu(Var<T> x, T alpha) {
    Tensor<T> out = x->val;
    for (T& v : out.v) v = v > T(0) ? v : alpha * v;
    return detail_g::make_op<T>(std::move(out), {x}, [x, alpha](Node<T>* self) {
        self->backprop = [self, x, alpha]() {
            for (size_t i = 0; i < self->grad.size(); ++i)
                x->grad.v[i] += self->grad.v[i] * (x->val.v[i] > T(0) ? T(1) : alpha);
        };
    });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    Tensor<T> out = x->val;
    for (T& v : out.v) v = T(1) / (T(1) + std::exp(-v));
    return detail_g::make_op<T>(std::move(out), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() {
            for (size_t i = 0; i < self->grad.size(); ++i) {
                const T y = self->val.v[i];
                x->grad.v[i] += self->grad.v[i] * y * (T(1) - y);
            }
        };
    });
}

// ---- structure ----

template <typename T>
Var<T> concat_c(const std::vector<Var<T>>& parts) {
    VFI_CHECK(!parts.empty(), ShapeError, "concat_c: empty");
    const Tensor<T>& f = parts.front()->val;
    int ctotal = 0;
    for (const auto& p : parts) {
        VFI_CHECK(p->val.n == f.n && p->val.h == f.h && p->val.w == f.w, ShapeError,
                  "concat_c mismatched " + p->val.shape_str());
        ctotal += p->val.c;
    }
    Tensor<T> out(f.n, ctotal, f.h, f.w);
    const size_t plane = f.plane();
    for (int ni = 0; ni < f.n; ++ni) {
        int co = 0;
        for (const auto& p : parts) {
            std::memcpy(out.v.data() + out.idx(ni, co, 0, 0), p->val.sample(ni),
                        sizeof(T) * p->val.c * plane);
            co += p->val.c;
        }
    }
    return detail_g::make_op<T>(std::move(out), parts, [parts](Node<T>* self) {
        self->backprop = [self, parts]() {
            const size_t plane = self->grad.plane();
            for (int ni = 0; ni < self->grad.n; ++ni) {
                int co = 0;
                for (const auto& p : parts) {
                    if (p->needs_grad) {
                        const T* go = self->grad.v.data() + self->grad.idx(ni, co, 0, 0);
                        T* gp = p->grad.sample(ni);
                        for (size_t i = 0; i < p->val.c * plane; ++i) gp[i] += go[i];
                    }
                    co += p->val.c;
                }
            }
        };
    });
}

template <typename T>
Var<T> slice_c(Var<T> x, int c0, int len) {
    VFI_CHECK(c0 >= 0 && len > 0 && c0 + len <= x->val.c, ShapeError, "slice_c range");
    Tensor<T> out(x->val.n, len, x->val.h, x->val.w);
    const size_t plane = x->val.plane();
    for (int ni = 0; ni < x->val.n; ++ni)
        std::memcpy(out.sample(ni), x->val.v.data() + x->val.idx(ni, c0, 0, 0),
                    sizeof(T) * len * plane);
    return detail_g::make_op<T>(std::move(out), {x}, [x, c0, len](Node<T>* self) {
        self->backprop = [self, x, c0, len]() {
            const size_t plane = self->grad.plane();
            for (int ni = 0; ni < self->grad.n; ++ni) {
                const T* go = self->grad.sample(ni);
                T* gx = x->grad.v.data() + x->grad.idx(ni, c0, 0, 0);
                for (size_t i = 0; i < static_cast<size_t>(len) * plane; ++i) gx[i] += go[i];
            }
        };
    });
}

template <typename T>
Var<T> pad_replicate(Var<T> x, int left, int right, int top, int bottom) {
    const int H = x->val.h, W = x->val.w;
    Tensor<T> out(x->val.n, x->val.c, H + top + bottom, W + left + right);
    for (int ni = 0; ni < out.n; ++ni)
        for (int ci = 0; ci < out.c; ++ci)
            for (int y = 0; y < out.h; ++y) {
                const int sy = std::min(H - 1, std::max(0, y - top));
                for (int xo = 0; xo < out.w; ++xo) {
                    const int sx = std::min(W - 1, std::max(0, xo - left));
                    out.at(ni, ci, y, xo) = x->val.at(ni, ci, sy, sx);
                }
            }
    return detail_g::make_op<T>(std::move(out), {x}, [x, left, top](Node<T>* self) {
        self->backprop = [self, x, left, top]() {
            const int H = x->val.h, W = x->val.w;
            for (int ni = 0; ni < self->grad.n; ++ni)
                for (int ci = 0; ci < self->grad.c; ++ci)
                    for (int y = 0; y < self->grad.h; ++y) {
                        const int sy = std::min(H - 1, std::max(0, y - top));
                        for (int xo = 0; xo < self->grad.w; ++xo) {
                            const int sx = std::min(W - 1, std::max(0, xo - left));
                            x->grad.at(ni, ci, sy, sx) += self->grad.at(ni, ci, y, xo);
                        }
                    }
        };
    });
}

template <typename T>
Var<T> crop(Var<T> x, int x0, int y0, int cw, int ch) {
    VFI_CHECK(x0 >= 0 && y0 >= 0 && x0 + cw <= x->val.w && y0 + ch <= x->val.h, ShapeError,
              "crop window out of range");
    Tensor<T> out(x->val.n, x->val.c, ch, cw);
    for (int ni = 0; ni < out.n; ++ni)
        for (int ci = 0; ci < out.c; ++ci)
            for (int y = 0; y < ch; ++y)
                std::memcpy(out.v.data() + out.idx(ni, ci, y, 0),
                            x->val.v.data() + x->val.idx(ni, ci, y + y0, x0), sizeof(T) * cw);
    return detail_g::make_op<T>(std::move(out), {x}, [x, x0, y0](Node<T>* self) {
        self->backprop = [self, x, x0, y0]() {
            for (int ni = 0; ni < self->grad.n; ++ni)
                for (int ci = 0; ci < self->grad.c; ++ci)
                    for (int y = 0; y < self->grad.h; ++y) {
                        const T* go = self->grad.v.data() + self->grad.idx(ni, ci, y, 0);
                        T* gx = x->grad.v.data() + x->grad.idx(ni, ci, y + y0, x0);
                        for (int xo = 0; xo < self->grad.w; ++xo) gx[xo] += go[xo];
                    }
        };
    });
}

// ---- resampling ----

template <typename T>
Var<T> upsample_nearest2(Var<T> x) {
    const int H = x->val.h, W = x->val.w;
    Tensor<T> out(x->val.n, x->val.c, H * 2, W * 2);
    for (int ni = 0; ni < out.n; ++ni)
        for (int ci = 0; ci < out.c; ++ci)
            for (int y = 0; y < out.h; ++y) {
                const T* s = x->val.v.data() + x->val.idx(ni, ci, y / 2, 0);
                T* d = out.v.data() + out.idx(ni, ci, y, 0);
                for (int xo = 0; xo < out.w; ++xo) d[xo] = s[xo / 2];
            }
    return detail_g::make_op<T>(std::move(out), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() {
            for (int ni = 0; ni < self->grad.n; ++ni)
                for (int ci = 0; ci < self->grad.c; ++ci)
                    for (int y = 0; y < self->grad.h; ++y) {
                        const T* go = self->grad.v.data() + self->grad.idx(ni, ci, y, 0);
                        T* gx = x->grad.v.data() + x->grad.idx(ni, ci, y / 2, 0);
                        for (int xo = 0; xo < self->grad.w; ++xo) gx[xo / 2] += go[xo];
                    }
        };
    });
}

namespace detail_g {

// 2x bilinear taps, align_corners=false: output index 2k maps to source
// k-0.25, index 2k+1 to k+0.25, edges clamped.
inline void bilerp2_taps(int oi, int n, int& i0, int& i1, double& w1) {
    const int k = oi / 2;
    if (oi % 2 == 0) {
        i0 = std::max(0, k - 1);
        i1 = k;
        w1 = (k == 0) ? 1.0 : 0.75;
    } else {
        i0 = k;
        i1 = std::min(n - 1, k + 1);
        w1 = (k + 1 > n - 1) ? 0.0 : 0.25;
    }
}

} // namespace detail_g

template <typename T>
Var<T> upsample_bilinear2(Var<T> x) {
    const int H = x->val.h, W = x->val.w;
    Tensor<T> out(x->val.n, x->val.c, H * 2, W * 2);
    for (int ni = 0; ni < out.n; ++ni)
        for (int ci = 0; ci < out.c; ++ci) {
            const T* s = x->val.v.data() + x->val.idx(ni, ci, 0, 0);
            T* d = out.v.data() + out.idx(ni, ci, 0, 0);
            for (int y = 0; y < 2 * H; ++y) {
                int y0, y1;
                double wy1;
                detail_g::bilerp2_taps(y, H, y0, y1, wy1);
                for (int xo = 0; xo < 2 * W; ++xo) {
                    int x0, x1;
                    double wx1;
                    detail_g::bilerp2_taps(xo, W, x0, x1, wx1);
                    const double v00 = s[static_cast<size_t>(y0) * W + x0];
                    const double v01 = s[static_cast<size_t>(y0) * W + x1];
                    const double v10 = s[static_cast<size_t>(y1) * W + x0];
                    const double v11 = s[static_cast<size_t>(y1) * W + x1];
                    const double top = (1.0 - wx1) * v00 + wx1 * v01;
                    const double bot = (1.0 - wx1) * v10 + wx1 * v11;
                    d[static_cast<size_t>(y) * 2 * W + xo] =
                        static_cast<T>((1.0 - wy1) * top + wy1 * bot);
                }
            }
        }
    return detail_g::make_op<T>(std::move(out), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() {
            const int H = x->val.h, W = x->val.w;
            for (int ni = 0; ni < self->grad.n; ++ni)
                for (int ci = 0; ci < self->grad.c; ++ci) {
                    T* gx = x->grad.v.data() + x->grad.idx(ni, ci, 0, 0);
                    const T* go = self->grad.v.data() + self->grad.idx(ni, ci, 0, 0);
                    for (int y = 0; y < 2 * H; ++y) {
                        int y0, y1;
                        double wy1;
                        detail_g::bilerp2_taps(y, H, y0, y1, wy1);
                        for (int xo = 0; xo < 2 * W; ++xo) {
                            int x0, x1;
                            double wx1;
                            detail_g::bilerp2_taps(xo, W, x0, x1, wx1);
                            const T g = go[static_cast<size_t>(y) * 2 * W + xo];
                            gx[static_cast<size_t>(y0) * W + x0] +=
                                static_cast<T>((1.0 - wy1) * (1.0 - wx1)) * g;
                            gx[static_cast<size_t>(y0) * W + x1] +=
                                static_cast<T>((1.0 - wy1) * wx1) * g;
                            gx[static_cast<size_t>(y1) * W + x0] +=
                                static_cast<T>(wy1 * (1.0 - wx1)) * g;
                            gx[static_cast<size_t>(y1) * W + x1] += static_cast<T>(wy1 * wx1) * g;
                        }
                    }
                }
        };
    });
}

// ---- warping and spatial gradients ----

template <typename T>
Var<T> warp(Var<T> src, Var<T> flow) {
    check_warp_inputs(src->val, flow->val);
    Tensor<T> out(src->val.n, src->val.c, src->val.h, src->val.w);
    vfi::detail::warp_forward(src->val, flow->val, out);
    return detail_g::make_op<T>(std::move(out), {src, flow}, [src, flow](Node<T>* self) {
        self->backprop = [self, src, flow]() {
            vfi::detail::warp_backward(src->val, flow->val, self->grad,
                                       src->needs_grad ? &src->grad : nullptr,
                                       flow->needs_grad ? &flow->grad : nullptr);
        };
    });
}

template <typename T>
Var<T> grad_x(Var<T> x) {
    Tensor<T> out(x->val.n, x->val.c, x->val.h, x->val.w);
    vfi::detail::gradx_forward(x->val, out);
    return detail_g::make_op<T>(std::move(out), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() { vfi::detail::gradx_backward(self->grad, x->grad); };
    });
}

template <typename T>
Var<T> grad_y(Var<T> x) {
    Tensor<T> out(x->val.n, x->val.c, x->val.h, x->val.w);
    vfi::detail::grady_forward(x->val, out);
    return detail_g::make_op<T>(std::move(out), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() { vfi::detail::grady_backward(self->grad, x->grad); };
    });
}

// ---- reductions ----

template <typename T>
Var<T> mean_abs(Var<T> x) {
    double s = 0;
    for (T v : x->val.v) s += std::abs(static_cast<double>(v));
    const T m = static_cast<T>(s / static_cast<double>(x->val.size()));
    return detail_g::make_op<T>(Tensor<T>::scalar(m), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() {
            const T g = self->grad.v[0] / static_cast<T>(x->val.size());
            for (size_t i = 0; i < x->val.size(); ++i) {
                const T v = x->val.v[i];
                x->grad.v[i] += v > T(0) ? g : (v < T(0) ? -g : T(0));
            }
        };
    });
}

template <typename T>
Var<T> mean_sq(Var<T> x) {
    double s = 0;
    for (T v : x->val.v) s += static_cast<double>(v) * static_cast<double>(v);
    const T m = static_cast<T>(s / static_cast<double>(x->val.size()));
    return detail_g::make_op<T>(Tensor<T>::scalar(m), {x}, [x](Node<T>* self) {
        self->backprop = [self, x]() {
            const T g = T(2) * self->grad.v[0] / static_cast<T>(x->val.size());
            for (size_t i = 0; i < x->val.size(); ++i) x->grad.v[i] += g * x->val.v[i];
        };
    });
}

// ---- convolution ----

namespace detail_g {

// Batched im2col: col is [C*kh*kw, N*OH*OW], column index ((n*OH+oy)*OW+ox).
template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int oh, int ow,
            std::vector<T>& col) {
    const int N = x.n, C = x.c, H = x.h, W = x.w;
    const size_t ncols = static_cast<size_t>(N) * oh * ow;
    col.assign(static_cast<size_t>(C) * kh * kw * ncols, T(0));
    for (int ci = 0; ci < C; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = col.data() + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) * ncols;
                for (int ni = 0; ni < N; ++ni) {
                    const T* src = x.v.data() + x.idx(ni, ci, 0, 0);
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        T* drow = dst + (static_cast<size_t>(ni) * oh + oy) * ow;
                        if (iy < 0 || iy >= H) continue; // stays zero
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) drow[ox] = src[static_cast<size_t>(iy) * W + ix];
                        }
                    }
                }
            }
}

template <typename T>
void col2im_accumulate(const std::vector<T>& col, int kh, int kw, int stride, int pad, int oh,
                       int ow, Tensor<T>& gx) {
    const int N = gx.n, C = gx.c, H = gx.h, W = gx.w;
    const size_t ncols = static_cast<size_t>(N) * oh * ow;
    for (int ci = 0; ci < C; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = col.data() + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) * ncols;
                for (int ni = 0; ni < N; ++ni) {
                    T* dst = gx.v.data() + gx.idx(ni, ci, 0, 0);
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const T* srow = src + (static_cast<size_t>(ni) * oh + oy) * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) dst[static_cast<size_t>(iy) * W + ix] += srow[ox];
                        }
                    }
                }
            }
}

} // namespace detail_g

// conv2d with weight [outC, inC, kh, kw] and bias [1, outC, 1, 1]; zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad) {
    const Tensor<T>& xv = x->val;
    const Tensor<T>& wv = weight->val;
    VFI_CHECK(wv.c == xv.c, ShapeError,
              "conv2d: weight expects " + std::to_string(wv.c) + " input channels, got " +
                  std::to_string(xv.c));
    VFI_CHECK(bias->val.c == wv.n && bias->val.size() == static_cast<size_t>(wv.n), ShapeError,
              "conv2d: bias shape");
    const int kh = wv.h, kw = wv.w, outc = wv.n;
    const int oh = (xv.h + 2 * pad - kh) / stride + 1;
    const int ow = (xv.w + 2 * pad - kw) / stride + 1;
    VFI_CHECK(oh > 0 && ow > 0, ShapeError, "conv2d: input smaller than kernel");

    auto col = std::make_shared<std::vector<T>>();
    detail_g::im2col(xv, kh, kw, stride, pad, oh, ow, *col);
    const size_t ncols = static_cast<size_t>(xv.n) * oh * ow;
    const int K = xv.c * kh * kw;

    // ybuf [outC, N*OH*OW], then permute into NCHW with bias added.
    std::vector<T> ybuf(static_cast<size_t>(outc) * ncols);
    vfi::detail::gemm<T>(false, false, outc, static_cast<int>(ncols), K, wv.v.data(), K,
                         col->data(), static_cast<int>(ncols), T(0), ybuf.data(),
                         static_cast<int>(ncols));
    Tensor<T> out(xv.n, outc, oh, ow);
    const size_t plane = static_cast<size_t>(oh) * ow;
    for (int ni = 0; ni < xv.n; ++ni)
        for (int co = 0; co < outc; ++co) {
            const T* s = ybuf.data() + co * ncols + static_cast<size_t>(ni) * plane;
            T* d = out.v.data() + out.idx(ni, co, 0, 0);
            const T b = bias->val.v[co];
            for (size_t i = 0; i < plane; ++i) d[i] = s[i] + b;
        }

    return detail_g::make_op<T>(
        std::move(out), {x, weight, bias}, [x, weight, bias, col, stride, pad, oh, ow](Node<T>* self) {
            self->backprop = [self, x, weight, bias, col, stride, pad, oh, ow]() {
                const Tensor<T>& xv = x->val;
                const Tensor<T>& wv = weight->val;
                const int kh = wv.h, kw = wv.w, outc = wv.n;
                const int K = xv.c * kh * kw;
                const size_t ncols = static_cast<size_t>(xv.n) * oh * ow;
                const size_t plane = static_cast<size_t>(oh) * ow;

                // Repack upstream grad as [outC, N*OH*OW].
                std::vector<T> gy(static_cast<size_t>(outc) * ncols);
                for (int ni = 0; ni < xv.n; ++ni)
                    for (int co = 0; co < outc; ++co)
                        std::memcpy(gy.data() + co * ncols + static_cast<size_t>(ni) * plane,
                                    self->grad.v.data() + self->grad.idx(ni, co, 0, 0),
                                    sizeof(T) * plane);

                if (bias->needs_grad) {
                    for (int co = 0; co < outc; ++co) {
                        double s = 0;
                        const T* g = gy.data() + co * ncols;
                        for (size_t i = 0; i < ncols; ++i) s += static_cast<double>(g[i]);
                        bias->grad.v[co] += static_cast<T>(s);
                    }
                }
                if (weight->needs_grad) {
                    // dW[outC,K] += gy[outC,ncols] * col^T[ncols,K]
                    vfi::detail::gemm<T>(false, true, outc, K, static_cast<int>(ncols), gy.data(),
                                         static_cast<int>(ncols), col->data(),
                                         static_cast<int>(ncols), T(1), weight->grad.v.data(), K);
                }
                if (x->needs_grad) {
                    std::vector<T> gcol(static_cast<size_t>(K) * ncols);
                    // gcol[K,ncols] = W^T[K,outC] * gy[outC,ncols]
                    vfi::detail::gemm<T>(true, false, K, static_cast<int>(ncols), outc,
                                         wv.v.data(), K, gy.data(), static_cast<int>(ncols), T(0),
                                         gcol.data(), static_cast<int>(ncols));
                    detail_g::col2im_accumulate(gcol, kh, kw, stride, pad, oh, ow, x->grad);
                }
            };
        });
}

// ---- backward sweep ----

template <typename T>
void backward(Var<T> root) {
    VFI_CHECK(root->val.size() == 1, ShapeError, "backward: root must be scalar");
    VFI_CHECK(root->needs_grad, ConfigError, "backward: root does not require grad");

    // Iterative post-order DFS over needs-grad ancestors.
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* n : topo) n->ensure_grad();
    root->grad.v[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

template <typename T>
T scalar_value(const Var<T>& v) {
    VFI_CHECK(v->val.size() == 1, ShapeError, "scalar_value: not a scalar");
    return v->val.v[0];
}

} // namespace vfi::ag
