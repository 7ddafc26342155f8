#include <doctest.h>

#include "test_support.hpp"
#include "vfi/graph.hpp"

using namespace vfi;
using ag::Var;

namespace {

// Naive direct convolution, zero padding. Independent of the im2col path.
TensorD conv_reference(const TensorD& x, const TensorD& w, const TensorD& b, int stride, int pad) {
    const int oh = (x.h + 2 * pad - w.h) / stride + 1;
    const int ow = (x.w + 2 * pad - w.w) / stride + 1;
    TensorD out(x.n, w.n, oh, ow);
    for (int ni = 0; ni < x.n; ++ni)
        for (int co = 0; co < w.n; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = b.v[co];
                    for (int ci = 0; ci < x.c; ++ci)
                        for (int ky = 0; ky < w.h; ++ky)
                            for (int kx = 0; kx < w.w; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                                acc += x.at(ni, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    out.at(ni, co, oy, ox) = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv2d forward matches the direct-convolution reference") {
    Rng rng(21);
    for (int iter = 0; iter < 8; ++iter) {
        const int n = rng.uniform_int(1, 3), cin = rng.uniform_int(1, 4), cout = rng.uniform_int(1, 5);
        const int h = rng.uniform_int(3, 9), w = rng.uniform_int(3, 9);
        const int stride = rng.uniform_int(1, 2);
        TensorD x = gradcheck::random_tensor(n, cin, h, w, rng, -1, 1);
        TensorD wt = gradcheck::random_tensor(cout, cin, 3, 3, rng, -1, 1);
        TensorD b = gradcheck::random_tensor(1, cout, 1, 1, rng, -1, 1);
        auto y = ag::conv2d(ag::constant(x), ag::constant(wt), ag::constant(b), stride, 1);
        CHECK(y->val.max_abs_diff(conv_reference(x, wt, b, stride, 1)) < 1e-10);
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(22);
    for (int stride : {1, 2}) {
        TensorD x = gradcheck::random_tensor(2, 2, 5, 6, rng, -1, 1);
        TensorD wt = gradcheck::random_tensor(3, 2, 3, 3, rng, -1, 1);
        TensorD b = gradcheck::random_tensor(1, 3, 1, 1, rng, -1, 1);
        double err = gradcheck::max_rel_error(
            [stride](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::conv2d(in[0], in[1], in[2], stride, 1));
            },
            {x, wt, b});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("elementwise and broadcast op gradients") {
    Rng rng(23);
    TensorD a = gradcheck::random_tensor(2, 3, 4, 4, rng, 0.1, 1.0);
    TensorD b = gradcheck::random_tensor(2, 3, 4, 4, rng, 0.1, 1.0);
    TensorD m = gradcheck::random_tensor(2, 1, 4, 4, rng, 0.2, 0.9);

    SUBCASE("add/sub/mul/affine") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                auto s = ag::mul(ag::add(in[0], in[1]), ag::sub(in[0], ag::affine(in[1], 0.5, 0.1)));
                return ag::mean_sq(s);
            },
            {a, b});
        CHECK(err < 1e-4);
    }
    SUBCASE("mul_bc and div_bc") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::div_bc(ag::mul_bc(in[0], in[1]), in[1], 1e-12));
            },
            {a, m});
        CHECK(err < 1e-4);
    }
    SUBCASE("scale_n") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::scale_n(in[0], {0.3, 1.7}));
            },
            {a});
        CHECK(err < 1e-4);
    }
    SUBCASE("activations") {
        TensorD z = gradcheck::random_tensor(1, 2, 4, 4, rng, -2.0, 2.0);
        for (auto& v : z.v)
            if (std::abs(v) < 0.05) v = 0.1; // keep clear of the ReLU kink
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::sigmoid(ag::leaky_relu(in[0], 0.1)));
            },
            {z});
        CHECK(err < 1e-4);
    }
    SUBCASE("mean_abs away from kinks") {
        TensorD z = gradcheck::random_tensor(1, 2, 4, 4, rng, 0.2, 1.0);
        for (size_t i = 0; i < z.size(); i += 2) z.v[i] = -z.v[i];
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) { return ag::mean_abs(in[0]); }, {z});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("structural op gradients") {
    Rng rng(24);
    TensorD a = gradcheck::random_tensor(2, 2, 4, 4, rng);
    TensorD b = gradcheck::random_tensor(2, 3, 4, 4, rng);

    SUBCASE("concat and slice") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                auto cat = ag::concat_c<double>({in[0], in[1]});
                return ag::mean_sq(ag::mul(ag::slice_c(cat, 1, 2), ag::slice_c(cat, 3, 2)));
            },
            {a, b});
        CHECK(err < 1e-4);
    }
    SUBCASE("pad and crop") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::crop(ag::pad_replicate(in[0], 2, 1, 1, 2), 1, 0, 4, 5));
            },
            {a});
        CHECK(err < 1e-4);
    }
    SUBCASE("upsampling") {
        double err = gradcheck::max_rel_error(
            [](const std::vector<Var<double>>& in) {
                return ag::mean_sq(ag::add(ag::upsample_nearest2(in[0]), ag::upsample_bilinear2(in[0])));
            },
            {a});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("shared nodes accumulate gradients once per use") {
    // d/dx mean(x*x + x*x) with x used four times through two products.
    TensorD x = TensorD::full(1, 1, 1, 1, 3.0);
    auto leaf = ag::leaf(x, true);
    auto y = ag::add(ag::mul(leaf, leaf), ag::mul(leaf, leaf));
    auto loss = ag::mean_sq(y); // (2*x^2)^2 = 4 x^4, d/dx = 16 x^3 = 432
    ag::backward(loss);
    CHECK(leaf->grad.v[0] == doctest::Approx(16 * 27.0));
}

TEST_CASE("no-grad subgraphs record no backward state") {
    TensorD x = TensorD::full(1, 1, 2, 2, 1.5);
    auto frozen = ag::constant(x);
    auto out = ag::mul(frozen, frozen);
    CHECK_FALSE(out->needs_grad);
    CHECK(out->parents.empty());
    CHECK_THROWS_AS(ag::backward(ag::mean_sq(out)), ConfigError);
}

TEST_CASE("forward evaluation is bitwise deterministic") {
    Rng rng(25);
    TensorF x = gradcheck::random_tensor(2, 4, 8, 8, rng).cast<float>();
    TensorF wt = gradcheck::random_tensor(8, 4, 3, 3, rng, -0.5, 0.5).cast<float>();
    TensorF b = gradcheck::random_tensor(1, 8, 1, 1, rng, -0.5, 0.5).cast<float>();
    auto run = [&]() {
        auto y = ag::conv2d(ag::constant(x), ag::constant(wt), ag::constant(b), 2, 1);
        return y->val;
    };
    TensorF y1 = run(), y2 = run();
    CHECK(std::memcmp(y1.v.data(), y2.v.data(), y1.size() * sizeof(float)) == 0);
}
