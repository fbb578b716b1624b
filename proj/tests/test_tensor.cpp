#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "irst/ops.hpp"
#include "irst/rng.hpp"
#include "oracles.hpp"

using namespace irst;

namespace {

Tensor rand_tensor(Rng& rng, Shape4 s, double lo = -1, double hi = 1, bool rg = false) {
    std::vector<real_t> data(std::size_t(s.numel()));
    for (auto& v : data) v = real_t(rng.uniform(lo, hi));
    return Tensor::from(s, std::move(data), rg);
}

}  // namespace

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
    auto x = Tensor::filled({1, 1, 3, 3}, 1.f);
    auto w = Tensor::filled({1, 1, 3, 3}, 1.f);
    ConvSpec spec;
    spec.in_channels = spec.out_channels = 1;
    spec.kernel_h = spec.kernel_w = 3;
    auto y = conv2d<real_t>(nullptr, x, w, spec);
    CHECK(y.shape() == Shape4{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(9.f));
}

TEST_CASE("conv2d shape with asymmetric padding matches the sliding-window oracle") {
    // 4x4 input, 1x3 kernel, pad left=1: padded width 5 -> 3 window stops
    Rng rng(7);
    auto x = rand_tensor(rng, {1, 1, 4, 4});
    auto w = rand_tensor(rng, {1, 1, 1, 3});
    ConvSpec spec;
    spec.in_channels = spec.out_channels = 1;
    spec.kernel_h = 1;
    spec.kernel_w = 3;
    spec.pad = {1, 0, 0, 0};
    auto y = conv2d<real_t>(nullptr, x, w, spec);
    auto ref = oracle::brute_conv(x, w, spec);
    CHECK(y.shape() == ref.shape());
    CHECK(y.shape() == Shape4{1, 1, 4, 3});
}

TEST_CASE("conv2d groups=2 equals independent per-half convolutions") {
    Rng rng(11);
    auto x = rand_tensor(rng, {1, 4, 5, 5});
    auto w = rand_tensor(rng, {4, 2, 3, 3});
    ConvSpec spec;
    spec.in_channels = spec.out_channels = 4;
    spec.kernel_h = spec.kernel_w = 3;
    spec.groups = 2;
    spec.pad = {1, 1, 1, 1};
    auto y = conv2d<real_t>(nullptr, x, w, spec);

    // per-group oracle: slice channels, run groups=1 convs, concatenate
    for (int g = 0; g < 2; ++g) {
        auto xg = slice_channels<real_t>(nullptr, x, 2 * g, 2);
        std::vector<real_t> wg_data;
        for (int co = 2 * g; co < 2 * g + 2; ++co)
            for (int ci = 0; ci < 2; ++ci)
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c) wg_data.push_back(w.at(co, ci, r, c));
        auto wg = Tensor::from({2, 2, 3, 3}, std::move(wg_data));
        ConvSpec half = spec;
        half.groups = 1;
        half.in_channels = half.out_channels = 2;
        auto ref = oracle::brute_conv(xg, wg, half);
        for (int co = 0; co < 2; ++co)
            for (int r = 0; r < 5; ++r)
                for (int c = 0; c < 5; ++c)
                    CHECK(y.at(0, 2 * g + co, r, c) == ref.at(0, co, r, c));
    }
}

TEST_CASE("conv2d matches the brute-force oracle bit-for-bit") {
    Rng rng(3);
    for (int trial = 0; trial < 25; ++trial) {
        ConvSpec spec;
        spec.in_channels = int(rng.uniform_int(1, 4));
        spec.out_channels = int(rng.uniform_int(1, 4));
        spec.kernel_h = int(rng.uniform_int(1, 5));
        spec.kernel_w = int(rng.uniform_int(1, 5));
        spec.stride = int(rng.uniform_int(1, 2));
        spec.pad = {int(rng.uniform_int(0, 4)), int(rng.uniform_int(0, 4)),
                    int(rng.uniform_int(0, 4)), int(rng.uniform_int(0, 4))};
        spec.bias = rng.bernoulli(0.5);
        const std::int64_t n = rng.uniform_int(1, 2);
        const std::int64_t h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
        if (h + spec.pad.top + spec.pad.bottom < spec.kernel_h) continue;
        if (w + spec.pad.left + spec.pad.right < spec.kernel_w) continue;
        auto x = rand_tensor(rng, {n, spec.in_channels, h, w});
        auto wt = rand_tensor(rng, {spec.out_channels, spec.in_channels, spec.kernel_h,
                                    spec.kernel_w});
        Tensor bias;
        if (spec.bias) bias = rand_tensor(rng, {1, spec.out_channels, 1, 1});
        auto y = conv2d<real_t>(nullptr, x, wt, spec, bias);
        auto ref = oracle::brute_conv(x, wt, spec, bias);
        REQUIRE(y.shape() == ref.shape());
        auto yv = y.values();
        auto rv = ref.values();
        for (std::size_t i = 0; i < yv.size(); ++i) REQUIRE(yv[i] == rv[i]);
    }
}

TEST_CASE("conv2d shape formula enumeration") {
    Rng rng(5);
    const std::int64_t h = 8, w = 8;
    for (int kh = 1; kh <= 5; ++kh)
        for (int kw = 1; kw <= 5; ++kw)
            for (int pl = 0; pl <= 4; pl += 2)
                for (int pt = 0; pt <= 4; pt += 1)
                    for (int s : {1, 2}) {
                        ConvSpec spec;
                        spec.in_channels = spec.out_channels = 1;
                        spec.kernel_h = kh;
                        spec.kernel_w = kw;
                        spec.stride = s;
                        spec.pad = {pl, (pl + 1) % 5, pt, (pt + 3) % 5};
                        if (h + spec.pad.top + spec.pad.bottom < kh) continue;
                        if (w + spec.pad.left + spec.pad.right < kw) continue;
                        auto x = rand_tensor(rng, {1, 1, h, w});
                        auto wt = rand_tensor(rng, {1, 1, kh, kw});
                        auto y = conv2d<real_t>(nullptr, x, wt, spec);
                        const auto want_h = (h + pt + (pt + 3) % 5 - kh) / s + 1;
                        const auto want_w = (w + pl + (pl + 1) % 5 - kw) / s + 1;
                        CHECK(y.shape() == Shape4{1, 1, want_h, want_w});
                        auto ref = oracle::brute_conv(x, wt, spec);
                        CHECK(ref.shape() == y.shape());
                    }
}

TEST_CASE("conv2d error cases") {
    auto x = Tensor::filled({1, 2, 3, 3}, 1.f);
    auto w = Tensor::filled({1, 1, 3, 3}, 1.f);
    ConvSpec spec;
    spec.in_channels = 1;  // mismatch with x
    spec.out_channels = 1;
    spec.kernel_h = spec.kernel_w = 3;
    CHECK_THROWS_AS(conv2d<real_t>(nullptr, x, w, spec), TensorError);

    spec.in_channels = 2;
    CHECK_THROWS_AS(conv2d<real_t>(nullptr, x, w, spec), TensorError);  // weight shape

    auto x1 = Tensor::filled({1, 1, 2, 2}, 1.f);
    CHECK_THROWS_AS(conv2d<real_t>(nullptr, x1, w, spec), TensorError);  // output <= 0
}

TEST_CASE("batch_norm identity, constant channel and statistics") {
    Rng rng(13);
    auto state = BatchNormState<real_t>::identity(3);

    SUBCASE("already normalized input passes through") {
        // construct a zero-mean unit-variance channel exactly
        std::vector<real_t> vals = {-1, 1, -1, 1, -1, 1, -1, 1};
        auto x = Tensor::from({2, 1, 2, 2}, vals);
        auto st = BatchNormState<real_t>::identity(1);
        auto y = batch_norm<real_t>(nullptr, x, st, true);
        for (std::size_t i = 0; i < vals.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(vals[i]).epsilon(1e-3));
    }

    SUBCASE("constant channel collapses to beta") {
        auto x = Tensor::filled({2, 3, 4, 4}, 2.5f);
        for (auto& b : state.beta.values()) b = 0.75f;
        auto y = batch_norm<real_t>(nullptr, x, state, true);
        for (auto v : y.values()) CHECK(v == doctest::Approx(0.75f));
    }

    SUBCASE("output statistics match gamma/beta") {
        auto x = rand_tensor(rng, {2, 3, 4, 4});
        for (auto& g : state.gamma.values()) g = 1.5f;
        for (auto& b : state.beta.values()) b = -0.25f;
        auto y = batch_norm<real_t>(nullptr, x, state, true);
        for (int c = 0; c < 3; ++c) {
            double mean = 0, var = 0;
            for (int n = 0; n < 2; ++n)
                for (int r = 0; r < 4; ++r)
                    for (int q = 0; q < 4; ++q) mean += y.at(n, c, r, q);
            mean /= 32;
            for (int n = 0; n < 2; ++n)
                for (int r = 0; r < 4; ++r)
                    for (int q = 0; q < 4; ++q) {
                        const double d = y.at(n, c, r, q) - mean;
                        var += d * d;
                    }
            var /= 32;
            CHECK(mean == doctest::Approx(-0.25).epsilon(1e-3));
            CHECK(var == doctest::Approx(1.5 * 1.5).epsilon(1e-2));
        }
    }

    SUBCASE("eval mode uses running statistics") {
        auto st = BatchNormState<real_t>::identity(1);
        st.running_mean[0] = 1.f;
        st.running_var[0] = 4.f;
        auto x = Tensor::filled({1, 1, 1, 2}, 3.f);
        auto y = batch_norm<real_t>(nullptr, x, st, false);
        CHECK(y.values()[0] == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + 1e-5)));
    }
}

TEST_CASE("silu values and asymptotes") {
    auto x = Tensor::from({1, 1, 1, 4}, {0.f, 1.f, 30.f, -30.f});
    auto y = silu<real_t>(nullptr, x);
    CHECK(y.values()[0] == doctest::Approx(0));
    CHECK(y.values()[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    CHECK(y.values()[2] == doctest::Approx(30).epsilon(1e-6));
    CHECK(y.values()[3] == doctest::Approx(0).epsilon(1e-6));
}

TEST_CASE("concat_channels shape, identity and slice round trip") {
    Rng rng(17);
    std::vector<Tensor> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(rand_tensor(rng, {1, 3, 5, 5}));
    auto cat = concat_channels<real_t>(nullptr, xs);
    CHECK(cat.shape() == Shape4{1, 12, 5, 5});

    auto single = concat_channels<real_t>(nullptr, {xs[0]});
    for (std::size_t i = 0; i < single.values().size(); ++i)
        CHECK(single.values()[i] == xs[0].values()[i]);

    for (int i = 0; i < 4; ++i) {
        auto back = slice_channels<real_t>(nullptr, cat, 3 * i, 3);
        auto bv = back.values();
        auto ov = xs[std::size_t(i)].values();
        for (std::size_t k = 0; k < bv.size(); ++k) CHECK(bv[k] == ov[k]);
    }

    auto bad = rand_tensor(rng, {1, 3, 4, 5});
    CHECK_THROWS_AS(concat_channels<real_t>(nullptr, {xs[0], bad}), TensorError);
}

TEST_CASE("backward basics on the tape") {
    SUBCASE("sum gradient is all ones") {
        auto x = Tensor::filled({2, 1, 2, 2}, 0.5f, true);
        Tape tape;
        auto loss = sum(&tape, x);
        tape.backward(loss);
        for (auto g : x.grad()) CHECK(g == doctest::Approx(1));
    }

    SUBCASE("silu gradient at zero is one half") {
        auto x = Tensor::zeros({1, 1, 2, 2}, true);
        Tape tape;
        auto loss = sum(&tape, silu(&tape, x));
        tape.backward(loss);
        for (auto g : x.grad()) CHECK(g == doctest::Approx(0.5));
    }

    SUBCASE("tape cannot be consumed twice") {
        auto x = Tensor::filled({1, 1, 1, 1}, 1.f, true);
        Tape tape;
        auto loss = sum(&tape, x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), TensorError);
        tape.reset();
        auto loss2 = sum(&tape, x);
        tape.backward(loss2);  // fine after reset
    }

    SUBCASE("non-participating parameters keep zero gradients") {
        auto x = Tensor::filled({1, 1, 1, 1}, 1.f, true);
        auto unused = Tensor::filled({1, 1, 1, 1}, 1.f, true);
        Tape tape;
        auto loss = sum(&tape, x);
        tape.backward(loss);
        CHECK(unused.grad()[0] == 0.f);
    }

    SUBCASE("gradients accumulate across uses") {
        auto x = Tensor::filled({1, 1, 1, 1}, 2.f, true);
        Tape tape;
        auto y = add(&tape, x, x);
        auto loss = sum(&tape, y);
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(2));
    }
}

TEST_CASE("finite guard reports the offending op") {
    auto x = Tensor::from({1, 1, 1, 2}, {1.f, 0.f});
    auto y = Tensor::from({1, 1, 1, 2}, {0.f, 0.f});
    CHECK_THROWS_WITH_AS(divide<real_t>(nullptr, x, y), doctest::Contains("divide"),
                         TensorError);
}

TEST_CASE("max_pool2 picks maxima, upsample repeats, gap averages") {
    auto x = Tensor::from({1, 1, 2, 4}, {1.f, 2.f, 5.f, 3.f, 0.f, -1.f, 4.f, 6.f});
    auto p = max_pool2<real_t>(nullptr, x);
    CHECK(p.shape() == Shape4{1, 1, 1, 2});
    CHECK(p.values()[0] == 2.f);
    CHECK(p.values()[1] == 6.f);

    auto u = upsample_nearest2<real_t>(nullptr, p);
    CHECK(u.shape() == Shape4{1, 1, 2, 4});
    CHECK(u.at(0, 0, 1, 1) == 2.f);
    CHECK(u.at(0, 0, 0, 2) == 6.f);

    auto g = global_avg_pool<real_t>(nullptr, x);
    CHECK(g.shape() == Shape4{1, 1, 1, 1});
    CHECK(g.item() == doctest::Approx((1 + 2 + 5 + 3 + 0 - 1 + 4 + 6) / 8.0));
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from({1, 1, 2, 2}, {1.f, 2.f}), TensorError);
    auto s = Tensor::scalar(3.f);
    CHECK(s.item() == 3.f);
    auto big = Tensor::zeros({2, 3, 4, 5});
    CHECK(big.numel() == 120);
    CHECK_THROWS_AS(big.item(), TensorError);
}
