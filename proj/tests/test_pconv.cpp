#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "irst/nets.hpp"
#include "irst/pconv.hpp"
#include "irst/rng.hpp"
#include "oracles.hpp"

using namespace irst;

namespace {

Tensor rand_tensor(Rng& rng, Shape4 s, double lo = -1, double hi = 1, bool rg = false) {
    std::vector<real_t> data(std::size_t(s.numel()));
    for (auto& v : data) v = real_t(rng.uniform(lo, hi));
    return Tensor::from(s, std::move(data), rg);
}

// The spec's branch quadruple, written out independently of
// pconv_branches(): (pad l,r,t,b, kernel h,w) generalized to fan length k.
struct BranchGeo {
    PadSpec pad;
    int kh, kw;
};
std::array<BranchGeo, 4> branch_quadruple(int k) {
    return {BranchGeo{{1, 0, 0, k}, k, 1}, BranchGeo{{0, k, 0, 1}, 1, k},
            BranchGeo{{0, 1, k, 0}, k, 1}, BranchGeo{{k, 0, 1, 0}, 1, k}};
}

// Influence multiplicities by an end-to-end linear probe: all-ones branch
// and fusion kernels, one-hot inputs, read the probe output cell. The
// composed value IS the number of contributing paths.
std::map<std::pair<int, int>, int> probe_multiplicity(int k, int stride, int img, int probe_r,
                                                      int probe_c) {
    auto x = Tensor::zeros({1, 1, img, img});
    const auto geo = branch_quadruple(k);
    std::map<std::pair<int, int>, int> mult;
    for (int r = 0; r < img; ++r)
        for (int c = 0; c < img; ++c) {
            x.values()[std::size_t(r) * img + c] = 1.f;
            std::vector<Tensor> branch_outs;
            for (const auto& g : geo) {
                ConvSpec spec;
                spec.in_channels = spec.out_channels = 1;
                spec.kernel_h = g.kh;
                spec.kernel_w = g.kw;
                spec.stride = stride;
                spec.pad = g.pad;
                auto w = Tensor::filled({1, 1, g.kh, g.kw}, 1.f);
                branch_outs.push_back(conv2d<real_t>(nullptr, x, w, spec));
            }
            auto cat = concat_channels<real_t>(nullptr, branch_outs);
            ConvSpec fuse;
            fuse.in_channels = 4;
            fuse.out_channels = 1;
            fuse.kernel_h = fuse.kernel_w = 2;
            auto fw = Tensor::filled({1, 4, 2, 2}, 1.f);
            auto out = conv2d<real_t>(nullptr, cat, fw, fuse);
            const int paths = int(std::lround(out.at(0, 0, probe_r, probe_c)));
            if (paths > 0) mult[{r, c}] = paths;
            x.values()[std::size_t(r) * img + c] = 0.f;
        }
    return mult;
}

}  // namespace

TEST_CASE("pconv shape contract over sizes, strides and fan lengths") {
    Rng rng(21);
    for (int k : {2, 3, 4, 5})
        for (int s : {1, 2})
            for (std::int64_t h : {8, 12, 32, 64})
                for (std::int64_t w : {8, 24, 64}) {
                    if (h % s || w % s) continue;
                    PConvSpec spec{2, 8, k, s};
                    Rng init(99);
                    auto layer = PConvLayer<real_t>::make(spec, init);
                    auto x = rand_tensor(rng, {1, 2, h, w});
                    auto cat = layer.concat_branches(nullptr, x, true);
                    CHECK(cat.shape() == Shape4{1, 8, h / s + 1, w / s + 1});
                    auto y = layer.forward(nullptr, x, true);
                    CHECK(y.shape() == Shape4{1, 8, h / s, w / s});
                }
}

TEST_CASE("pconv reference shapes at 256x256") {
    Rng init(1);
    PConvSpec spec{16, 64, 3, 2};
    auto layer = PConvLayer<real_t>::make(spec, init);
    Rng rng(2);
    auto x = rand_tensor(rng, {1, 16, 256, 256}, 0, 1);
    auto cat = layer.concat_branches(nullptr, x, true);
    CHECK(cat.shape() == Shape4{1, 64, 129, 129});
    auto y = layer.forward(nullptr, x, true);
    CHECK(y.shape() == Shape4{1, 64, 128, 128});

    // drop-in equivalence with the standard conv block
    auto block = ConvBlock<real_t>::make(16, 64, 2, init);
    auto yb = block.forward(nullptr, x, true);
    CHECK(yb.shape() == y.shape());
}

TEST_CASE("pconv rejects bad specs and inputs") {
    Rng init(1);
    CHECK_THROWS_AS(PConvLayer<real_t>::make({4, 10, 3, 1}, init), TensorError);  // c2 % 4
    CHECK_THROWS_AS(PConvLayer<real_t>::make({4, 8, 1, 1}, init), TensorError);   // k < 2
    auto layer = PConvLayer<real_t>::make({1, 8, 3, 2}, init);
    Rng rng(2);
    auto odd = rand_tensor(rng, {1, 1, 9, 8});
    CHECK_THROWS_AS(layer.forward(nullptr, odd, true), TensorError);  // h % s != 0
}

TEST_CASE("all-zero input with identity eval BN stays zero") {
    Rng init(5);
    auto layer = PConvLayer<real_t>::make({1, 8, 3, 2}, init);
    auto x = Tensor::zeros({1, 1, 8, 8});
    auto y = layer.forward(nullptr, x, false);
    for (auto v : y.values()) CHECK(v == 0.f);
}

TEST_CASE("conv block: identity kernel under eval BN gives silu(input)") {
    Rng init(7);
    auto block = ConvBlock<real_t>::make(1, 1, 1, init);
    for (auto& v : block.conv.weight.values()) v = 0.f;
    block.conv.weight.at(0, 0, 1, 1) = 1.f;
    Rng rng(8);
    auto x = rand_tensor(rng, {1, 1, 6, 6}, 0.1, 1.0);
    auto y = block.forward(nullptr, x, false);
    auto ref = silu<real_t>(nullptr, x);
    for (std::size_t i = 0; i < y.values().size(); ++i)
        CHECK(y.values()[i] ==
              doctest::Approx(ref.values()[i]).epsilon(1e-4));  // eval BN shrinks by ~5e-6
}

TEST_CASE("conv block convolution matches the brute-force oracle") {
    Rng init(9);
    auto block = ConvBlock<real_t>::make(3, 5, 2, init);
    Rng rng(10);
    auto x = rand_tensor(rng, {2, 3, 8, 8});
    auto y = block.conv.forward(nullptr, x);
    auto ref = oracle::brute_conv(x, block.conv.weight, block.conv.spec);
    REQUIRE(y.shape() == ref.shape());
    for (std::size_t i = 0; i < y.values().size(); ++i) CHECK(y.values()[i] == ref.values()[i]);
}

TEST_CASE("parameter counts reproduce the published numbers") {
    CHECK(conv_block_param_count(64, 64) == 36864);
    CHECK(pconv_param_count({64, 64, 3, 1}) == 28672);
    CHECK(pconv_param_count_formula({64, 64, 3, 1}) == 28672);
    const double ratio = 28672.0 / 36864.0;
    CHECK(ratio == doctest::Approx(7.0 / 9.0));
    CHECK(1.0 - ratio == doctest::Approx(0.2222).epsilon(1e-3));  // the 22.2% reduction

    // The c2 = 4*c1 regime where the closed form and the as-built layer
    // disagree: exact 76*c1^2 vs formula 28*c1^2.
    const int c1 = 16;
    CHECK(pconv_param_count({c1, 4 * c1, 3, 1}) == 76 * c1 * c1);
    CHECK(pconv_param_count_formula({c1, 4 * c1, 3, 1}) == 28 * c1 * c1);
}

TEST_CASE("count_params agrees with the allocated parameter tally") {
    Rng init(11);
    for (int k : {2, 3, 4}) {
        PConvSpec spec{8, 16, k, 2};
        auto layer = PConvLayer<real_t>::make(spec, init);
        CHECK(layer.conv_weight_count() == pconv_param_count(spec));
    }
    auto block = ConvBlock<real_t>::make(8, 16, 1, init);
    CHECK(block.conv_weight_count() == conv_block_param_count(8, 16));
}

TEST_CASE("receptive fields by dependency propagation match the influence probe") {
    const auto conv_rf = receptive_field_conv_block(16, 16);
    CHECK(conv_rf.receptive_field_cells == 9);
    CHECK(conv_rf.extent_h == 3);
    CHECK(conv_rf.extent_w == 3);

    for (int k : {3, 4}) {
        const PConvSpec spec{4, 8, k, 1};
        const auto rf = receptive_field_pconv(spec);
        // independent route: one-hot influence probe through real convs
        const int img = 4 * k + 9;
        const int probe = 2 * k + 3;
        const auto mult = probe_multiplicity(k, 1, img, probe, probe);
        CHECK(rf.receptive_field_cells == std::int64_t(mult.size()));

        int rmin = 1 << 30, cmin = 1 << 30, rmax = -1, cmax = -1;
        for (const auto& [rc, m] : mult) {
            (void)m;
            rmin = std::min(rmin, rc.first);
            rmax = std::max(rmax, rc.first);
            cmin = std::min(cmin, rc.second);
            cmax = std::max(cmax, rc.second);
        }
        CHECK(rf.extent_h == rmax - rmin + 1);
        CHECK(rf.extent_w == cmax - cmin + 1);
        for (const auto& [rc, m] : mult)
            CHECK(rf.influence[std::size_t(rc.first - rmin)][std::size_t(rc.second - cmin)] == m);
    }

    CHECK(receptive_field_pconv({4, 8, 3, 1}).receptive_field_cells == 25);
}

TEST_CASE("influence multiplicity is center-heavy and fades outward along the axes") {
    for (int k : {3, 4, 5}) {
        const auto rf = receptive_field_pconv({4, 8, k, 1});
        int best_r = 0, best_c = 0, best = -1;
        for (std::size_t r = 0; r < rf.influence.size(); ++r)
            for (std::size_t c = 0; c < rf.influence[r].size(); ++c)
                if (rf.influence[r][c] > best) {
                    best = rf.influence[r][c];
                    best_r = int(r);
                    best_c = int(c);
                }
        // non-increasing from the center outward along both axes
        for (int c = best_c; c + 1 < int(rf.influence[0].size()); ++c)
            CHECK(rf.influence[std::size_t(best_r)][std::size_t(c)] >=
                  rf.influence[std::size_t(best_r)][std::size_t(c + 1)]);
        for (int c = best_c; c > 0; --c)
            CHECK(rf.influence[std::size_t(best_r)][std::size_t(c)] >=
                  rf.influence[std::size_t(best_r)][std::size_t(c - 1)]);
        for (int r = best_r; r + 1 < int(rf.influence.size()); ++r)
            CHECK(rf.influence[std::size_t(r)][std::size_t(best_c)] >=
                  rf.influence[std::size_t(r + 1)][std::size_t(best_c)]);
        for (int r = best_r; r > 0; --r)
            CHECK(rf.influence[std::size_t(r)][std::size_t(best_c)] >=
                  rf.influence[std::size_t(r - 1)][std::size_t(best_c)]);
    }
}

namespace {

Tensor rot90ccw(const Tensor& x) {
    const Shape4 s = x.shape();
    auto out = Tensor::zeros({s.n, s.c, s.w, s.h});
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t u = 0; u < s.w; ++u)
                for (std::int64_t v = 0; v < s.h; ++v)
                    out.at(n, c, u, v) = x.at(n, c, v, s.w - 1 - u);
    return out;
}

void copy_bn(const BatchNormState<real_t>& from, BatchNormState<real_t>& to) {
    std::copy(from.gamma.values().begin(), from.gamma.values().end(), to.gamma.values().begin());
    std::copy(from.beta.values().begin(), from.beta.values().end(), to.beta.values().begin());
    to.running_mean = from.running_mean;
    to.running_var = from.running_var;
}

}  // namespace

TEST_CASE("the four branches are one operator in four orientations") {
    // Rotating the input by 90 degrees and cyclically shifting the branch
    // parameters rotates each pre-fusion block. Kernel transplants: 1->2 and
    // 3->4 copy taps in order, 2->3 and 4->1 reverse them.
    const int k = 3, cp = 2, c1 = 2;
    Rng init(31);
    PConvSpec spec{c1, 4 * cp, k, 1};
    auto base = PConvLayer<real_t>::make(spec, init);
    auto rotated = PConvLayer<real_t>::make(spec, init);

    for (int i = 0; i < 4; ++i) {
        const int j = (i + 1) % 4;  // receives branch i's parameters
        const bool flip = (j == 2) || (j == 0);
        auto& src = base.branches[std::size_t(i)].weight;
        auto& dst = rotated.branches[std::size_t(j)].weight;
        const bool src_vertical = base.branches[std::size_t(i)].spec.kernel_h == k;
        for (int co = 0; co < cp; ++co)
            for (int ci = 0; ci < c1; ++ci)
                for (int t = 0; t < k; ++t) {
                    const real_t v = src_vertical ? src.at(co, ci, t, 0) : src.at(co, ci, 0, t);
                    const int tt = flip ? k - 1 - t : t;
                    if (base.branches[std::size_t(j)].spec.kernel_h == k)
                        dst.at(co, ci, tt, 0) = v;
                    else
                        dst.at(co, ci, 0, tt) = v;
                }
        copy_bn(base.branch_bn[std::size_t(i)], rotated.branch_bn[std::size_t(j)]);
    }

    Rng rng(32);
    auto x = rand_tensor(rng, {1, c1, 6, 6});
    auto cat = base.concat_branches(nullptr, x, true);
    auto cat_rot = rotated.concat_branches(nullptr, rot90ccw(x), true);
    for (int i = 0; i < 4; ++i) {
        const int j = (i + 1) % 4;
        auto want = rot90ccw(slice_channels<real_t>(nullptr, cat, i * cp, cp));
        auto got = slice_channels<real_t>(nullptr, cat_rot, j * cp, cp);
        REQUIRE(want.shape() == got.shape());
        for (std::size_t n = 0; n < want.values().size(); ++n)
            CHECK(got.values()[n] == doctest::Approx(want.values()[n]).epsilon(1e-4));
    }
}

TEST_CASE("gradient reaches every branch and the fusion kernel") {
    Rng init(41);
    auto layer = PConvLayer<real_t>::make({2, 8, 3, 2}, init);
    Rng rng(42);
    auto x = rand_tensor(rng, {2, 2, 8, 8}, -1, 1, true);
    Tape tape;
    auto y = layer.forward(&tape, x, true);
    auto loss = mean(&tape, mul(&tape, y, y));
    tape.backward(loss);
    for (const auto& b : layer.branches) {
        double norm = 0;
        for (auto g : b.weight.grad()) norm += std::abs(g);
        CHECK(norm > 0);
    }
    double fusion_norm = 0;
    for (auto g : layer.fusion.weight.grad()) fusion_norm += std::abs(g);
    CHECK(fusion_norm > 0);
}

TEST_CASE("stem swap round trip restores counts and keeps shapes") {
    auto net = SegNet::make(StemKind::conv, {3, 3}, 8, 123);
    const auto original = net.stem_weight_count();
    Rng rng(43);
    auto x = rand_tensor(rng, {1, 1, 32, 32});
    const auto shape_before = net.forward(nullptr, x).shape();

    net.set_stem(StemKind::pconv, {4, 3}, 123);
    CHECK(net.stem_weight_count() ==
          pconv_param_count({1, 8, 4, 2}) + pconv_param_count({8, 16, 3, 2}));
    CHECK(net.forward(nullptr, x).shape() == shape_before);

    net.set_stem(StemKind::pconv, {4, 4}, 123);  // the PConv(4,4) row
    CHECK(net.forward(nullptr, x).shape() == shape_before);

    net.set_stem(StemKind::conv, {3, 3}, 123);
    CHECK(net.stem_weight_count() == original);
    CHECK(net.forward(nullptr, x).shape() == shape_before);
}

TEST_CASE("two stride-2 pconv stems collapse 256 to 64") {
    Rng init(44);
    auto s1 = Stem<real_t>::make(StemKind::pconv, 1, 4, 2, 3, init);
    auto s2 = Stem<real_t>::make(StemKind::pconv, 4, 8, 2, 3, init);
    auto x = Tensor::zeros({1, 1, 256, 256});
    auto y = s2.forward(nullptr, s1.forward(nullptr, x, false), false);
    CHECK(y.shape() == Shape4{1, 8, 64, 64});
}
