#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "irst/metrics.hpp"
#include "irst/rng.hpp"
#include "oracles.hpp"

using namespace irst;

namespace {

Box rand_box(Rng& rng, double extent = 20) {
    Box b;
    b.x1 = rng.uniform(0, extent);
    b.y1 = rng.uniform(0, extent);
    b.x2 = b.x1 + rng.uniform(0.5, 6.0);
    b.y2 = b.y1 + rng.uniform(0.5, 6.0);
    return b;
}

}  // namespace

TEST_CASE("match_detections basics and the strict 0.45 boundary") {
    std::vector<LabeledBox> gts = {{Box{0, 0, 10, 10}, 0}};

    SUBCASE("comfortable overlap is a true positive") {
        std::vector<Detection> preds = {{Box{2, 0, 10, 10}, 0, 0.9}};  // IoU 0.8
        const auto t = match_detections(preds, gts);
        CHECK(t.tp == 1);
        CHECK(t.fp == 0);
        CHECK(t.fn == 0);
    }

    SUBCASE("IoU exactly at the threshold is not a match") {
        // inter 9, union 20: IoU == 9/20 == the 0.45 threshold, strictly >
        std::vector<LabeledBox> g1 = {{Box{0, 0, 14, 1}, 0}};
        std::vector<Detection> preds = {{Box{5, 0, 20, 1}, 0, 0.9}};
        CHECK(iou(preds[0].box, g1[0].box) == 0.45);
        const auto t = match_detections(preds, g1);
        CHECK(t.tp == 0);
        CHECK(t.fp == 1);
        CHECK(t.fn == 1);
    }

    SUBCASE("below-threshold overlap is an FP and leaves the gt unmatched") {
        std::vector<Detection> preds = {{Box{6, 6, 16, 16}, 0, 0.9}};  // IoU 16/184
        const auto t = match_detections(preds, gts);
        CHECK(t.tp == 0);
        CHECK(t.fp == 1);
        CHECK(t.fn == 1);
    }

    SUBCASE("two predictions on one target: one TP, one FP") {
        std::vector<Detection> preds = {{Box{0, 0, 10, 10}, 0, 0.9},
                                        {Box{1, 0, 10, 10}, 0, 0.7}};
        const auto t = match_detections(preds, gts);
        CHECK(t.tp == 1);
        CHECK(t.fp == 1);
        CHECK(t.fn == 0);
    }

    SUBCASE("class mismatch never matches") {
        std::vector<Detection> preds = {{Box{0, 0, 10, 10}, 1, 0.9}};
        const auto t = match_detections(preds, gts);
        CHECK(t.tp == 0);
        CHECK(t.fp == 1);
        CHECK(t.fn == 1);
    }
}

TEST_CASE("precision_recall") {
    CHECK(precision_recall({5, 0, 0}) == std::pair{1.0, 1.0});
    CHECK(precision_recall({0, 0, 3}) == std::pair{0.0, 0.0});
    CHECK(precision_recall({0, 0, 0}) == std::pair{0.0, 0.0});
    const auto [p, r] = precision_recall({3, 1, 2});
    CHECK(p == doctest::Approx(0.75));
    CHECK(r == doctest::Approx(0.6));
}

TEST_CASE("map50 reference cases") {
    SUBCASE("every target found by a confident prediction") {
        std::vector<std::vector<LabeledBox>> gts = {{{Box{0, 0, 5, 5}, 0}, {Box{10, 10, 14, 14}, 0}}};
        std::vector<std::vector<Detection>> preds = {
            {{Box{0, 0, 5, 5}, 0, 0.9}, {Box{10, 10, 14, 14}, 0, 0.8}}};
        CHECK(map50(preds, gts) == doctest::Approx(1.0));
    }

    SUBCASE("nothing correct") {
        std::vector<std::vector<LabeledBox>> gts = {{{Box{0, 0, 5, 5}, 0}}};
        std::vector<std::vector<Detection>> preds = {{{Box{50, 50, 55, 55}, 0, 0.9}}};
        CHECK(map50(preds, gts) == 0.0);
    }

    SUBCASE("3 targets, 4 predictions, mixed quality") {
        std::vector<std::vector<LabeledBox>> gts = {
            {{Box{0, 0, 4, 4}, 0}, {Box{10, 0, 14, 4}, 0}, {Box{20, 0, 24, 4}, 0}}};
        std::vector<std::vector<Detection>> preds = {{{Box{0, 0, 4, 4}, 0, 0.95},
                                                      {Box{40, 40, 44, 44}, 0, 0.9},
                                                      {Box{10, 0, 14, 4}, 0, 0.6},
                                                      {Box{20, 1, 24, 5}, 0, 0.5}}};
        CHECK(map50(preds, gts) == oracle::staircase_map50(preds, gts));
    }
}

TEST_CASE("map50 equals the staircase oracle on randomized instances") {
    Rng rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const int images = int(rng.uniform_int(1, 4));
        const int classes = int(rng.uniform_int(1, 2));
        const auto n_images = static_cast<std::size_t>(images);
        std::vector<std::vector<LabeledBox>> gts(n_images);
        std::vector<std::vector<Detection>> preds(n_images);
        for (int i = 0; i < images; ++i) {
            const int n_gt = int(rng.uniform_int(0, 3));
            for (int g = 0; g < n_gt; ++g)
                gts[std::size_t(i)].push_back({rand_box(rng), int(rng.uniform_int(0, classes - 1))});
            const int n_pred = int(rng.uniform_int(0, 6 - n_gt));
            for (int p = 0; p < n_pred; ++p) {
                // half the predictions perturb a gt box, half are noise
                Box b;
                if (!gts[std::size_t(i)].empty() && rng.bernoulli(0.6)) {
                    b = gts[std::size_t(i)][std::size_t(rng.uniform_int(
                                                0, std::int64_t(gts[std::size_t(i)].size()) - 1))]
                            .box;
                    const double j = rng.uniform(0, 1.2);
                    b.x1 += j * rng.uniform(-1, 1);
                    b.y1 += j * rng.uniform(-1, 1);
                    b.x2 += j * rng.uniform(-1, 1);
                    b.y2 += j * rng.uniform(-1, 1);
                    if (b.x2 < b.x1) std::swap(b.x1, b.x2);
                    if (b.y2 < b.y1) std::swap(b.y1, b.y2);
                } else {
                    b = rand_box(rng);
                }
                preds[std::size_t(i)].push_back(
                    {b, int(rng.uniform_int(0, classes - 1)), rng.uniform(0.05, 1.0)});
            }
        }
        CHECK(map50(preds, gts) == oracle::staircase_map50(preds, gts));
    }
}

TEST_CASE("prediction order does not change metrics (deterministic tie-break)") {
    Rng rng(103);
    std::vector<std::vector<LabeledBox>> gts(2);
    std::vector<std::vector<Detection>> preds(2);
    for (int i = 0; i < 2; ++i) {
        for (int g = 0; g < 3; ++g) gts[std::size_t(i)].push_back({rand_box(rng), 0});
        for (int p = 0; p < 4; ++p)
            preds[std::size_t(i)].push_back({rand_box(rng), 0, 0.5});  // all ties
        preds[std::size_t(i)].push_back({gts[std::size_t(i)][0].box, 0, 0.5});
    }
    const double base = map50(preds, gts);
    auto t_base = match_detections(preds[0], gts[0]);

    auto shuffled = preds;
    for (auto& image : shuffled) std::reverse(image.begin(), image.end());
    CHECK(map50(shuffled, gts) == base);
    auto t_shuf = match_detections(shuffled[0], gts[0]);
    CHECK(t_base.tp == t_shuf.tp);
    CHECK(t_base.fp == t_shuf.fp);
}

TEST_CASE("eleven-point AP stays within sane range of the envelope AP") {
    Rng rng(105);
    std::vector<std::vector<LabeledBox>> gts(1);
    std::vector<std::vector<Detection>> preds(1);
    for (int g = 0; g < 4; ++g) gts[0].push_back({rand_box(rng), 0});
    for (int p = 0; p < 6; ++p) preds[0].push_back({rand_box(rng), 0, rng.uniform(0, 1)});
    preds[0].push_back({gts[0][0].box, 0, 0.99});
    const double all_point = map50(preds, gts, false);
    const double eleven = map50(preds, gts, true);
    CHECK(all_point >= 0.0);
    CHECK(all_point <= 1.0);
    CHECK(eleven >= 0.0);
    CHECK(eleven <= 1.0);
}

TEST_CASE("connected components match the union-find oracle") {
    Rng rng(107);
    for (int trial = 0; trial < 60; ++trial) {
        BinMask m = BinMask::zeros(int(rng.uniform_int(3, 12)), int(rng.uniform_int(3, 12)));
        for (auto& v : m.v) v = rng.bernoulli(0.35) ? 1 : 0;
        auto got = connected_components(m);
        auto want = oracle::label_components(m);
        REQUIRE(got.size() == want.size());
        auto key = [](const std::vector<std::pair<int, int>>& pix) {
            auto s = pix;
            std::sort(s.begin(), s.end());
            return s;
        };
        std::vector<std::vector<std::pair<int, int>>> a, b;
        for (const auto& c : got) a.push_back(key(c.pixels));
        for (const auto& c : want) b.push_back(key(c.pixels));
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
}

TEST_CASE("segmentation metrics reference cases") {
    SUBCASE("perfect prediction") {
        BinMask gt = BinMask::zeros(16, 16);
        for (int r = 4; r < 7; ++r)
            for (int c = 4; c < 7; ++c) gt.set(r, c, 1);
        const auto m = seg_metrics(gt, gt);
        CHECK(m.iou == 1.0);
        CHECK(m.pd == 1.0);
        CHECK(m.fa == 0.0);
    }

    SUBCASE("empty prediction, nonempty gt") {
        BinMask gt = BinMask::zeros(16, 16);
        gt.set(8, 8, 1);
        const auto m = seg_metrics(BinMask::zeros(16, 16), gt);
        CHECK(m.iou == 0.0);
        CHECK(m.pd == 0.0);
        CHECK(m.fa == 0.0);
    }

    SUBCASE("one of two components hit, five stray pixels in 256x256") {
        BinMask gt = BinMask::zeros(256, 256);
        for (int r = 10; r < 13; ++r)
            for (int c = 10; c < 13; ++c) gt.set(r, c, 1);
        for (int r = 100; r < 103; ++r)
            for (int c = 100; c < 103; ++c) gt.set(r, c, 1);
        BinMask pred = BinMask::zeros(256, 256);
        for (int r = 10; r < 13; ++r)
            for (int c = 10; c < 13; ++c) pred.set(r, c, 1);  // hits component 1
        for (int i = 0; i < 5; ++i) pred.set(200, 20 + 3 * i, 1);  // isolated strays
        const auto m = seg_metrics(pred, gt);
        CHECK(m.pd == 0.5);
        CHECK(m.fa == doctest::Approx(5.0 / 65536.0).epsilon(1e-12));
        CHECK(m.iou == doctest::Approx(9.0 / (9.0 + 9.0 + 5.0)).epsilon(1e-12));
    }

    SUBCASE("centroid within 3 pixels counts, farther does not") {
        BinMask gt = BinMask::zeros(32, 32);
        gt.set(10, 10, 1);
        BinMask near = BinMask::zeros(32, 32);
        near.set(12, 10, 1);  // distance 2
        CHECK(seg_metrics(near, gt).pd == 1.0);
        BinMask far = BinMask::zeros(32, 32);
        far.set(14, 10, 1);  // distance 4
        CHECK(seg_metrics(far, gt).pd == 0.0);
        CHECK(seg_metrics(far, gt).fa == doctest::Approx(1.0 / 1024.0));
    }
}

TEST_CASE("stray pixels only ever raise Fa and never change Pd") {
    Rng rng(109);
    for (int trial = 0; trial < 30; ++trial) {
        BinMask gt = BinMask::zeros(40, 40);
        for (int t = 0; t < 3; ++t) {
            const int r = int(rng.uniform_int(2, 30)), c = int(rng.uniform_int(2, 30));
            for (int dr = 0; dr < 2; ++dr)
                for (int dc = 0; dc < 2; ++dc) gt.set(r + dr, c + dc, 1);
        }
        BinMask pred = gt;  // start perfect
        const auto before = seg_metrics(pred, gt);
        pred.set(38, 38, 1);  // isolated, far from every centroid
        const auto after = seg_metrics(pred, gt);
        CHECK(after.fa >= before.fa);
        CHECK(after.pd == before.pd);
    }
}

TEST_CASE("metric ranges") {
    Rng rng(111);
    for (int trial = 0; trial < 40; ++trial) {
        BinMask gt = BinMask::zeros(20, 20), pred = BinMask::zeros(20, 20);
        for (auto& v : gt.v) v = rng.bernoulli(0.2) ? 1 : 0;
        for (auto& v : pred.v) v = rng.bernoulli(0.2) ? 1 : 0;
        const auto m = seg_metrics(pred, gt);
        CHECK(m.iou >= 0.0);
        CHECK(m.iou <= 1.0);
        CHECK(m.pd >= 0.0);
        CHECK(m.pd <= 1.0);
        CHECK(m.fa >= 0.0);
    }
}

TEST_CASE("threshold_mask uses a strict cut") {
    auto p = TensorT<float>::from({1, 1, 1, 3}, {0.4f, 0.5f, 0.6f});
    const auto m = threshold_mask(p, 0.5);
    CHECK(m.v[0] == 0);
    CHECK(m.v[1] == 0);  // exactly at threshold stays off
    CHECK(m.v[2] == 1);
    CHECK_THROWS_AS(threshold_mask(p, 1.5), TensorError);
}
