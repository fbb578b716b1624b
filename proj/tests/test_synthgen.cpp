#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "irst/metrics.hpp"
#include "irst/synthgen.hpp"

using namespace irst;
namespace fs = std::filesystem;

namespace {

SceneSpec small_spec(std::uint64_t seed = 7) {
    SceneSpec s;
    s.height = 48;
    s.width = 48;
    s.seed = seed;
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("generation is deterministic for a fixed spec and seed") {
    const auto a = generate(small_spec(), 12);
    const auto b = generate(small_spec(), 12);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.v == b[i].image.v);
        CHECK(a[i].mask.v == b[i].mask.v);
        REQUIRE(a[i].boxes.size() == b[i].boxes.size());
        for (std::size_t k = 0; k < a[i].boxes.size(); ++k)
            CHECK(a[i].boxes[k].box.x1 == b[i].boxes[k].box.x1);
    }
    const auto c = generate(small_spec(8), 12);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size() && !any_diff; ++i) any_diff = a[i].image.v != c[i].image.v;
    CHECK(any_diff);  // different seed, different data
}

TEST_CASE("small-regime masks stay within the 81-pixel bound") {
    auto spec = small_spec(11);
    spec.max_targets = 3;
    const auto data = generate(spec, 60);
    int targets_seen = 0;
    for (const auto& s : data)
        for (const auto& t : s.targets) {
            ++targets_seen;
            CHECK(t.area <= 81);
            CHECK(t.area >= 1);
        }
    CHECK(targets_seen > 60);
}

TEST_CASE("zero targets requested still yields a background") {
    auto spec = small_spec(13);
    spec.min_targets = spec.max_targets = 0;
    const auto data = generate(spec, 3);
    for (const auto& s : data) {
        CHECK(s.boxes.empty());
        CHECK(s.mask.count() == 0);
        double sum = 0;
        for (float v : s.image.v) sum += v;
        CHECK(sum > 1.0);  // not a black frame
    }
}

TEST_CASE("every mask component sits inside exactly one box with a 1-pixel margin") {
    const auto data = generate(small_spec(17), 40);
    for (const auto& s : data) {
        const auto comps = connected_components(s.mask);
        CHECK(comps.size() == s.boxes.size());
        for (const auto& comp : comps) {
            int inside = 0;
            for (const auto& lb : s.boxes) {
                bool all_in = true;
                int rmin = 1 << 30, rmax = -1, cmin = 1 << 30, cmax = -1;
                for (auto [r, c] : comp.pixels) {
                    all_in = all_in && c >= lb.box.x1 && c + 1 <= lb.box.x2 && r >= lb.box.y1 &&
                             r + 1 <= lb.box.y2;
                    rmin = std::min(rmin, r);
                    rmax = std::max(rmax, r);
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                }
                if (all_in) {
                    ++inside;
                    // tight bound plus the fixed margin
                    CHECK(lb.box.x1 == double(cmin) - 1.0);
                    CHECK(lb.box.y1 == double(rmin) - 1.0);
                    CHECK(lb.box.x2 == double(cmax) + 2.0);
                    CHECK(lb.box.y2 == double(rmax) + 2.0);
                }
            }
            CHECK(inside == 1);
        }
    }
}

TEST_CASE("areas feed the dynamic coefficients in range") {
    const auto ctx = make_scale_context(1.0, 0.5);
    const auto data = generate(small_spec(19), 30);
    for (const auto& s : data) {
        for (const auto& lb : s.boxes) {
            const double b = beta_b(lb.box, ctx);
            CHECK(b > 0.0);
            CHECK(b <= ctx.delta);
        }
        const double bm = beta_m(s.mask, ctx);
        CHECK(bm >= 0.0);
        CHECK(bm <= ctx.delta);
    }
}

TEST_CASE("mean measured contrast tracks the drawn amplitudes within 5 percent") {
    auto spec = small_spec(23);
    spec.num_classes = 1;  // no bird dimming in the measurement
    const auto data = generate(spec, 300);
    double measured = 0, drawn = 0;
    int n = 0;
    for (const auto& s : data)
        for (const auto& t : s.targets) {
            const int cy = int(std::lround(t.cy)), cx = int(std::lround(t.cx));
            const int ring = int(std::ceil(3 * t.sigma)) + 2;
            std::vector<float> bg;
            for (int r = cy - ring; r <= cy + ring; ++r)
                for (int c = cx - ring; c <= cx + ring; ++c) {
                    if (r < 0 || r >= s.image.h || c < 0 || c >= s.image.w) continue;
                    if (std::max(std::abs(r - cy), std::abs(c - cx)) == ring)
                        bg.push_back(s.image.at(r, c));
                }
            REQUIRE(!bg.empty());
            std::nth_element(bg.begin(), bg.begin() + std::ptrdiff_t(bg.size() / 2), bg.end());
            const double local_bg = bg[bg.size() / 2];
            // center sample: the peak sits within half a pixel of (cx, cy)
            const double peak = s.image.at(cy, cx);
            const double expect =
                t.amplitude * std::exp(-((cy - t.cy) * (cy - t.cy) + (cx - t.cx) * (cx - t.cx)) /
                                       (2 * t.sigma * t.sigma));
            measured += peak - local_bg;
            drawn += expect;
            ++n;
        }
    REQUIRE(n >= 500);
    CHECK(measured / n == doctest::Approx(drawn / n).epsilon(0.05));
}

TEST_CASE("bird masks can be omitted while boxes stay") {
    auto spec = small_spec(29);
    spec.omit_bird_masks = true;
    spec.bird_fraction = 0.6;
    const auto data = generate(spec, 40);
    bool saw_bird = false;
    for (const auto& s : data) {
        int uav_targets = 0;
        for (const auto& t : s.targets) {
            if (t.class_id == 1) saw_bird = true;
            uav_targets += t.class_id == 0 ? 1 : 0;
        }
        CHECK(connected_components(s.mask).size() == std::size_t(uav_targets));
        CHECK(s.boxes.size() == s.targets.size());  // boxes keep both classes
    }
    CHECK(saw_bird);
}

TEST_CASE("label jitter respects the IoU bound and sub-pixel centroids") {
    const auto data = generate(small_spec(31), 25);

    SUBCASE("iou_drop of zero is the identity") {
        const auto same = label_jitter(data, 0.0);
        for (std::size_t i = 0; i < data.size(); ++i) {
            CHECK(same[i].mask.v == data[i].mask.v);
            CHECK(same[i].boxes[0].box.x1 == data[i].boxes[0].box.x1);
        }
    }

    SUBCASE("iou_drop = 0.5 stays above half IoU with tiny centroid drift") {
        const auto jit = label_jitter(data, 0.5);
        bool any_box_changed = false, any_mask_changed = false;
        for (std::size_t i = 0; i < data.size(); ++i) {
            for (std::size_t k = 0; k < data[i].boxes.size(); ++k) {
                const Box& clean = data[i].boxes[k].box;
                const Box& noisy = jit[i].boxes[k].box;
                CHECK(iou(clean, noisy) >= 0.5);
                const double shift = std::hypot(noisy.cx() - clean.cx(), noisy.cy() - clean.cy());
                CHECK(shift < 1.0);
                any_box_changed = any_box_changed || iou(clean, noisy) < 0.999;
            }
            // masks: component count preserved, IoU bound, centroid < 1 px
            const auto clean_comps = connected_components(data[i].mask);
            const auto noisy_comps = connected_components(jit[i].mask);
            CHECK(clean_comps.size() == noisy_comps.size());
            double inter = 0, uni = 0;
            for (std::size_t p = 0; p < data[i].mask.v.size(); ++p) {
                inter += (data[i].mask.v[p] && jit[i].mask.v[p]) ? 1 : 0;
                uni += (data[i].mask.v[p] || jit[i].mask.v[p]) ? 1 : 0;
            }
            if (uni > 0) CHECK(inter / uni >= 0.5);
            any_mask_changed = any_mask_changed || inter != uni;
        }
        CHECK(any_box_changed);
        CHECK(any_mask_changed);
    }

    CHECK_THROWS(label_jitter(data, 1.0));
}

TEST_CASE("dataset round trip is byte-identical") {
    const auto dir1 = fs::temp_directory_path() / "irst_ds_a";
    const auto dir2 = fs::temp_directory_path() / "irst_ds_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    const auto spec = small_spec(37);
    const auto data = generate(spec, 6);
    save_dataset(data, spec, dir1.string());

    const auto loaded = load_dataset(dir1.string());
    REQUIRE(loaded.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(loaded[i].mask.v == data[i].mask.v);
        REQUIRE(loaded[i].boxes.size() == data[i].boxes.size());
        // images are lossless within the 16-bit quantization
        for (std::size_t p = 0; p < data[i].image.v.size(); ++p)
            CHECK(std::abs(loaded[i].image.v[p] - data[i].image.v[p]) <= 1.0f / 65535.0f);
    }

    save_dataset(loaded, spec, dir2.string());
    CHECK(dataset_hash(dir1.string()) == dataset_hash(dir2.string()));
    for (int i = 0; i < 6; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06d", i);
        CHECK(slurp(dir1 / "images" / (std::string(name) + ".png")) ==
              slurp(dir2 / "images" / (std::string(name) + ".png")));
        CHECK(slurp(dir1 / "labels" / (std::string(name) + ".json")) ==
              slurp(dir2 / "labels" / (std::string(name) + ".json")));
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("malformed dataset files raise structured errors") {
    const auto dir = fs::temp_directory_path() / "irst_ds_bad";
    fs::remove_all(dir);
    const auto spec = small_spec(41);
    save_dataset(generate(spec, 2), spec, dir.string());

    // truncate one image
    const auto img = dir / "images" / "000001.png";
    const auto bytes = slurp(img);
    std::ofstream(img, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_dataset(dir.string()), doctest::Contains("000001"),
                         std::runtime_error);

    CHECK_THROWS_AS(load_dataset((dir / "missing").string()), std::runtime_error);
    fs::remove_all(dir);
}
