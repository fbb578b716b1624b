#include "irst/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "irst/metrics.hpp"
#include "irst/rng.hpp"

namespace irst {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kMaskThreshold = 0.25;  // of the target amplitude

double mask_radius(double sigma) { return sigma * std::sqrt(-2.0 * std::log(kMaskThreshold)); }

struct PlacedTarget {
    double cx, cy, sigma, amp;
    int class_id;
};

bool far_enough(const PlacedTarget& a, const PlacedTarget& b) {
    const double need = 3.0 * (a.sigma + b.sigma) + 4.0;
    return std::hypot(a.cx - b.cx, a.cy - b.cy) >= need;
}

// One sample from one dedicated substream. Returns false when target
// placement failed and the caller should move to the next substream.
bool try_generate_sample(const SceneSpec& spec, Rng& rng, SceneSample& out) {
    const int h = spec.height, w = spec.width;
    Image img = Image::zeros(h, w);

    // background: base level + directional gradient + two broad bumps
    const double base = rng.uniform(0.18, 0.42);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double gstrength = spec.gradient_strength * rng.uniform(0.4, 1.0);
    const double ux = std::cos(angle), uy = std::sin(angle);
    const double diag = std::hypot(double(h), double(w));
    struct Bump {
        double cx, cy, sigma, amp;
    };
    Bump bumps[2];
    for (auto& b : bumps)
        b = {rng.uniform(0, w), rng.uniform(0, h), rng.uniform(w / 4.0, w / 2.0),
             rng.uniform(-0.05, 0.05)};
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double proj = (c * ux + r * uy) / diag;
            double v = base + gstrength * proj;
            for (const auto& b : bumps) {
                const double d2 = (c - b.cx) * (c - b.cx) + (r - b.cy) * (r - b.cy);
                v += b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
            }
            img.at(r, c) = float(v);
        }

    // blob clutter
    const int blobs = int(std::lround(spec.clutter_density * h * w));
    for (int i = 0; i < blobs; ++i) {
        const double bx = rng.uniform(0, w), by = rng.uniform(0, h);
        const double bs = rng.uniform(1.5, 4.5);
        const double ba = rng.uniform(-0.05, 0.08);
        const int rad = int(std::ceil(2.5 * bs));
        for (int r = std::max(0, int(by) - rad); r <= std::min(h - 1, int(by) + rad); ++r)
            for (int c = std::max(0, int(bx) - rad); c <= std::min(w - 1, int(bx) + rad); ++c) {
                const double d2 = (c - bx) * (c - bx) + (r - by) * (r - by);
                img.at(r, c) += float(ba * std::exp(-d2 / (2.0 * bs * bs)));
            }
    }

    // pixel noise
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) img.at(r, c) += float(rng.normal(0.0, spec.noise_std));

    // targets
    const int count = int(rng.uniform_int(spec.min_targets, spec.max_targets));
    std::vector<PlacedTarget> placed;
    for (int t = 0; t < count; ++t) {
        PlacedTarget tg;
        tg.class_id =
            (spec.num_classes > 1 && rng.bernoulli(spec.bird_fraction)) ? 1 : 0;
        const bool large = spec.large_target_fraction > 0 &&
                           rng.bernoulli(spec.large_target_fraction);
        tg.sigma = large ? rng.uniform(3.3, 4.5) : rng.uniform(spec.sigma_lo, spec.sigma_hi);
        tg.amp = rng.uniform(spec.amp_lo, spec.amp_hi);
        if (tg.class_id == 1) tg.amp *= spec.bird_amp_scale;

        const double margin = 3.0 * tg.sigma + 2.0;
        if (2 * margin >= std::min(h, w) - 1) return false;
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            tg.cx = rng.uniform(margin, w - 1 - margin);
            tg.cy = rng.uniform(margin, h - 1 - margin);
            ok = true;
            for (const auto& other : placed)
                if (!far_enough(tg, other)) {
                    ok = false;
                    break;
                }
        }
        if (!ok) return false;
        placed.push_back(tg);
    }

    BinMask mask = BinMask::zeros(h, w);
    out.boxes.clear();
    out.targets.clear();
    for (const auto& tg : placed) {
        const double rcut = 3.0 * tg.sigma;
        const double rmask2 = mask_radius(tg.sigma) * mask_radius(tg.sigma);
        int rmin = h, rmax = -1, cmin = w, cmax = -1, area = 0;
        for (int r = std::max(0, int(std::floor(tg.cy - rcut)));
             r <= std::min(h - 1, int(std::ceil(tg.cy + rcut))); ++r)
            for (int c = std::max(0, int(std::floor(tg.cx - rcut)));
                 c <= std::min(w - 1, int(std::ceil(tg.cx + rcut))); ++c) {
                const double d2 = (c - tg.cx) * (c - tg.cx) + (r - tg.cy) * (r - tg.cy);
                if (d2 > rcut * rcut) continue;
                img.at(r, c) += float(tg.amp * std::exp(-d2 / (2.0 * tg.sigma * tg.sigma)));
                if (d2 < rmask2) {
                    ++area;
                    rmin = std::min(rmin, r);
                    rmax = std::max(rmax, r);
                    cmin = std::min(cmin, c);
                    cmax = std::max(cmax, c);
                    if (!(spec.omit_bird_masks && tg.class_id == 1)) mask.set(r, c, 1);
                }
            }
        if (area == 0) return false;  // sub-pixel target, resample
        LabeledBox lb;
        lb.box = {double(cmin) - 1.0, double(rmin) - 1.0, double(cmax) + 2.0,
                  double(rmax) + 2.0};
        lb.class_id = tg.class_id;
        out.boxes.push_back(lb);
        out.targets.push_back({tg.cx, tg.cy, tg.amp, tg.sigma, area, tg.class_id});
    }

    for (auto& v : img.v) v = std::clamp(v, 0.0f, 1.0f);
    out.image = std::move(img);
    out.mask = std::move(mask);
    return true;
}

}  // namespace

void SceneSpec::validate() const {
    if (height < 8 || width < 8) throw std::runtime_error("scene spec: image too small");
    if (min_targets < 0 || max_targets < min_targets)
        throw std::runtime_error("scene spec: bad target count range");
    if (!(amp_lo > 0 && amp_hi >= amp_lo)) throw std::runtime_error("scene spec: bad amplitude range");
    if (!(sigma_lo > 0 && sigma_hi >= sigma_lo)) throw std::runtime_error("scene spec: bad sigma range");
    if (noise_std < 0 || clutter_density < 0 || gradient_strength < 0)
        throw std::runtime_error("scene spec: negative strengths");
    if (num_classes != 1 && num_classes != 2)
        throw std::runtime_error("scene spec: num_classes must be 1 or 2");
    if (large_target_fraction < 0 || large_target_fraction > 1 || bird_fraction < 0 ||
        bird_fraction > 1)
        throw std::runtime_error("scene spec: fractions must lie in [0,1]");
}

std::vector<SceneSample> generate(const SceneSpec& spec, int n) {
    spec.validate();
    std::vector<SceneSample> data(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        bool done = false;
        for (std::uint64_t attempt = 0; attempt < 64 && !done; ++attempt) {
            Rng rng(spec.seed, std::uint64_t(i) | (attempt << 40));
            done = try_generate_sample(spec, rng, data[std::size_t(i)]);
        }
        if (!done)
            throw std::runtime_error("generate: target placement failed repeatedly; spec too tight");
    }
    return data;
}

// ---- label jitter -----------------------------------------------------------

namespace {

Box jitter_box(const Box& clean, double iou_drop, Rng& rng) {
    const double q = rng.uniform(1.0 - 0.9 * iou_drop, 1.0 - 0.15 * iou_drop);
    const double f = rng.bernoulli(0.5) ? 1.0 / std::sqrt(q) : std::sqrt(q);
    Box b;
    const double cx = clean.cx(), cy = clean.cy();
    const double hw = 0.5 * clean.width() * f, hh = 0.5 * clean.height() * f;
    double dx = rng.uniform(-0.65, 0.65), dy = rng.uniform(-0.65, 0.65);
    const double norm = std::hypot(dx, dy);
    if (norm >= 0.99) {
        dx *= 0.98 / norm;
        dy *= 0.98 / norm;
    }
    for (int halvings = 0; halvings < 60; ++halvings) {
        b = {cx + dx - hw, cy + dy - hh, cx + dx + hw, cy + dy + hh};
        if (iou(b, clean) >= 1.0 - iou_drop) return b;
        dx *= 0.5;
        dy *= 0.5;
    }
    return clean;
}

double pixel_iou(const std::set<std::pair<int, int>>& a, const std::set<std::pair<int, int>>& b) {
    std::size_t inter = 0;
    for (const auto& p : a) inter += b.count(p);
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

std::pair<double, double> pixel_centroid(const std::set<std::pair<int, int>>& s) {
    double sx = 0, sy = 0;
    for (const auto& [r, c] : s) {
        sy += r;
        sx += c;
    }
    return {sx / double(s.size()), sy / double(s.size())};
}

bool connected_single(const std::set<std::pair<int, int>>& s) {
    if (s.empty()) return false;
    std::set<std::pair<int, int>> seen;
    std::vector<std::pair<int, int>> stack = {*s.begin()};
    seen.insert(*s.begin());
    while (!stack.empty()) {
        auto [r, c] = stack.back();
        stack.pop_back();
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
                if (!dr && !dc) continue;
                const std::pair<int, int> nb{r + dr, c + dc};
                if (s.count(nb) && !seen.count(nb)) {
                    seen.insert(nb);
                    stack.push_back(nb);
                }
            }
    }
    return seen.size() == s.size();
}

// Grows/erodes one component toward a target IoU while keeping it a single
// component with a sub-pixel centroid shift.
std::set<std::pair<int, int>> jitter_component(const MaskComponent& comp,
                                               const std::set<std::pair<int, int>>& forbidden,
                                               int h, int w, double iou_drop, Rng& rng) {
    std::set<std::pair<int, int>> clean(comp.pixels.begin(), comp.pixels.end());
    std::set<std::pair<int, int>> cur = clean;
    const double q = rng.uniform(1.0 - 0.8 * iou_drop, 1.0 - 0.2 * iou_drop);
    const auto [cx0, cy0] = pixel_centroid(clean);

    for (int step = 0; step < 200 && pixel_iou(cur, clean) > q; ++step) {
        // candidate move: add a ring pixel or remove a boundary pixel
        std::vector<std::pair<int, int>> adds, rems;
        for (const auto& [r, c] : cur) {
            bool boundary = false;
            for (int dr = -1; dr <= 1 && !boundary; ++dr)
                for (int dc = -1; dc <= 1 && !boundary; ++dc)
                    if ((dr || dc) && !cur.count({r + dr, c + dc})) boundary = true;
            if (boundary) rems.push_back({r, c});
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    if (!dr && !dc) continue;
                    const int nr = r + dr, nc = c + dc;
                    if (nr < 1 || nr >= h - 1 || nc < 1 || nc >= w - 1) continue;
                    const std::pair<int, int> nb{nr, nc};
                    if (!cur.count(nb) && !forbidden.count(nb)) adds.push_back(nb);
                }
        }
        const bool do_add = rng.bernoulli(0.5);
        auto& pool = do_add ? adds : rems;
        if (pool.empty()) continue;
        std::sort(pool.begin(), pool.end());
        pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
        const auto pick = pool[std::size_t(rng.uniform_int(0, std::int64_t(pool.size()) - 1))];

        auto next = cur;
        if (do_add)
            next.insert(pick);
        else
            next.erase(pick);
        if (next.empty() || !connected_single(next)) continue;
        if (pixel_iou(next, clean) < 1.0 - iou_drop) continue;
        const auto [cx1, cy1] = pixel_centroid(next);
        if (std::hypot(cx1 - cx0, cy1 - cy0) >= 0.999) continue;
        cur = std::move(next);
    }
    return cur;
}

}  // namespace

std::vector<SceneSample> label_jitter(const std::vector<SceneSample>& data, double iou_drop,
                                      std::uint64_t seed) {
    if (!(iou_drop >= 0 && iou_drop < 1))
        throw std::runtime_error("label_jitter: iou_drop must lie in [0,1)");
    if (iou_drop == 0) return data;
    std::vector<SceneSample> out = data;
    for (std::size_t i = 0; i < out.size(); ++i) {
        Rng rng(seed ^ 0x6a09e667f3bcc908ULL, i);
        auto& sample = out[i];
        for (auto& lb : sample.boxes) lb.box = jitter_box(lb.box, iou_drop, rng);

        const auto comps = connected_components(sample.mask);
        std::set<std::pair<int, int>> occupied;
        for (const auto& c : comps)
            occupied.insert(c.pixels.begin(), c.pixels.end());
        BinMask jittered = BinMask::zeros(sample.mask.h, sample.mask.w);
        for (const auto& comp : comps) {
            // pixels near other components stay off-limits so components
            // cannot merge
            std::set<std::pair<int, int>> forbidden;
            for (const auto& other : comps) {
                if (&other == &comp) continue;
                for (const auto& [r, c] : other.pixels)
                    for (int dr = -2; dr <= 2; ++dr)
                        for (int dc = -2; dc <= 2; ++dc) forbidden.insert({r + dr, c + dc});
            }
            const auto pix = jitter_component(comp, forbidden, sample.mask.h, sample.mask.w,
                                              iou_drop, rng);
            for (const auto& [r, c] : pix) jittered.set(r, c, 1);
        }
        sample.mask = std::move(jittered);
    }
    return out;
}

// ---- persistence ------------------------------------------------------------

namespace {

std::vector<std::int64_t> mask_to_rle(const BinMask& m) {
    std::vector<std::int64_t> runs;
    std::uint8_t cur = 0;
    std::int64_t len = 0;
    for (auto b : m.v) {
        if (b == cur) {
            ++len;
        } else {
            runs.push_back(len);
            cur = b;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

BinMask rle_to_mask(const std::vector<std::int64_t>& runs, int h, int w,
                    const std::string& path) {
    BinMask m = BinMask::zeros(h, w);
    std::size_t pos = 0;
    std::uint8_t cur = 0;
    for (auto len : runs) {
        if (len < 0 || pos + std::size_t(len) > m.v.size())
            throw std::runtime_error("dataset: " + path + ": mask run-length overflows image");
        std::fill(m.v.begin() + pos, m.v.begin() + pos + std::size_t(len), cur);
        pos += std::size_t(len);
        cur = !cur;
    }
    if (pos != m.v.size())
        throw std::runtime_error("dataset: " + path + ": mask run-length short of image size");
    return m;
}

std::string index_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return buf;
}

ordered_json spec_to_json(const SceneSpec& s) {
    ordered_json j;
    j["height"] = s.height;
    j["width"] = s.width;
    j["min_targets"] = s.min_targets;
    j["max_targets"] = s.max_targets;
    j["amp_lo"] = s.amp_lo;
    j["amp_hi"] = s.amp_hi;
    j["sigma_lo"] = s.sigma_lo;
    j["sigma_hi"] = s.sigma_hi;
    j["clutter_density"] = s.clutter_density;
    j["gradient_strength"] = s.gradient_strength;
    j["noise_std"] = s.noise_std;
    j["large_target_fraction"] = s.large_target_fraction;
    j["num_classes"] = s.num_classes;
    j["bird_fraction"] = s.bird_fraction;
    j["bird_amp_scale"] = s.bird_amp_scale;
    j["omit_bird_masks"] = s.omit_bird_masks;
    j["seed"] = s.seed;
    return j;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t hash_file(std::uint64_t h, const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot read " + p.string());
    char buf[65536];
    while (f.read(buf, sizeof buf) || f.gcount() > 0)
        h = fnv1a(h, buf, std::size_t(f.gcount()));
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

void save_dataset(const std::vector<SceneSample>& data, const SceneSpec& spec,
                  const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        write_png16((fs::path(dir) / "images" / (index_name(i) + ".png")).string(), s.image);

        ordered_json j;
        j["boxes"] = ordered_json::array();
        for (const auto& lb : s.boxes) {
            ordered_json b;
            b["class"] = lb.class_id;
            b["x1"] = lb.box.x1;
            b["y1"] = lb.box.y1;
            b["x2"] = lb.box.x2;
            b["y2"] = lb.box.y2;
            j["boxes"].push_back(b);
        }
        j["mask_rle"] = mask_to_rle(s.mask);
        j["targets"] = ordered_json::array();
        for (const auto& t : s.targets) {
            ordered_json m;
            m["class"] = t.class_id;
            m["cx"] = t.cx;
            m["cy"] = t.cy;
            m["sigma"] = t.sigma;
            m["amplitude"] = t.amplitude;
            m["area"] = t.area;
            j["targets"].push_back(m);
        }
        std::ofstream f(fs::path(dir) / "labels" / (index_name(i) + ".json"));
        f << j.dump(2) << "\n";
    }

    ordered_json manifest;
    manifest["count"] = data.size();
    manifest["spec"] = spec_to_json(spec);
    manifest["content_hash"] = dataset_hash(dir);
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

std::string dataset_hash(const std::string& dir) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0;; ++i) {
        const auto lbl = fs::path(dir) / "labels" / (index_name(i) + ".json");
        const auto img = fs::path(dir) / "images" / (index_name(i) + ".png");
        if (!fs::exists(lbl)) break;
        h = hash_file(h, lbl);
        h = hash_file(h, img);
    }
    return hex64(h);
}

std::vector<SceneSample> load_dataset(const std::string& dir) {
    const auto manifest_path = fs::path(dir) / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("dataset: missing " + manifest_path.string());
    ordered_json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("dataset: " + manifest_path.string() + ": " + e.what());
    }
    const auto count = manifest.at("count").get<std::size_t>();

    std::vector<SceneSample> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto lbl = (fs::path(dir) / "labels" / (index_name(i) + ".json")).string();
        const auto img = (fs::path(dir) / "images" / (index_name(i) + ".png")).string();
        auto& s = data[i];
        s.image = read_png16(img);

        std::ifstream lf(lbl);
        if (!lf) throw std::runtime_error("dataset: missing " + lbl);
        ordered_json j;
        try {
            lf >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("dataset: " + lbl + ": " + e.what());
        }
        try {
            for (const auto& b : j.at("boxes")) {
                LabeledBox lb;
                lb.class_id = b.at("class").get<int>();
                lb.box = {b.at("x1").get<double>(), b.at("y1").get<double>(),
                          b.at("x2").get<double>(), b.at("y2").get<double>()};
                s.boxes.push_back(lb);
            }
            s.mask = rle_to_mask(j.at("mask_rle").get<std::vector<std::int64_t>>(), s.image.h,
                                 s.image.w, lbl);
            for (const auto& m : j.at("targets")) {
                TargetMeta t;
                t.class_id = m.at("class").get<int>();
                t.cx = m.at("cx").get<double>();
                t.cy = m.at("cy").get<double>();
                t.sigma = m.at("sigma").get<double>();
                t.amplitude = m.at("amplitude").get<double>();
                t.area = m.at("area").get<int>();
                s.targets.push_back(t);
            }
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("dataset: " + lbl + ": " + e.what());
        }
    }
    return data;
}

}  // namespace irst
