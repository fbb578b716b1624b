#include "irst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace irst {

namespace {

// Deterministic order: confidence descending, then box corners, class and
// image index, so equal-confidence permutations of the input cannot change
// any metric.
struct FlatDet {
    Detection det;
    std::size_t image = 0;
};

bool det_before(const FlatDet& a, const FlatDet& b) {
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    const auto ka = std::tie(a.det.box.x1, a.det.box.y1, a.det.box.x2, a.det.box.y2,
                             a.det.class_id, a.image);
    const auto kb = std::tie(b.det.box.x1, b.det.box.y1, b.det.box.x2, b.det.box.y2,
                             b.det.class_id, b.image);
    return ka < kb;
}

}  // namespace

Tally match_detections(const std::vector<Detection>& preds, const std::vector<LabeledBox>& gts,
                       double iou_threshold) {
    std::vector<FlatDet> order;
    order.reserve(preds.size());
    for (const auto& p : preds) order.push_back({p, 0});
    std::sort(order.begin(), order.end(), det_before);

    std::vector<bool> used(gts.size(), false);
    Tally t;
    for (const auto& fd : order) {
        double best = 0;
        std::int64_t best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (used[j] || gts[j].class_id != fd.det.class_id) continue;
            const double v = iou(fd.det.box, gts[j].box);
            if (v > best) {
                best = v;
                best_j = static_cast<std::int64_t>(j);
            }
        }
        if (best_j >= 0 && best > iou_threshold) {
            used[static_cast<std::size_t>(best_j)] = true;
            ++t.tp;
        } else {
            ++t.fp;
        }
    }
    t.fn = static_cast<std::int64_t>(gts.size()) - t.tp;
    return t;
}

std::pair<double, double> precision_recall(const Tally& t) {
    const double p = (t.tp + t.fp) > 0 ? double(t.tp) / double(t.tp + t.fp) : 0.0;
    const double r = (t.tp + t.fn) > 0 ? double(t.tp) / double(t.tp + t.fn) : 0.0;
    return {p, r};
}

double map50(const std::vector<std::vector<Detection>>& preds,
             const std::vector<std::vector<LabeledBox>>& gts, bool eleven_point) {
    if (preds.size() != gts.size()) throw TensorError("map50: image count mismatch");

    std::set<int> classes;
    for (const auto& image : gts)
        for (const auto& g : image) classes.insert(g.class_id);
    if (classes.empty()) return 0.0;

    double ap_sum = 0;
    for (int cls : classes) {
        std::vector<FlatDet> dets;
        std::int64_t gt_count = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            for (const auto& p : preds[i])
                if (p.class_id == cls) dets.push_back({p, i});
            for (const auto& g : gts[i])
                if (g.class_id == cls) ++gt_count;
        }
        std::sort(dets.begin(), dets.end(), det_before);

        std::vector<std::vector<bool>> used(gts.size());
        for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);

        std::vector<bool> is_tp(dets.size(), false);
        for (std::size_t k = 0; k < dets.size(); ++k) {
            const auto& fd = dets[k];
            double best = 0;
            std::int64_t best_j = -1;
            const auto& image_gts = gts[fd.image];
            for (std::size_t j = 0; j < image_gts.size(); ++j) {
                if (used[fd.image][j] || image_gts[j].class_id != cls) continue;
                const double v = iou(fd.det.box, image_gts[j].box);
                if (v > best) {
                    best = v;
                    best_j = static_cast<std::int64_t>(j);
                }
            }
            if (best_j >= 0 && best > 0.5) {
                used[fd.image][static_cast<std::size_t>(best_j)] = true;
                is_tp[k] = true;
            }
        }

        std::vector<double> prec(dets.size()), rec(dets.size());
        std::int64_t tp = 0;
        for (std::size_t k = 0; k < dets.size(); ++k) {
            if (is_tp[k]) ++tp;
            prec[k] = double(tp) / double(k + 1);
            rec[k] = gt_count > 0 ? double(tp) / double(gt_count) : 0.0;
        }

        double ap = 0;
        if (eleven_point) {
            for (int step = 0; step <= 10; ++step) {
                const double r = step / 10.0;
                double pmax = 0;
                for (std::size_t k = 0; k < dets.size(); ++k)
                    if (rec[k] >= r) pmax = std::max(pmax, prec[k]);
                ap += pmax / 11.0;
            }
        } else {
            // precision envelope over the recall staircase
            std::vector<double> env(prec);
            for (std::size_t k = env.size(); k-- > 1;)
                env[k - 1] = std::max(env[k - 1], env[k]);
            double prev_r = 0;
            for (std::size_t k = 0; k < dets.size(); ++k) {
                if (rec[k] > prev_r) {
                    ap += (rec[k] - prev_r) * env[k];
                    prev_r = rec[k];
                }
            }
        }
        ap_sum += ap;
    }
    return ap_sum / double(classes.size());
}

std::vector<MaskComponent> connected_components(const BinMask& mask, int connectivity) {
    if (connectivity != 4 && connectivity != 8)
        throw TensorError("connected_components: connectivity must be 4 or 8");
    std::vector<MaskComponent> comps;
    std::vector<std::int32_t> label(mask.v.size(), -1);
    std::vector<std::pair<int, int>> stack;
    for (int r = 0; r < mask.h; ++r)
        for (int c = 0; c < mask.w; ++c) {
            const std::size_t idx = std::size_t(r) * mask.w + c;
            if (!mask.v[idx] || label[idx] >= 0) continue;
            MaskComponent comp;
            const auto id = static_cast<std::int32_t>(comps.size());
            stack.clear();
            stack.push_back({r, c});
            label[idx] = id;
            while (!stack.empty()) {
                auto [pr, pc] = stack.back();
                stack.pop_back();
                comp.pixels.push_back({pr, pc});
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (connectivity == 4 && dr != 0 && dc != 0) continue;
                        const int nr = pr + dr, nc = pc + dc;
                        if (nr < 0 || nr >= mask.h || nc < 0 || nc >= mask.w) continue;
                        const std::size_t nidx = std::size_t(nr) * mask.w + nc;
                        if (mask.v[nidx] && label[nidx] < 0) {
                            label[nidx] = id;
                            stack.push_back({nr, nc});
                        }
                    }
            }
            double sx = 0, sy = 0;
            for (auto [pr, pc] : comp.pixels) {
                sy += pr;
                sx += pc;
            }
            comp.cx = sx / double(comp.pixels.size());
            comp.cy = sy / double(comp.pixels.size());
            comps.push_back(std::move(comp));
        }
    return comps;
}

void SegTally::merge(const SegTally& o) {
    inter += o.inter;
    uni += o.uni;
    detected += o.detected;
    total_targets += o.total_targets;
    false_pixels += o.false_pixels;
    all_pixels += o.all_pixels;
}

SegTally seg_tally(const BinMask& pred, const BinMask& gt, double match_dist) {
    if (pred.h != gt.h || pred.w != gt.w) throw TensorError("seg_tally: mask shapes differ");
    SegTally t;
    t.all_pixels = std::int64_t(pred.h) * pred.w;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
        t.inter += (p && g) ? 1 : 0;
        t.uni += (p || g) ? 1 : 0;
    }

    const auto gt_comps = connected_components(gt);
    const auto pr_comps = connected_components(pred);
    t.total_targets = static_cast<std::int64_t>(gt_comps.size());

    std::vector<bool> gt_used(gt_comps.size(), false);
    for (const auto& pc : pr_comps) {
        double best = match_dist;
        std::int64_t best_j = -1;
        for (std::size_t j = 0; j < gt_comps.size(); ++j) {
            if (gt_used[j]) continue;
            const double d = std::hypot(pc.cx - gt_comps[j].cx, pc.cy - gt_comps[j].cy);
            if (d <= best) {
                best = d;
                best_j = static_cast<std::int64_t>(j);
            }
        }
        if (best_j >= 0) {
            gt_used[static_cast<std::size_t>(best_j)] = true;
            ++t.detected;
        } else {
            t.false_pixels += static_cast<std::int64_t>(pc.pixels.size());
        }
    }
    return t;
}

SegMetrics seg_metrics_from(const SegTally& t) {
    SegMetrics m;
    m.iou = t.uni > 0 ? t.inter / t.uni : 1.0;  // both empty: perfect agreement
    m.pd = t.total_targets > 0 ? double(t.detected) / double(t.total_targets) : 0.0;
    m.fa = t.all_pixels > 0 ? double(t.false_pixels) / double(t.all_pixels) : 0.0;
    return m;
}

SegMetrics seg_metrics(const BinMask& pred, const BinMask& gt, double match_dist) {
    return seg_metrics_from(seg_tally(pred, gt, match_dist));
}

template <typename T>
BinMask threshold_mask(const TensorT<T>& probs, double threshold) {
    const Shape4 s = probs.shape();
    if (s.n != 1 || s.c != 1) throw TensorError("threshold_mask: expected a (1,1,h,w) tensor");
    if (!(threshold > 0 && threshold < 1))
        throw TensorError("threshold_mask: threshold must lie in (0,1)");
    BinMask m = BinMask::zeros(int(s.h), int(s.w));
    auto pv = probs.values();
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = double(pv[i]) > threshold ? 1 : 0;
    return m;
}

template BinMask threshold_mask<float>(const TensorT<float>&, double);
template BinMask threshold_mask<double>(const TensorT<double>&, double);

}  // namespace irst
