#pragma once

#include <utility>
#include <vector>

#include "irst/box_loss.hpp"
#include "irst/mask_loss.hpp"

namespace irst {

/// One predicted box with class and confidence.
struct Detection {
    Box box;
    int class_id = 0;
    double confidence = 1.0;
};

struct Tally {
    std::int64_t tp = 0, fp = 0, fn = 0;
};

/// Greedy per-image matching by descending confidence: a prediction is TP
/// when an unmatched same-class ground truth overlaps with IoU strictly
/// above the threshold (0.45 per the detection convention here).
Tally match_detections(const std::vector<Detection>& preds, const std::vector<LabeledBox>& gts,
                       double iou_threshold = 0.45);

/// (precision, recall); 0/0 counts as 0.
std::pair<double, double> precision_recall(const Tally& t);

/// Mean average precision at IoU 0.5 over the classes present in the
/// ground truth. All-point interpolation (precision envelope) by default;
/// the 11-point variant is available for cross-checking.
double map50(const std::vector<std::vector<Detection>>& preds,
             const std::vector<std::vector<LabeledBox>>& gts, bool eleven_point = false);

/// One 8-connected component of a binary mask.
struct MaskComponent {
    std::vector<std::pair<int, int>> pixels;  // (row, col)
    double cx = 0, cy = 0;                    // centroid, (col,row) means
};

std::vector<MaskComponent> connected_components(const BinMask& mask, int connectivity = 8);

/// Numerators/denominators of the segmentation metrics, mergeable across a
/// test set before the final ratios are taken.
struct SegTally {
    double inter = 0, uni = 0;
    std::int64_t detected = 0, total_targets = 0;
    std::int64_t false_pixels = 0, all_pixels = 0;

    void merge(const SegTally& o);
};

struct SegMetrics {
    double iou = 0, pd = 0, fa = 0;
};

/// Per-image tallies. A ground-truth component counts as detected when some
/// predicted component's centroid lies within match_dist pixels of its
/// centroid; pixels of unmatched predicted components are false alarms.
SegTally seg_tally(const BinMask& pred, const BinMask& gt, double match_dist = 3.0);

SegMetrics seg_metrics_from(const SegTally& t);
SegMetrics seg_metrics(const BinMask& pred, const BinMask& gt, double match_dist = 3.0);

/// Binary prediction from a (1,1,h,w) probability map at a threshold
/// (strictly greater than).
template <typename T>
BinMask threshold_mask(const TensorT<T>& probs, double threshold = 0.5);

}  // namespace irst
