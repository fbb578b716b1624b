#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "irst/box_loss.hpp"
#include "irst/tensor.hpp"

namespace irst {

/// Binary pixel mask. The all-zero mask is a valid value (no-target image).
struct BinMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    static BinMask zeros(int h, int w) { return {h, w, std::vector<std::uint8_t>(std::size_t(h) * w, 0)}; }
    std::uint8_t at(int r, int c) const { return v[std::size_t(r) * w + c]; }
    void set(int r, int c, std::uint8_t val) { v[std::size_t(r) * w + c] = val; }
    std::int64_t count() const;
    bool empty() const { return count() == 0; }
};

/// Polar coordinates of a mask's mean pixel: radial distance from the
/// image origin (top-left pixel centre) and mean angle.
struct PolarSummary {
    double d = 0;
    double theta = 0;
};

/// Soft (probability-weighted) centroid in polar form; nullopt when the
/// mask mass is below eps, in which case callers must branch.
std::optional<PolarSummary> polar_summary(const BinMask& mask);
template <typename T>
std::optional<PolarSummary> polar_summary(const TensorT<T>& probs);

/// Wraps an angle difference into (-pi, pi].
double wrap_angle(double a);

// All taped mask losses take a (1,1,h,w) probability tensor (values in
// [0,1]) against a same-shaped binary ground truth, and are differentiable
// in the probabilities.

template <typename T>
TensorT<T> soft_iou(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt);

template <typename T>
TensorT<T> dice_loss(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt);

/// Mask scale loss 1 - omega * softIoU with omega = min(sum_p, sum_g) /
/// (max(sum_p, sum_g) + eps), the area-parity weight.
template <typename T>
TensorT<T> loss_ms(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt);

/// Mask location loss in polar form; returns the constant supremum 5 when
/// the prediction is effectively empty. Requires a nonempty ground truth.
template <typename T>
TensorT<T> loss_ml(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt);

/// Dynamic coefficient for a mask label: delta * min(count*R_OC/81, 1);
/// 0 for an empty mask.
double beta_m(const BinMask& gt, const ScaleContext& ctx);

/// SDM with an explicit beta_M (beta_M = 0 reproduces the plain
/// scale+location pair).
template <typename T>
TapedLoss<T> sdm_core(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt,
                      double beta_m_value);

/// Scale-based dynamic mask loss, computed per image from that image's own
/// ground truth. An empty ground truth contributes only the
/// false-positive suppression term sum(p)/numel.
template <typename T>
TapedLoss<T> sdm_loss(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt,
                      const ScaleContext& ctx);

}  // namespace irst
