#pragma once

#include <cstdint>

#include "irst/tensor.hpp"

namespace irst {

/// Axis-aligned box in corner format on the current feature map.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x2 >= x1 && y2 >= y1; }
};

/// Box plus class id, the ground-truth label unit shared by the generator
/// and the metrics.
struct LabeledBox {
    Box box;
    int class_id = 0;
};

/// Scale information the dynamic losses depend on: the original-to-current
/// area ratio, the schedule range delta, and the small-target area cap.
struct ScaleContext {
    double r_oc = 1.0;
    double delta = 0.5;
    double gt_max = 81.0;
};

/// Validates and builds a ScaleContext; delta == 1 is accepted but warned
/// about once (it can zero out the scale term for tiny targets).
ScaleContext make_scale_context(double r_oc, double delta);

/// Scalar loss broken into its scale/location parts and the coefficients
/// that weighted them; total == beta_scale*scale_part +
/// beta_location*location_part holds bit-exactly in the working precision.
struct LossReport {
    double total = 0;
    double scale_part = 0;
    double location_part = 0;
    double beta_scale = 1;
    double beta_location = 1;
};

// ---- plain (non-differentiable) evaluations -------------------------------

double iou(const Box& a, const Box& b);
double loss_bs(const Box& pred, const Box& gt);
double loss_bl(const Box& pred, const Box& gt);
double iou_loss(const Box& pred, const Box& gt);
double giou_loss(const Box& pred, const Box& gt);
double diou_loss(const Box& pred, const Box& gt);
double ciou_loss(const Box& pred, const Box& gt);

/// Original-image to feature-map area ratio (w_o*h_o)/(w_c*h_c).
double r_oc(double orig_w, double orig_h, double cur_w, double cur_h);

/// Dynamic coefficient for a box label: delta * min(area*R_OC/81, 1).
double beta_b(const Box& gt, const ScaleContext& ctx);

LossReport sdb_loss(const Box& pred, const Box& gt, const ScaleContext& ctx);

// ---- differentiable route ---------------------------------------------------

/// Box whose corners are scalar tensors on a tape; gradients flow into the
/// producing network.
template <typename T>
struct BoxVar {
    TensorT<T> x1, y1, x2, y2;

    static BoxVar constant(const Box& b);
    Box value() const { return {double(x1.item()), double(y1.item()), double(x2.item()),
                                double(y2.item())}; }
};

template <typename T>
struct TapedLoss {
    TensorT<T> total;  // scalar on the tape
    LossReport report;
};

template <typename T>
TensorT<T> iou_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
template <typename T>
TensorT<T> iou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
template <typename T>
TensorT<T> loss_bs_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
/// Same with the aspect-ratio weight held fixed (the stop-gradient alpha);
/// loss_bs_t computes alpha from the current values and delegates here.
template <typename T>
TensorT<T> loss_bs_fixed_alpha_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt,
                                 double alpha);
template <typename T>
TensorT<T> loss_bl_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
template <typename T>
TensorT<T> giou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
template <typename T>
TensorT<T> diou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);
template <typename T>
TensorT<T> ciou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt);

/// Scale-based dynamic box loss; the coefficients are constants of the
/// ground truth and carry no gradient.
template <typename T>
TapedLoss<T> sdb_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt,
                        const ScaleContext& ctx);

}  // namespace irst
