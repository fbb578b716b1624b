#include "irst/box_loss.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

#include "irst/ops.hpp"

namespace irst {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kEps = 1e-9;

double clamp0(double v) { return v > 0 ? v : 0; }

}  // namespace

ScaleContext make_scale_context(double r_oc_value, double delta) {
    if (!(r_oc_value > 0)) throw TensorError("scale context: R_OC must be positive");
    if (!(delta > 0 && delta <= 1)) throw TensorError("scale context: delta must lie in (0, 1]");
    if (delta == 1.0) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true))
            std::cerr << "warning: delta = 1 removes the scale term entirely for the smallest "
                         "targets\n";
    }
    return ScaleContext{r_oc_value, delta, 81.0};
}

double iou(const Box& a, const Box& b) {
    const double iw = clamp0(std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = clamp0(std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

namespace {

double aspect_term(const Box& pred, const Box& gt) {
    const double d = std::atan(gt.width() / (gt.height() + kEps)) -
                     std::atan(pred.width() / (pred.height() + kEps));
    return 4.0 / (kPi * kPi) * d * d;
}

}  // namespace

double loss_bs(const Box& pred, const Box& gt) {
    const double i = iou(pred, gt);
    const double v = aspect_term(pred, gt);
    const double alpha = v / ((1.0 - i) + v + kEps);
    return 1.0 - i + alpha * v;
}

double loss_bl(const Box& pred, const Box& gt) {
    const double ew = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
    const double eh = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
    const double c2 = ew * ew + eh * eh;
    if (c2 <= 0) return 0.0;  // coincident degenerate boxes
    const double dx = pred.cx() - gt.cx();
    const double dy = pred.cy() - gt.cy();
    return (dx * dx + dy * dy) / c2;
}

double iou_loss(const Box& pred, const Box& gt) { return 1.0 - iou(pred, gt); }

double giou_loss(const Box& pred, const Box& gt) {
    const double i = iou(pred, gt);
    const double iw = clamp0(std::min(pred.x2, gt.x2) - std::max(pred.x1, gt.x1));
    const double ih = clamp0(std::min(pred.y2, gt.y2) - std::max(pred.y1, gt.y1));
    const double uni = pred.area() + gt.area() - iw * ih;
    const double ew = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
    const double eh = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
    const double enc = ew * eh;
    const double hull = enc > 0 ? (enc - uni) / enc : 0.0;
    return 1.0 - i + hull;
}

double diou_loss(const Box& pred, const Box& gt) {
    return 1.0 - iou(pred, gt) + loss_bl(pred, gt);
}

double ciou_loss(const Box& pred, const Box& gt) { return loss_bs(pred, gt) + loss_bl(pred, gt); }

double r_oc(double orig_w, double orig_h, double cur_w, double cur_h) {
    if (!(orig_w > 0 && orig_h > 0 && cur_w > 0 && cur_h > 0))
        throw TensorError("r_oc: dimensions must be positive");
    return (orig_w * orig_h) / (cur_w * cur_h);
}

double beta_b(const Box& gt, const ScaleContext& ctx) {
    const double q = gt.area() * ctx.r_oc / ctx.gt_max;
    return ctx.delta * std::min(q, 1.0);
}

LossReport sdb_loss(const Box& pred, const Box& gt, const ScaleContext& ctx) {
    LossReport r;
    r.scale_part = loss_bs(pred, gt);
    r.location_part = loss_bl(pred, gt);
    r.beta_scale = 1.0 - ctx.delta + beta_b(gt, ctx);
    r.beta_location = 2.0 - r.beta_scale;  // exact complement, pair sums to 2
    r.total = r.beta_scale * r.scale_part + r.beta_location * r.location_part;
    return r;
}

// ---- differentiable route ---------------------------------------------------

namespace {

template <typename T>
TensorT<T> cst(double v) {
    return TensorT<T>::scalar(static_cast<T>(v));
}

template <typename T>
struct BoxParts {
    TensorT<T> w, h, cx, cy, area;
};

template <typename T>
BoxParts<T> box_parts(TapeT<T>* tape, const BoxVar<T>& b) {
    BoxParts<T> p;
    p.w = sub(tape, b.x2, b.x1);
    p.h = sub(tape, b.y2, b.y1);
    p.cx = mul_scalar(tape, add(tape, b.x1, b.x2), T(0.5));
    p.cy = mul_scalar(tape, add(tape, b.y1, b.y2), T(0.5));
    p.area = mul(tape, p.w, p.h);
    return p;
}

template <typename T>
TensorT<T> intersection_area(TapeT<T>* tape, const BoxVar<T>& a, const Box& b) {
    auto iw = relu(tape, sub(tape, minimum(tape, a.x2, cst<T>(b.x2)),
                             maximum(tape, a.x1, cst<T>(b.x1))));
    auto ih = relu(tape, sub(tape, minimum(tape, a.y2, cst<T>(b.y2)),
                             maximum(tape, a.y1, cst<T>(b.y1))));
    return mul(tape, iw, ih);
}

}  // namespace

template <typename T>
BoxVar<T> BoxVar<T>::constant(const Box& b) {
    return {cst<T>(b.x1), cst<T>(b.y1), cst<T>(b.x2), cst<T>(b.y2)};
}

template <typename T>
TensorT<T> iou_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    auto parts = box_parts(tape, pred);
    auto inter = intersection_area(tape, pred, gt);
    auto uni = sub(tape, add_scalar(tape, parts.area, static_cast<T>(gt.area())), inter);
    if (uni.item() <= T(0)) return cst<T>(0.0);
    return divide(tape, inter, uni);
}

template <typename T>
TensorT<T> iou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    return add_scalar(tape, neg(tape, iou_t(tape, pred, gt)), T(1));
}

template <typename T>
TensorT<T> loss_bs_fixed_alpha_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt,
                                 double alpha) {
    auto parts = box_parts(tape, pred);
    auto ratio = divide(tape, parts.w, add_scalar(tape, parts.h, static_cast<T>(kEps)));
    auto d = add_scalar(tape, neg(tape, arctan(tape, ratio)),
                        static_cast<T>(std::atan(gt.width() / (gt.height() + kEps))));
    auto v = mul_scalar(tape, mul(tape, d, d), static_cast<T>(4.0 / (kPi * kPi)));
    auto one_minus_iou = add_scalar(tape, neg(tape, iou_t(tape, pred, gt)), T(1));
    return add(tape, one_minus_iou, mul_scalar(tape, v, static_cast<T>(alpha)));
}

template <typename T>
TensorT<T> loss_bs_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    // alpha is a stop-gradient weight computed from the current values
    const Box p = pred.value();
    const double i = iou(p, gt);
    const double v = aspect_term(p, gt);
    const double alpha = v / ((1.0 - i) + v + kEps);
    return loss_bs_fixed_alpha_t(tape, pred, gt, alpha);
}

template <typename T>
TensorT<T> loss_bl_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    auto parts = box_parts(tape, pred);
    auto ew = sub(tape, maximum(tape, pred.x2, cst<T>(gt.x2)),
                  minimum(tape, pred.x1, cst<T>(gt.x1)));
    auto eh = sub(tape, maximum(tape, pred.y2, cst<T>(gt.y2)),
                  minimum(tape, pred.y1, cst<T>(gt.y1)));
    auto c2 = add(tape, mul(tape, ew, ew), mul(tape, eh, eh));
    if (c2.item() <= T(0)) return cst<T>(0.0);
    auto dx = add_scalar(tape, parts.cx, static_cast<T>(-gt.cx()));
    auto dy = add_scalar(tape, parts.cy, static_cast<T>(-gt.cy()));
    auto rho2 = add(tape, mul(tape, dx, dx), mul(tape, dy, dy));
    return divide(tape, rho2, c2);
}

template <typename T>
TensorT<T> giou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    auto parts = box_parts(tape, pred);
    auto inter = intersection_area(tape, pred, gt);
    auto uni = sub(tape, add_scalar(tape, parts.area, static_cast<T>(gt.area())), inter);
    auto ew = sub(tape, maximum(tape, pred.x2, cst<T>(gt.x2)),
                  minimum(tape, pred.x1, cst<T>(gt.x1)));
    auto eh = sub(tape, maximum(tape, pred.y2, cst<T>(gt.y2)),
                  minimum(tape, pred.y1, cst<T>(gt.y1)));
    auto enc = mul(tape, ew, eh);
    auto one = cst<T>(1.0);
    TensorT<T> iou_term =
        uni.item() > T(0) ? divide(tape, inter, uni) : cst<T>(0.0);
    TensorT<T> hull_term =
        enc.item() > T(0) ? divide(tape, sub(tape, enc, uni), enc) : cst<T>(0.0);
    return add(tape, sub(tape, one, iou_term), hull_term);
}

template <typename T>
TensorT<T> diou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    return add(tape, iou_loss_t(tape, pred, gt), loss_bl_t(tape, pred, gt));
}

template <typename T>
TensorT<T> ciou_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt) {
    return add(tape, loss_bs_t(tape, pred, gt), loss_bl_t(tape, pred, gt));
}

template <typename T>
TapedLoss<T> sdb_loss_t(TapeT<T>* tape, const BoxVar<T>& pred, const Box& gt,
                        const ScaleContext& ctx) {
    TapedLoss<T> out;
    auto ls = loss_bs_t(tape, pred, gt);
    auto ll = loss_bl_t(tape, pred, gt);
    const double bs = 1.0 - ctx.delta + beta_b(gt, ctx);
    const double bl = 2.0 - bs;
    out.total = add(tape, mul_scalar(tape, ls, static_cast<T>(bs)),
                    mul_scalar(tape, ll, static_cast<T>(bl)));
    out.report.scale_part = double(ls.item());
    out.report.location_part = double(ll.item());
    out.report.beta_scale = bs;
    out.report.beta_location = bl;
    out.report.total = double(out.total.item());
    return out;
}

#define IRST_INSTANTIATE_BOX(T)                                                              \
    template struct BoxVar<T>;                                                               \
    template TensorT<T> iou_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);                   \
    template TensorT<T> iou_loss_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);              \
    template TensorT<T> loss_bs_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);               \
    template TensorT<T> loss_bs_fixed_alpha_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&,    \
                                                 double);                                    \
    template TensorT<T> loss_bl_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);               \
    template TensorT<T> giou_loss_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);             \
    template TensorT<T> diou_loss_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);             \
    template TensorT<T> ciou_loss_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&);             \
    template TapedLoss<T> sdb_loss_t<T>(TapeT<T>*, const BoxVar<T>&, const Box&,             \
                                        const ScaleContext&);

IRST_INSTANTIATE_BOX(float)
IRST_INSTANTIATE_BOX(double)

}  // namespace irst
