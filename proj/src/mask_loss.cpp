#include "irst/mask_loss.hpp"

#include <cmath>

#include "irst/ops.hpp"

namespace irst {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kEps = 1e-7;

template <typename T>
void require_mask_shape(const TensorT<T>& probs, const BinMask& gt, const char* op) {
    const Shape4 s = probs.shape();
    if (s.n != 1 || s.c != 1)
        throw TensorError(std::string(op) + ": probability mask must be (1,1,h,w), got " +
                          s.str());
    if (s.h != gt.h || s.w != gt.w)
        throw TensorError(std::string(op) + ": mask shapes differ");
}

template <typename T>
TensorT<T> mask_constant(const BinMask& m) {
    std::vector<T> data(m.v.size());
    for (std::size_t i = 0; i < m.v.size(); ++i) data[i] = static_cast<T>(m.v[i]);
    return TensorT<T>::from({1, 1, m.h, m.w}, std::move(data));
}

// Column / row index grids for the soft centroid.
template <typename T>
TensorT<T> coord_grid(int h, int w, bool columns) {
    std::vector<T> data(std::size_t(h) * w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) data[std::size_t(r) * w + c] = static_cast<T>(columns ? c : r);
    return TensorT<T>::from({1, 1, h, w}, std::move(data));
}

}  // namespace

std::int64_t BinMask::count() const {
    std::int64_t n = 0;
    for (auto b : v) n += b;
    return n;
}

double wrap_angle(double a) {
    const double k = std::round(a / (2.0 * kPi));
    double w = a - 2.0 * kPi * k;
    if (w <= -kPi) w = kPi;  // boundary lands on (-pi, pi]
    return w;
}

std::optional<PolarSummary> polar_summary(const BinMask& mask) {
    double sum = 0, sx = 0, sy = 0;
    for (int r = 0; r < mask.h; ++r)
        for (int c = 0; c < mask.w; ++c)
            if (mask.at(r, c)) {
                sum += 1;
                sx += c;
                sy += r;
            }
    if (sum <= kEps) return std::nullopt;
    const double xb = sx / sum, yb = sy / sum;
    return PolarSummary{std::sqrt(xb * xb + yb * yb), std::atan2(yb, xb)};
}

template <typename T>
std::optional<PolarSummary> polar_summary(const TensorT<T>& probs) {
    const Shape4 s = probs.shape();
    if (s.n != 1 || s.c != 1) throw TensorError("polar_summary: expected a (1,1,h,w) mask");
    double sum = 0, sx = 0, sy = 0;
    auto pv = probs.values();
    for (std::int64_t r = 0; r < s.h; ++r)
        for (std::int64_t c = 0; c < s.w; ++c) {
            const double p = pv[r * s.w + c];
            sum += p;
            sx += p * double(c);
            sy += p * double(r);
        }
    if (sum <= kEps) return std::nullopt;
    const double xb = sx / sum, yb = sy / sum;
    return PolarSummary{std::sqrt(xb * xb + yb * yb), std::atan2(yb, xb)};
}

template <typename T>
TensorT<T> soft_iou(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt) {
    require_mask_shape(probs, gt, "soft_iou");
    auto g = mask_constant<T>(gt);
    auto inter = sum(tape, mul(tape, probs, g));
    auto uni = add_scalar(tape, sub(tape, sum(tape, probs), inter),
                          static_cast<T>(double(gt.count()) + kEps));
    return divide(tape, inter, uni);
}

template <typename T>
TensorT<T> dice_loss(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt) {
    require_mask_shape(probs, gt, "dice_loss");
    auto g = mask_constant<T>(gt);
    auto inter = sum(tape, mul(tape, probs, g));
    auto denom = add_scalar(tape, sum(tape, probs), static_cast<T>(double(gt.count()) + kEps));
    return add_scalar(tape, neg(tape, divide(tape, mul_scalar(tape, inter, T(2)), denom)), T(1));
}

template <typename T>
TensorT<T> loss_ms(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt) {
    require_mask_shape(probs, gt, "loss_ms");
    auto sp = sum(tape, probs);
    auto sg = TensorT<T>::scalar(static_cast<T>(double(gt.count())));
    auto omega = divide(tape, minimum(tape, sp, sg),
                        add_scalar(tape, maximum(tape, sp, sg), static_cast<T>(kEps)));
    auto overlap = soft_iou(tape, probs, gt);
    return add_scalar(tape, neg(tape, mul(tape, omega, overlap)), T(1));
}

template <typename T>
TensorT<T> loss_ml(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt) {
    require_mask_shape(probs, gt, "loss_ml");
    const auto gsum = polar_summary(gt);
    if (!gsum) throw TensorError("loss_ml: empty ground truth must be excluded upstream");

    auto sp = sum(tape, probs);
    if (double(sp.item()) <= kEps) {
        // missed object: the formula's supremum, as a constant
        return TensorT<T>::scalar(T(5));
    }
    auto sx = sum(tape, mul(tape, probs, coord_grid<T>(gt.h, gt.w, true)));
    auto sy = sum(tape, mul(tape, probs, coord_grid<T>(gt.h, gt.w, false)));
    auto xb = divide(tape, sx, sp);
    auto yb = divide(tape, sy, sp);
    auto r2 = add_scalar(tape, add(tape, mul(tape, xb, xb), mul(tape, yb, yb)),
                         static_cast<T>(1e-12));
    auto dp = sqrt(tape, r2);
    auto theta_p = arctan2(tape, yb, xb);

    auto dg = TensorT<T>::scalar(static_cast<T>(gsum->d));
    auto ratio = divide(tape, minimum(tape, dp, dg), maximum(tape, dp, dg));
    auto radial = add_scalar(tape, neg(tape, ratio), T(1));

    // The wrap offset is piecewise constant, so it is applied as a shift
    // computed from the current values.
    const double raw = double(theta_p.item()) - gsum->theta;
    const double shift = wrap_angle(raw) - raw;
    auto dtheta = add_scalar(tape, theta_p, static_cast<T>(-gsum->theta + shift));
    auto angular = mul_scalar(tape, mul(tape, dtheta, dtheta), static_cast<T>(4.0 / (kPi * kPi)));
    return add(tape, radial, angular);
}

double beta_m(const BinMask& gt, const ScaleContext& ctx) {
    const double q = double(gt.count()) * ctx.r_oc / ctx.gt_max;
    return ctx.delta * std::min(q, 1.0);
}

template <typename T>
TapedLoss<T> sdm_core(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt,
                      double beta_m_value) {
    TapedLoss<T> out;
    if (gt.empty()) {
        out.total = mean(tape, probs);  // false-positive suppression only
        out.report.scale_part = double(out.total.item());
        out.report.location_part = 0.0;
        out.report.beta_scale = 1.0;
        out.report.beta_location = 1.0;
        out.report.total = out.report.scale_part;
        return out;
    }
    auto ms = loss_ms(tape, probs, gt);
    auto ml = loss_ml(tape, probs, gt);
    const double bs = 1.0 + beta_m_value;
    const double bl = 2.0 - bs;  // == 1 - beta_m, and the pair sums to 2 exactly
    out.total = add(tape, mul_scalar(tape, ms, static_cast<T>(bs)),
                    mul_scalar(tape, ml, static_cast<T>(bl)));
    out.report.scale_part = double(ms.item());
    out.report.location_part = double(ml.item());
    out.report.beta_scale = bs;
    out.report.beta_location = bl;
    out.report.total = double(out.total.item());
    return out;
}

template <typename T>
TapedLoss<T> sdm_loss(TapeT<T>* tape, const TensorT<T>& probs, const BinMask& gt,
                      const ScaleContext& ctx) {
    return sdm_core(tape, probs, gt, beta_m(gt, ctx));
}

#define IRST_INSTANTIATE_MASK(T)                                                              \
    template std::optional<PolarSummary> polar_summary<T>(const TensorT<T>&);                 \
    template TensorT<T> soft_iou<T>(TapeT<T>*, const TensorT<T>&, const BinMask&);            \
    template TensorT<T> dice_loss<T>(TapeT<T>*, const TensorT<T>&, const BinMask&);           \
    template TensorT<T> loss_ms<T>(TapeT<T>*, const TensorT<T>&, const BinMask&);             \
    template TensorT<T> loss_ml<T>(TapeT<T>*, const TensorT<T>&, const BinMask&);             \
    template TapedLoss<T> sdm_core<T>(TapeT<T>*, const TensorT<T>&, const BinMask&, double);  \
    template TapedLoss<T> sdm_loss<T>(TapeT<T>*, const TensorT<T>&, const BinMask&,           \
                                      const ScaleContext&);

IRST_INSTANTIATE_MASK(float)
IRST_INSTANTIATE_MASK(double)

}  // namespace irst
