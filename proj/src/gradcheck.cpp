#include "irst/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "irst/box_loss.hpp"
#include "irst/mask_loss.hpp"
#include "irst/ops.hpp"
#include "irst/rng.hpp"

namespace irst {

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

constexpr double kStep = 1e-3;

/// One randomized check instance: differentiable inputs plus a closure
/// evaluating the scalar loss. Any constants (projection weights, frozen
/// coefficients, ground truths) are baked into the closure so the finite
/// differences probe exactly the function the tape differentiates.
struct Instance {
    std::vector<DTensor> inputs;
    std::function<DTensor(DTape*, const std::vector<DTensor>&)> f;
};

using InstanceGen = std::function<Instance(Rng&)>;

DTensor rand_tensor(Rng& rng, Shape4 s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(static_cast<std::size_t>(s.numel()));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return DTensor::from(s, std::move(data), true);
}

Shape4 rand_shape(Rng& rng, int cmax = 4, int hwmax = 6) {
    return {rng.uniform_int(1, 2), rng.uniform_int(1, cmax), rng.uniform_int(1, hwmax),
            rng.uniform_int(1, hwmax)};
}

/// Random projection so tensor-valued ops reduce to a scalar without the
/// symmetric cancellations a plain sum can hide.
DTensor projection(Rng& rng, Shape4 s) {
    std::vector<double> data(static_cast<std::size_t>(s.numel()));
    for (auto& v : data) v = rng.uniform(0.25, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    return DTensor::from(s, std::move(data), false);
}

double eval(const Instance& inst) {
    return double(inst.f(nullptr, inst.inputs).item());
}

double check_instance(const Instance& inst) {
    DTape tape;
    auto loss = inst.f(&tape, inst.inputs);
    tape.backward(loss);

    double worst = 0;
    for (auto input : inst.inputs) {  // handle copy, shares storage
        auto vals = input.values();
        auto grads = input.grad();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double keep = vals[j];
            vals[j] = keep + kStep;
            const double up = eval(inst);
            vals[j] = keep - kStep;
            const double dn = eval(inst);
            vals[j] = keep;
            const double fd = (up - dn) / (2.0 * kStep);
            const double a = grads[j];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- instance generators ---------------------------------------------------

Instance unary_case(Rng& rng, DTensor (*op)(DTape*, const DTensor&), double lo = -1.0,
                    double hi = 1.0) {
    Instance inst;
    const Shape4 s = rand_shape(rng);
    inst.inputs = {rand_tensor(rng, s, lo, hi)};
    auto proj = projection(rng, s);
    inst.f = [op, proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, op(t, in[0]), proj));
    };
    return inst;
}

Instance binary_case(Rng& rng, DTensor (*op)(DTape*, const DTensor&, const DTensor&),
                     double blo = -1.0, double bhi = 1.0, double min_gap = 0.0) {
    Instance inst;
    const Shape4 s = rand_shape(rng);
    auto a = rand_tensor(rng, s);
    auto b = rand_tensor(rng, s, blo, bhi);
    if (min_gap > 0) {  // keep min/max branches away from ties
        auto av = a.values();
        auto bv = b.values();
        for (std::size_t i = 0; i < av.size(); ++i)
            while (std::abs(av[i] - bv[i]) < min_gap) bv[i] = rng.uniform(blo, bhi);
    }
    inst.inputs = {a, b};
    auto proj = projection(rng, s);
    inst.f = [op, proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, op(t, in[0], in[1]), proj));
    };
    return inst;
}

Instance conv_case(Rng& rng) {
    ConvSpec spec;
    spec.groups = int(rng.uniform_int(1, 2));
    spec.in_channels = spec.groups * int(rng.uniform_int(1, 2));
    spec.out_channels = spec.groups * int(rng.uniform_int(1, 2));
    spec.kernel_h = int(rng.uniform_int(1, 4));
    spec.kernel_w = int(rng.uniform_int(1, 4));
    spec.stride = int(rng.uniform_int(1, 2));
    spec.pad = {int(rng.uniform_int(0, 3)), int(rng.uniform_int(0, 3)), int(rng.uniform_int(0, 3)),
                int(rng.uniform_int(0, 3))};
    spec.bias = rng.bernoulli(0.5);
    const std::int64_t n = rng.uniform_int(1, 2);
    std::int64_t h, w;
    do {
        h = rng.uniform_int(1, 6);
        w = rng.uniform_int(1, 6);
    } while (h + spec.pad.top + spec.pad.bottom < spec.kernel_h ||
             w + spec.pad.left + spec.pad.right < spec.kernel_w);

    Instance inst;
    auto x = rand_tensor(rng, {n, spec.in_channels, h, w});
    auto wts = rand_tensor(
        rng, {spec.out_channels, spec.in_channels / spec.groups, spec.kernel_h, spec.kernel_w});
    inst.inputs = {x, wts};
    DTensor bias;
    if (spec.bias) {
        bias = rand_tensor(rng, {1, spec.out_channels, 1, 1});
        inst.inputs.push_back(bias);
    }
    const auto [oh, ow] = spec.out_hw(h, w);
    auto proj = projection(rng, {n, spec.out_channels, oh, ow});
    inst.f = [spec, proj, bias](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, conv2d(t, in[0], in[1], spec, bias), proj));
    };
    return inst;
}

Instance batch_norm_case(Rng& rng, bool training) {
    const Shape4 s = {rng.uniform_int(2, 3), rng.uniform_int(1, 3), rng.uniform_int(2, 5),
                      rng.uniform_int(2, 5)};
    Instance inst;
    auto x = rand_tensor(rng, s);
    auto state = std::make_shared<BatchNormState<double>>(
        BatchNormState<double>::identity(int(s.c)));
    for (auto& g : state->gamma.values()) g = rng.uniform(0.5, 1.5);
    for (auto& b : state->beta.values()) b = rng.uniform(-0.5, 0.5);
    for (auto& m : state->running_mean) m = rng.uniform(-0.3, 0.3);
    for (auto& v : state->running_var) v = rng.uniform(0.5, 1.5);
    inst.inputs = {x, state->gamma, state->beta};
    auto proj = projection(rng, s);
    inst.f = [state, proj, training](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, batch_norm(t, in[0], *state, training), proj));
    };
    return inst;
}

Instance concat_case(Rng& rng) {
    const std::int64_t n = rng.uniform_int(1, 2);
    const std::int64_t h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
    const int parts = int(rng.uniform_int(2, 4));
    Instance inst;
    std::int64_t ctot = 0;
    for (int i = 0; i < parts; ++i) {
        const std::int64_t c = rng.uniform_int(1, 3);
        ctot += c;
        inst.inputs.push_back(rand_tensor(rng, {n, c, h, w}));
    }
    auto proj = projection(rng, {n, ctot, h, w});
    inst.f = [proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, concat_channels(t, in), proj));
    };
    return inst;
}

Instance slice_channels_case(Rng& rng) {
    const Shape4 s = {rng.uniform_int(1, 2), rng.uniform_int(2, 5), rng.uniform_int(2, 4),
                      rng.uniform_int(2, 4)};
    const std::int64_t c0 = rng.uniform_int(0, s.c - 1);
    const std::int64_t cnt = rng.uniform_int(1, s.c - c0);
    Instance inst;
    inst.inputs = {rand_tensor(rng, s)};
    auto proj = projection(rng, {s.n, cnt, s.h, s.w});
    inst.f = [proj, c0, cnt](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, slice_channels(t, in[0], c0, cnt), proj));
    };
    return inst;
}

Instance slice_batch_case(Rng& rng) {
    const Shape4 s = {rng.uniform_int(2, 3), rng.uniform_int(1, 3), rng.uniform_int(2, 4),
                      rng.uniform_int(2, 4)};
    const std::int64_t i = rng.uniform_int(0, s.n - 1);
    Instance inst;
    inst.inputs = {rand_tensor(rng, s)};
    auto proj = projection(rng, {1, s.c, s.h, s.w});
    inst.f = [proj, i](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, slice_batch(t, in[0], i), proj));
    };
    return inst;
}

Instance max_pool_case(Rng& rng) {
    const Shape4 s = {rng.uniform_int(1, 2), rng.uniform_int(1, 3), 2 * rng.uniform_int(1, 3),
                      2 * rng.uniform_int(1, 3)};
    // well-separated values keep the argmax stable under the fd step
    std::vector<double> vals(static_cast<std::size_t>(s.numel()));
    for (std::size_t i = 0; i < vals.size(); ++i)
        vals[i] = -1.0 + 2.0 * (double(i) + 0.5) / double(vals.size());
    for (std::size_t i = vals.size(); i > 1; --i)
        std::swap(vals[i - 1], vals[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    Instance inst;
    inst.inputs = {DTensor::from(s, std::move(vals), true)};
    auto proj = projection(rng, {s.n, s.c, s.h / 2, s.w / 2});
    inst.f = [proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, max_pool2(t, in[0]), proj));
    };
    return inst;
}

Instance upsample_case(Rng& rng) {
    const Shape4 s = rand_shape(rng, 3, 4);
    Instance inst;
    inst.inputs = {rand_tensor(rng, s)};
    auto proj = projection(rng, {s.n, s.c, s.h * 2, s.w * 2});
    inst.f = [proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, upsample_nearest2(t, in[0]), proj));
    };
    return inst;
}

Instance gap_case(Rng& rng) {
    const Shape4 s = rand_shape(rng);
    Instance inst;
    inst.inputs = {rand_tensor(rng, s)};
    auto proj = projection(rng, {s.n, s.c, 1, 1});
    inst.f = [proj](DTape* t, const std::vector<DTensor>& in) {
        return sum(t, mul(t, global_avg_pool(t, in[0]), proj));
    };
    return inst;
}

// -- box losses --------------------------------------------------------------

// Random overlapping-but-not-touching box pair; the fd step must not cross
// a min/max/relu branch, so every edge pair keeps a margin.
void sample_boxes(Rng& rng, Box& pred, Box& gt) {
    while (true) {
        pred = {rng.uniform(0, 5), rng.uniform(0, 5), 0, 0};
        pred.x2 = pred.x1 + rng.uniform(0.6, 4.0);
        pred.y2 = pred.y1 + rng.uniform(0.6, 4.0);
        gt = {rng.uniform(0, 5), rng.uniform(0, 5), 0, 0};
        gt.x2 = gt.x1 + rng.uniform(0.6, 4.0);
        gt.y2 = gt.y1 + rng.uniform(0.6, 4.0);
        const double gap = 0.05;
        const double edges[4] = {pred.x1 - gt.x1, pred.x2 - gt.x2, pred.y1 - gt.y1,
                                 pred.y2 - gt.y2};
        bool ok = true;
        for (double e : edges) ok = ok && std::abs(e) > gap;
        const double iw = std::min(pred.x2, gt.x2) - std::max(pred.x1, gt.x1);
        const double ih = std::min(pred.y2, gt.y2) - std::max(pred.y1, gt.y1);
        ok = ok && std::abs(iw) > gap && std::abs(ih) > gap;
        if (ok) return;
    }
}

BoxVar<double> as_var(const std::vector<DTensor>& in) { return {in[0], in[1], in[2], in[3]}; }

std::vector<DTensor> box_inputs(const Box& b) {
    return {DTensor::scalar(b.x1, true), DTensor::scalar(b.y1, true),
            DTensor::scalar(b.x2, true), DTensor::scalar(b.y2, true)};
}

Instance box_loss_case(Rng& rng, int which) {
    Box pred, gt;
    sample_boxes(rng, pred, gt);
    Instance inst;
    inst.inputs = box_inputs(pred);
    // freeze the stop-gradient aspect weight at the base point
    const double i0 = iou(pred, gt);
    const double dv = std::atan(gt.width() / (gt.height() + 1e-9)) -
                      std::atan(pred.width() / (pred.height() + 1e-9));
    const double v0 = 4.0 / (3.14159265358979323846 * 3.14159265358979323846) * dv * dv;
    const double alpha = v0 / ((1.0 - i0) + v0 + 1e-9);
    const ScaleContext ctx = make_scale_context(rng.uniform(0.5, 4.0), 0.5);
    inst.f = [gt, which, alpha, ctx](DTape* t, const std::vector<DTensor>& in) -> DTensor {
        const auto pv = as_var(in);
        switch (which) {
            case 0: return iou_t(t, pv, gt);
            case 1: return loss_bs_fixed_alpha_t(t, pv, gt, alpha);
            case 2: return loss_bl_t(t, pv, gt);
            case 3: return giou_loss_t(t, pv, gt);
            case 4: return diou_loss_t(t, pv, gt);
            case 5:
                return add(t, loss_bs_fixed_alpha_t(t, pv, gt, alpha), loss_bl_t(t, pv, gt));
            default: {
                const double bs = 1.0 - ctx.delta + beta_b(gt, ctx);
                const double bl = 2.0 - bs;
                return add(t, mul_scalar(t, loss_bs_fixed_alpha_t(t, pv, gt, alpha), bs),
                           mul_scalar(t, loss_bl_t(t, pv, gt), bl));
            }
        }
    };
    return inst;
}

// -- mask losses ---------------------------------------------------------------

BinMask random_mask(Rng& rng, int h, int w, int min_pixels) {
    while (true) {
        BinMask m = BinMask::zeros(h, w);
        for (auto& b : m.v) b = rng.bernoulli(0.3) ? 1 : 0;
        if (m.count() >= min_pixels && !(m.count() == 1 && m.at(0, 0))) return m;
    }
}

Instance mask_loss_case(Rng& rng, int which) {
    const int h = int(rng.uniform_int(3, 6)), w = int(rng.uniform_int(3, 6));
    const BinMask gt = random_mask(rng, h, w, 2);
    Instance inst;
    DTensor p;
    while (true) {
        p = rand_tensor(rng, {1, 1, h, w}, 0.05, 0.95);
        double sp = 0;
        for (double v : p.values()) sp += v;
        // stay away from the area-parity and radial min/max ties
        if (std::abs(sp - double(gt.count())) < 0.05) continue;
        const auto pp = polar_summary(p);
        const auto pg = polar_summary(gt);
        if (!pp || !pg) continue;
        if (std::abs(pp->d - pg->d) < 0.02) continue;
        break;
    }
    inst.inputs = {p};
    const double bm = rng.uniform(0.0, 0.5);
    inst.f = [gt, which, bm](DTape* t, const std::vector<DTensor>& in) -> DTensor {
        switch (which) {
            case 0: return soft_iou(t, in[0], gt);
            case 1: return dice_loss(t, in[0], gt);
            case 2: return loss_ms(t, in[0], gt);
            case 3: return loss_ml(t, in[0], gt);
            default: return sdm_core(t, in[0], gt, bm).total;
        }
    };
    return inst;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck(double tol, int instances, std::uint64_t seed,
                                         const std::vector<std::string>& only) {
    std::vector<std::pair<std::string, InstanceGen>> cases;
    auto reg = [&](const std::string& name, InstanceGen gen) { cases.push_back({name, gen}); };

    reg("add", [](Rng& r) { return binary_case(r, add<double>); });
    reg("sub", [](Rng& r) { return binary_case(r, sub<double>); });
    reg("mul", [](Rng& r) { return binary_case(r, mul<double>); });
    reg("divide", [](Rng& r) {
        auto inst = binary_case(r, divide<double>, 0.4, 1.4);
        return inst;
    });
    reg("minimum", [](Rng& r) { return binary_case(r, minimum<double>, -1.0, 1.0, 0.02); });
    reg("maximum", [](Rng& r) { return binary_case(r, maximum<double>, -1.0, 1.0, 0.02); });
    reg("arctan2", [](Rng& r) { return binary_case(r, arctan2<double>, 0.3, 1.3); });
    reg("silu", [](Rng& r) { return unary_case(r, silu<double>); });
    reg("sigmoid", [](Rng& r) { return unary_case(r, sigmoid<double>); });
    reg("relu", [](Rng& r) {
        auto inst = unary_case(r, relu<double>);
        for (auto& v : inst.inputs[0].values())  // keep clear of the kink
            if (std::abs(v) < 0.01) v = v < 0 ? v - 0.02 : v + 0.02;
        return inst;
    });
    reg("arctan", [](Rng& r) { return unary_case(r, arctan<double>); });
    reg("sqrt", [](Rng& r) { return unary_case(r, sqrt<double>, 0.2, 1.2); });
    reg("neg", [](Rng& r) { return unary_case(r, neg<double>); });
    reg("add_scalar", [](Rng& r) {
        Instance inst;
        const Shape4 s = rand_shape(r);
        inst.inputs = {rand_tensor(r, s)};
        const double c = r.uniform(-1, 1);
        auto proj = projection(r, s);
        inst.f = [c, proj](DTape* t, const std::vector<DTensor>& in) {
            return sum(t, mul(t, add_scalar(t, in[0], c), proj));
        };
        return inst;
    });
    reg("scale_by", [](Rng& r) {
        Instance inst;
        const Shape4 s = rand_shape(r);
        inst.inputs = {rand_tensor(r, s), rand_tensor(r, {1, 1, 1, 1})};
        auto proj = projection(r, s);
        inst.f = [proj](DTape* t, const std::vector<DTensor>& in) {
            return sum(t, mul(t, scale_by(t, in[0], in[1]), proj));
        };
        return inst;
    });
    reg("mul_scalar", [](Rng& r) {
        Instance inst;
        const Shape4 s = rand_shape(r);
        inst.inputs = {rand_tensor(r, s)};
        const double c = r.uniform(-2, 2);
        auto proj = projection(r, s);
        inst.f = [c, proj](DTape* t, const std::vector<DTensor>& in) {
            return sum(t, mul(t, mul_scalar(t, in[0], c), proj));
        };
        return inst;
    });
    reg("sum", [](Rng& r) {
        Instance inst;
        inst.inputs = {rand_tensor(r, rand_shape(r))};
        inst.f = [](DTape* t, const std::vector<DTensor>& in) { return sum(t, in[0]); };
        return inst;
    });
    reg("mean", [](Rng& r) {
        Instance inst;
        inst.inputs = {rand_tensor(r, rand_shape(r))};
        inst.f = [](DTape* t, const std::vector<DTensor>& in) { return mean(t, in[0]); };
        return inst;
    });
    reg("conv2d", conv_case);
    reg("batch_norm_train", [](Rng& r) { return batch_norm_case(r, true); });
    reg("batch_norm_eval", [](Rng& r) { return batch_norm_case(r, false); });
    reg("concat_channels", concat_case);
    reg("slice_channels", slice_channels_case);
    reg("slice_batch", slice_batch_case);
    reg("max_pool2", max_pool_case);
    reg("upsample_nearest2", upsample_case);
    reg("global_avg_pool", gap_case);

    reg("iou", [](Rng& r) { return box_loss_case(r, 0); });
    reg("loss_bs", [](Rng& r) { return box_loss_case(r, 1); });
    reg("loss_bl", [](Rng& r) { return box_loss_case(r, 2); });
    reg("giou_loss", [](Rng& r) { return box_loss_case(r, 3); });
    reg("diou_loss", [](Rng& r) { return box_loss_case(r, 4); });
    reg("ciou_loss", [](Rng& r) { return box_loss_case(r, 5); });
    reg("sdb_loss", [](Rng& r) { return box_loss_case(r, 6); });

    reg("soft_iou", [](Rng& r) { return mask_loss_case(r, 0); });
    reg("dice_loss", [](Rng& r) { return mask_loss_case(r, 1); });
    reg("loss_ms", [](Rng& r) { return mask_loss_case(r, 2); });
    reg("loss_ml", [](Rng& r) { return mask_loss_case(r, 3); });
    reg("sdm_loss", [](Rng& r) { return mask_loss_case(r, 4); });

    std::vector<GradCheckCase> results;
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const auto& [name, gen] = cases[ci];
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        Rng rng(seed, ci + 1);
        GradCheckCase res;
        res.name = name;
        for (int k = 0; k < instances; ++k) {
            auto inst = gen(rng);
            res.max_rel_err = std::max(res.max_rel_err, check_instance(inst));
        }
        res.pass = res.max_rel_err < tol;
        results.push_back(res);
    }
    return results;
}

bool all_passed(const std::vector<GradCheckCase>& results) {
    if (results.empty()) return false;
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

}  // namespace irst
