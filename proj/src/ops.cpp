#include "irst/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace irst {

namespace {

template <typename T>
bool want_grad(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw TensorError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
}

// Shared elementwise plumbing. `fwd` maps a value, `dleft`/`dright` give the
// local derivative as a function of the saved inputs.
template <typename T, typename F, typename D>
TensorT<T> unary_elementwise(TapeT<T>* tape, const TensorT<T>& x, const char* name, F fwd,
                             D dfdx) {
    auto out = TensorT<T>::zeros(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    check_finite(out, name);
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, dfdx]() mutable {
            auto g = oc.grad();
            auto xg = xc.grad();
            auto xv2 = xc.values();
            auto ov2 = oc.values();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * dfdx(xv2[i], ov2[i]);
        });
    }
    return out;
}

template <typename T, typename F, typename DA, typename DB>
TensorT<T> binary_elementwise(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b,
                              const char* name, F fwd, DA dfda, DB dfdb) {
    require_same_shape(a, b, name);
    auto out = TensorT<T>::zeros(a.shape());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    check_finite(out, name);
    if (want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        TensorT<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, dfda, dfdb]() mutable {
            auto g = oc.grad();
            auto av2 = ac.values();
            auto bv2 = bc.values();
            if (ac.requires_grad()) {
                auto ag = ac.grad();
                for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += g[i] * dfda(av2[i], bv2[i]);
            }
            if (bc.requires_grad()) {
                auto bg = bc.grad();
                for (std::size_t i = 0; i < bg.size(); ++i) bg[i] += g[i] * dfdb(av2[i], bv2[i]);
            }
        });
    }
    return out;
}

template <typename T>
T sigmoid_val(T v) {
    return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

std::string Shape4::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

void PadSpec::validate() const {
    if (left < 0 || right < 0 || top < 0 || bottom < 0)
        throw TensorError("negative padding");
}

void ConvSpec::validate() const {
    pad.validate();
    if (in_channels <= 0 || out_channels <= 0) throw TensorError("conv2d: channels must be positive");
    if (kernel_h < 1 || kernel_w < 1) throw TensorError("conv2d: kernel dims must be >= 1");
    if (stride < 1) throw TensorError("conv2d: stride must be >= 1");
    if (groups < 1) throw TensorError("conv2d: groups must be >= 1");
    if (in_channels % groups != 0 || out_channels % groups != 0)
        throw TensorError("conv2d: channels not divisible by groups");
}

std::pair<std::int64_t, std::int64_t> ConvSpec::out_hw(std::int64_t h, std::int64_t w) const {
    const std::int64_t oh = (h + pad.top + pad.bottom - kernel_h) / stride + 1;
    const std::int64_t ow = (w + pad.left + pad.right - kernel_w) / stride + 1;
    if (h + pad.top + pad.bottom < kernel_h || w + pad.left + pad.right < kernel_w || oh <= 0 ||
        ow <= 0)
        throw TensorError("conv2d: non-positive output size for input " + std::to_string(h) + "x" +
                          std::to_string(w));
    return {oh, ow};
}

template <typename T>
BatchNormState<T> BatchNormState<T>::identity(int channels) {
    BatchNormState<T> s;
    s.gamma = TensorT<T>::filled({1, channels, 1, 1}, T(1), true);
    s.beta = TensorT<T>::filled({1, channels, 1, 1}, T(0), true);
    s.running_mean.assign(channels, T(0));
    s.running_var.assign(channels, T(1));
    return s;
}

template <typename T>
void check_finite(const TensorT<T>& t, const char* where) {
    for (T v : t.values())
        if (!std::isfinite(v))
            throw TensorError(std::string(where) + " produced a non-finite value");
}

// ---- convolution ---------------------------------------------------------

namespace {

// Zero-padded copy of x, shape (n, c, h+top+bottom, w+left+right).
template <typename T>
std::vector<T> pad_input(const TensorT<T>& x, const PadSpec& p, std::int64_t& hp,
                         std::int64_t& wp) {
    const Shape4 s = x.shape();
    hp = s.h + p.top + p.bottom;
    wp = s.w + p.left + p.right;
    std::vector<T> xp(static_cast<std::size_t>(s.n * s.c * hp * wp), T(0));
    auto xv = x.values();
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t h = 0; h < s.h; ++h) {
                const T* src = xv.data() + ((n * s.c + c) * s.h + h) * s.w;
                T* dst = xp.data() + ((n * s.c + c) * hp + h + p.top) * wp + p.left;
                std::copy(src, src + s.w, dst);
            }
    return xp;
}

}  // namespace

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& weight,
                  const ConvSpec& spec, const TensorT<T>& bias) {
    spec.validate();
    const Shape4 xs = x.shape();
    if (xs.c != spec.in_channels)
        throw TensorError("conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                          std::to_string(spec.in_channels));
    const std::int64_t cpg = spec.in_channels / spec.groups;
    const std::int64_t opg = spec.out_channels / spec.groups;
    const Shape4 want_w = {spec.out_channels, cpg, spec.kernel_h, spec.kernel_w};
    if (!(weight.shape() == want_w))
        throw TensorError("conv2d: weight shape " + weight.shape().str() + ", expected " +
                          want_w.str());
    if (spec.bias) {
        if (!bias.defined() || !(bias.shape() == Shape4{1, spec.out_channels, 1, 1}))
            throw TensorError("conv2d: bias tensor of shape (1,c2,1,1) required");
    }

    const auto [oh, ow] = spec.out_hw(xs.h, xs.w);
    std::int64_t hp = 0, wp = 0;
    auto xp = std::make_shared<std::vector<T>>(pad_input(x, spec.pad, hp, wp));
    auto out = TensorT<T>::zeros({xs.n, spec.out_channels, oh, ow});

    const std::int64_t s = spec.stride;
    const std::int64_t kh = spec.kernel_h, kw = spec.kernel_w;
    auto wv = weight.values();
    auto ov = out.values();
    const T* xpd = xp->data();

    // Per output element the reduction runs (cig asc, kh asc, kw asc) so the
    // result is bit-reproducible against a plain sliding-window loop.
    for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t co = 0; co < spec.out_channels; ++co) {
            const std::int64_t g = co / opg;
            T* yplane = ov.data() + (n * spec.out_channels + co) * oh * ow;
            for (std::int64_t cig = 0; cig < cpg; ++cig) {
                const std::int64_t ci = g * cpg + cig;
                const T* xplane = xpd + (n * xs.c + ci) * hp * wp;
                for (std::int64_t fh = 0; fh < kh; ++fh)
                    for (std::int64_t fw = 0; fw < kw; ++fw) {
                        const T coef = wv[((co * cpg + cig) * kh + fh) * kw + fw];
                        for (std::int64_t r = 0; r < oh; ++r) {
                            const T* xrow = xplane + (r * s + fh) * wp + fw;
                            T* yrow = yplane + r * ow;
                            if (s == 1) {
                                for (std::int64_t q = 0; q < ow; ++q) yrow[q] += coef * xrow[q];
                            } else {
                                for (std::int64_t q = 0; q < ow; ++q) yrow[q] += coef * xrow[q * s];
                            }
                        }
                    }
            }
        }
    if (spec.bias) {
        auto bv = bias.values();
        for (std::int64_t n = 0; n < xs.n; ++n)
            for (std::int64_t co = 0; co < spec.out_channels; ++co) {
                T* yplane = ov.data() + (n * spec.out_channels + co) * oh * ow;
                for (std::int64_t i = 0; i < oh * ow; ++i) yplane[i] += bv[co];
            }
    }
    check_finite(out, "conv2d");

    if (want_grad(tape, {&x, &weight, &bias})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, wc = weight, bc = bias, oc = out;
        ConvSpec sp = spec;
        const std::int64_t hp2 = hp, wp2 = wp, oh2 = oh, ow2 = ow;
        tape->record([xc, wc, bc, oc, sp, xp, hp2, wp2, oh2, ow2]() mutable {
            const Shape4 xs2 = xc.shape();
            const std::int64_t cpg2 = sp.in_channels / sp.groups;
            const std::int64_t opg2 = sp.out_channels / sp.groups;
            const std::int64_t st = sp.stride;
            auto dy = oc.grad();
            auto wv2 = wc.values();
            const T* xpd2 = xp->data();

            if (wc.requires_grad()) {
                auto dw = wc.grad();
                for (std::int64_t co = 0; co < sp.out_channels; ++co) {
                    const std::int64_t g = co / opg2;
                    for (std::int64_t cig = 0; cig < cpg2; ++cig) {
                        const std::int64_t ci = g * cpg2 + cig;
                        for (std::int64_t fh = 0; fh < sp.kernel_h; ++fh)
                            for (std::int64_t fw = 0; fw < sp.kernel_w; ++fw) {
                                // four fixed lanes break the serial FP chain
                                // without losing determinism
                                T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
                                for (std::int64_t n = 0; n < xs2.n; ++n) {
                                    const T* xplane = xpd2 + (n * xs2.c + ci) * hp2 * wp2;
                                    const T* gplane =
                                        dy.data() + (n * sp.out_channels + co) * oh2 * ow2;
                                    for (std::int64_t r = 0; r < oh2; ++r) {
                                        const T* xrow = xplane + (r * st + fh) * wp2 + fw;
                                        const T* grow = gplane + r * ow2;
                                        std::int64_t q = 0;
                                        if (st == 1) {
                                            for (; q + 4 <= ow2; q += 4) {
                                                a0 += grow[q] * xrow[q];
                                                a1 += grow[q + 1] * xrow[q + 1];
                                                a2 += grow[q + 2] * xrow[q + 2];
                                                a3 += grow[q + 3] * xrow[q + 3];
                                            }
                                        }
                                        for (; q < ow2; ++q) a0 += grow[q] * xrow[q * st];
                                    }
                                }
                                dw[((co * cpg2 + cig) * sp.kernel_h + fh) * sp.kernel_w + fw] +=
                                    (a0 + a1) + (a2 + a3);
                            }
                    }
                }
            }
            if (sp.bias && bc.requires_grad()) {
                auto db = bc.grad();
                for (std::int64_t co = 0; co < sp.out_channels; ++co) {
                    T acc = T(0);
                    for (std::int64_t n = 0; n < xs2.n; ++n) {
                        const T* gplane = dy.data() + (n * sp.out_channels + co) * oh2 * ow2;
                        for (std::int64_t i = 0; i < oh2 * ow2; ++i) acc += gplane[i];
                    }
                    db[co] += acc;
                }
            }
            if (xc.requires_grad()) {
                auto dx = xc.grad();
                // Adjoint of pad-then-correlate: scatter output gradients
                // into a padded buffer with the forward's loop structure,
                // then crop. Asymmetric padding needs no special casing.
                std::vector<T> dxp(std::size_t(xs2.n * xs2.c * hp2 * wp2), T(0));
                for (std::int64_t n = 0; n < xs2.n; ++n)
                    for (std::int64_t co = 0; co < sp.out_channels; ++co) {
                        const std::int64_t g = co / opg2;
                        const T* gplane = dy.data() + (n * sp.out_channels + co) * oh2 * ow2;
                        for (std::int64_t cig = 0; cig < cpg2; ++cig) {
                            const std::int64_t ci = g * cpg2 + cig;
                            T* dplane = dxp.data() + (n * xs2.c + ci) * hp2 * wp2;
                            for (std::int64_t fh = 0; fh < sp.kernel_h; ++fh)
                                for (std::int64_t fw = 0; fw < sp.kernel_w; ++fw) {
                                    const T coef =
                                        wv2[((co * cpg2 + cig) * sp.kernel_h + fh) *
                                                sp.kernel_w +
                                            fw];
                                    for (std::int64_t r = 0; r < oh2; ++r) {
                                        T* drow = dplane + (r * st + fh) * wp2 + fw;
                                        const T* grow = gplane + r * ow2;
                                        if (st == 1) {
                                            for (std::int64_t q = 0; q < ow2; ++q)
                                                drow[q] += coef * grow[q];
                                        } else {
                                            for (std::int64_t q = 0; q < ow2; ++q)
                                                drow[q * st] += coef * grow[q];
                                        }
                                    }
                                }
                        }
                    }
                for (std::int64_t n = 0; n < xs2.n; ++n)
                    for (std::int64_t ci = 0; ci < xs2.c; ++ci)
                        for (std::int64_t ih = 0; ih < xs2.h; ++ih) {
                            const T* src = dxp.data() +
                                           ((n * xs2.c + ci) * hp2 + ih + sp.pad.top) * wp2 +
                                           sp.pad.left;
                            T* dst = dx.data() + ((n * xs2.c + ci) * xs2.h + ih) * xs2.w;
                            for (std::int64_t iw = 0; iw < xs2.w; ++iw) dst[iw] += src[iw];
                        }
            }
        });
    }
    return out;
}

// ---- batch normalization --------------------------------------------------

template <typename T>
TensorT<T> batch_norm(TapeT<T>* tape, const TensorT<T>& x, BatchNormState<T>& state,
                      bool training) {
    const Shape4 s = x.shape();
    const std::int64_t c = s.c;
    if (static_cast<std::int64_t>(state.running_mean.size()) != c ||
        static_cast<std::int64_t>(state.running_var.size()) != c ||
        state.gamma.numel() != c || state.beta.numel() != c)
        throw TensorError("batch_norm: state sized for different channel count");
    const std::int64_t m = s.n * s.h * s.w;
    if (m == 0) throw TensorError("batch_norm: empty spatial extent");

    std::vector<T> mean_c(c), invstd_c(c);
    auto xv = x.values();
    if (training) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::int64_t n = 0; n < s.n; ++n) {
                const T* p = xv.data() + (n * c + ch) * s.h * s.w;
                for (std::int64_t i = 0; i < s.h * s.w; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(m);
            double vacc = 0.0;
            for (std::int64_t n = 0; n < s.n; ++n) {
                const T* p = xv.data() + (n * c + ch) * s.h * s.w;
                for (std::int64_t i = 0; i < s.h * s.w; ++i) {
                    const double d = p[i] - mu;
                    vacc += d * d;
                }
            }
            const double var = vacc / static_cast<double>(m);
            mean_c[ch] = static_cast<T>(mu);
            invstd_c[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
            const double unbiased = m > 1 ? vacc / static_cast<double>(m - 1) : var;
            state.running_mean[ch] = static_cast<T>((1.0 - state.momentum) *
                                                        state.running_mean[ch] +
                                                    state.momentum * mu);
            state.running_var[ch] = static_cast<T>((1.0 - state.momentum) * state.running_var[ch] +
                                                   state.momentum * unbiased);
        }
    } else {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = state.running_mean[ch];
            invstd_c[ch] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) +
                                static_cast<double>(state.eps)));
        }
    }

    auto out = TensorT<T>::zeros(s);
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto ov = out.values();
    auto gv = state.gamma.values();
    auto bv = state.beta.values();
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t base = (n * c + ch) * s.h * s.w;
            for (std::int64_t i = 0; i < s.h * s.w; ++i) {
                const T xh = (xv[base + i] - mean_c[ch]) * invstd_c[ch];
                (*xhat)[base + i] = xh;
                ov[base + i] = gv[ch] * xh + bv[ch];
            }
        }
    check_finite(out, "batch_norm");

    if (want_grad(tape, {&x, &state.gamma, &state.beta})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, gc = state.gamma, bc = state.beta, oc = out;
        auto invstd = std::make_shared<std::vector<T>>(std::move(invstd_c));
        const bool train_mode = training;
        tape->record([xc, gc, bc, oc, xhat, invstd, train_mode]() mutable {
            const Shape4 s2 = xc.shape();
            const std::int64_t c2 = s2.c;
            const std::int64_t m2 = s2.n * s2.h * s2.w;
            auto dy = oc.grad();
            auto gv2 = gc.values();
            for (std::int64_t ch = 0; ch < c2; ++ch) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t n = 0; n < s2.n; ++n) {
                    const std::int64_t base = (n * c2 + ch) * s2.h * s2.w;
                    for (std::int64_t i = 0; i < s2.h * s2.w; ++i) {
                        sum_dy += dy[base + i];
                        sum_dy_xhat += static_cast<double>(dy[base + i]) * (*xhat)[base + i];
                    }
                }
                if (gc.requires_grad()) gc.grad()[ch] += static_cast<T>(sum_dy_xhat);
                if (bc.requires_grad()) bc.grad()[ch] += static_cast<T>(sum_dy);
                if (xc.requires_grad()) {
                    auto dx = xc.grad();
                    const T k = gv2[ch] * (*invstd)[ch];
                    const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m2));
                    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m2));
                    for (std::int64_t n = 0; n < s2.n; ++n) {
                        const std::int64_t base = (n * c2 + ch) * s2.h * s2.w;
                        for (std::int64_t i = 0; i < s2.h * s2.w; ++i) {
                            if (train_mode)
                                dx[base + i] += k * (dy[base + i] - mean_dy -
                                                     (*xhat)[base + i] * mean_dy_xhat);
                            else
                                dx[base + i] += k * dy[base + i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
TensorT<T> silu(TapeT<T>* tape, const TensorT<T>& x) {
    return unary_elementwise(
        tape, x, "silu", [](T v) { return v * sigmoid_val(v); },
        [](T v, T) {
            const T s = sigmoid_val(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x) {
    return unary_elementwise(
        tape, x, "sigmoid", [](T v) { return sigmoid_val(v); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
    return unary_elementwise(
        tape, x, "relu", [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> arctan(TapeT<T>* tape, const TensorT<T>& x) {
    return unary_elementwise(
        tape, x, "arctan", [](T v) { return std::atan(v); },
        [](T v, T) { return T(1) / (T(1) + v * v); });
}

template <typename T>
TensorT<T> arctan2(TapeT<T>* tape, const TensorT<T>& y, const TensorT<T>& x) {
    return binary_elementwise(
        tape, y, x, "arctan2", [](T a, T b) { return std::atan2(a, b); },
        [](T a, T b) { return b / (a * a + b * b); },
        [](T a, T b) { return -a / (a * a + b * b); });
}

template <typename T>
TensorT<T> sqrt(TapeT<T>* tape, const TensorT<T>& x) {
    return unary_elementwise(
        tape, x, "sqrt", [](T v) { return std::sqrt(v); },
        [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
TensorT<T> divide(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "divide", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <typename T>
TensorT<T> minimum(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "minimum", [](T x, T y) { return x <= y ? x : y; },
        [](T x, T y) { return x <= y ? T(1) : T(0); }, [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
TensorT<T> maximum(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
    return binary_elementwise(
        tape, a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
        [](T x, T y) { return x >= y ? T(1) : T(0); }, [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
TensorT<T> scale_by(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& s) {
    if (s.numel() != 1) throw TensorError("scale_by: scale must be a scalar tensor");
    const T sv = s.item();
    auto out = TensorT<T>::zeros(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * sv;
    check_finite(out, "scale_by");
    if (want_grad(tape, {&x, &s})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, sc = s, oc = out;
        tape->record([xc, sc, oc, sv]() mutable {
            auto g = oc.grad();
            if (xc.requires_grad()) {
                auto xg = xc.grad();
                for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g[i] * sv;
            }
            if (sc.requires_grad()) {
                auto xv2 = xc.values();
                T acc = T(0);
                for (std::size_t i = 0; i < xv2.size(); ++i) acc += g[i] * xv2[i];
                sc.grad()[0] += acc;
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> add_scalar(TapeT<T>* tape, const TensorT<T>& x, T s) {
    return unary_elementwise(
        tape, x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul_scalar(TapeT<T>* tape, const TensorT<T>& x, T s) {
    return unary_elementwise(
        tape, x, "mul_scalar", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
TensorT<T> neg(TapeT<T>* tape, const TensorT<T>& x) {
    return mul_scalar(tape, x, T(-1));
}

// ---- reductions -----------------------------------------------------------

template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x) {
    double acc = 0.0;
    for (T v : x.values()) acc += v;
    auto out = TensorT<T>::scalar(static_cast<T>(acc));
    check_finite(out, "sum");
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            const T g = oc.grad()[0];
            auto xg = xc.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean(TapeT<T>* tape, const TensorT<T>& x) {
    if (x.numel() == 0) throw TensorError("mean of empty tensor");
    double acc = 0.0;
    for (T v : x.values()) acc += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    auto out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(x.numel())));
    check_finite(out, "mean");
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, inv]() mutable {
            const T g = oc.grad()[0] * inv;
            auto xg = xc.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
        });
    }
    return out;
}

// ---- layout ops -----------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw TensorError("concat_channels: no inputs");
    const Shape4 s0 = xs[0].shape();
    std::int64_t ctot = 0;
    for (const auto& x : xs) {
        const Shape4 s = x.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw TensorError("concat_channels: spatial/batch mismatch " + s.str() + " vs " +
                              s0.str());
        ctot += s.c;
    }
    auto out = TensorT<T>::zeros({s0.n, ctot, s0.h, s0.w});
    auto ov = out.values();
    const std::int64_t plane = s0.h * s0.w;
    std::int64_t coff = 0;
    for (const auto& x : xs) {
        const std::int64_t cx = x.shape().c;
        auto xv = x.values();
        for (std::int64_t n = 0; n < s0.n; ++n)
            std::copy(xv.data() + n * cx * plane, xv.data() + (n + 1) * cx * plane,
                      ov.data() + (n * ctot + coff) * plane);
        coff += cx;
    }

    bool any = false;
    for (const auto& x : xs) any = any || x.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        std::vector<TensorT<T>> inputs = xs;
        TensorT<T> oc = out;
        tape->record([inputs, oc, ctot, plane]() mutable {
            auto g = oc.grad();
            const Shape4 s = oc.shape();
            std::int64_t coff2 = 0;
            for (auto& x : inputs) {
                const std::int64_t cx = x.shape().c;
                if (x.requires_grad()) {
                    auto xg = x.grad();
                    for (std::int64_t n = 0; n < s.n; ++n) {
                        const T* src = g.data() + (n * ctot + coff2) * plane;
                        T* dst = xg.data() + n * cx * plane;
                        for (std::int64_t i = 0; i < cx * plane; ++i) dst[i] += src[i];
                    }
                }
                coff2 += cx;
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice_channels(TapeT<T>* tape, const TensorT<T>& x, std::int64_t c0,
                          std::int64_t count) {
    const Shape4 s = x.shape();
    if (c0 < 0 || count <= 0 || c0 + count > s.c)
        throw TensorError("slice_channels: range [" + std::to_string(c0) + "," +
                          std::to_string(c0 + count) + ") outside " + s.str());
    auto out = TensorT<T>::zeros({s.n, count, s.h, s.w});
    auto ov = out.values();
    auto xv = x.values();
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n)
        std::copy(xv.data() + (n * s.c + c0) * plane, xv.data() + (n * s.c + c0 + count) * plane,
                  ov.data() + n * count * plane);
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, c0, count, plane]() mutable {
            auto g = oc.grad();
            auto xg = xc.grad();
            const Shape4 s2 = xc.shape();
            for (std::int64_t n = 0; n < s2.n; ++n) {
                const T* src = g.data() + n * count * plane;
                T* dst = xg.data() + (n * s2.c + c0) * plane;
                for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice_batch(TapeT<T>* tape, const TensorT<T>& x, std::int64_t i) {
    const Shape4 s = x.shape();
    if (i < 0 || i >= s.n) throw TensorError("slice_batch: index out of range");
    const std::int64_t sz = s.c * s.h * s.w;
    auto out = TensorT<T>::zeros({1, s.c, s.h, s.w});
    std::copy(x.values().data() + i * sz, x.values().data() + (i + 1) * sz, out.values().data());
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, i, sz]() mutable {
            auto g = oc.grad();
            T* dst = xc.grad().data() + i * sz;
            for (std::int64_t k = 0; k < sz; ++k) dst[k] += g[k];
        });
    }
    return out;
}

template <typename T>
TensorT<T> max_pool2(TapeT<T>* tape, const TensorT<T>& x) {
    const Shape4 s = x.shape();
    const std::int64_t oh = s.h / 2, ow = s.w / 2;
    if (oh == 0 || ow == 0) throw TensorError("max_pool2: input too small");
    auto out = TensorT<T>::zeros({s.n, s.c, oh, ow});
    auto idx = std::make_shared<std::vector<std::int64_t>>(out.numel());
    auto ov = out.values();
    auto xv = x.values();
    std::int64_t o = 0;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            const std::int64_t base = (n * s.c + c) * s.h * s.w;
            for (std::int64_t r = 0; r < oh; ++r)
                for (std::int64_t q = 0; q < ow; ++q, ++o) {
                    // first maximum in scan order wins on ties
                    std::int64_t best = base + (2 * r) * s.w + 2 * q;
                    T bv = xv[best];
                    for (int dr = 0; dr < 2; ++dr)
                        for (int dq = 0; dq < 2; ++dq) {
                            const std::int64_t j = base + (2 * r + dr) * s.w + 2 * q + dq;
                            if (xv[j] > bv) {
                                bv = xv[j];
                                best = j;
                            }
                        }
                    ov[o] = bv;
                    (*idx)[o] = best;
                }
        }
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, idx]() mutable {
            auto g = oc.grad();
            auto xg = xc.grad();
            for (std::size_t k = 0; k < g.size(); ++k) xg[(*idx)[k]] += g[k];
        });
    }
    return out;
}

template <typename T>
TensorT<T> upsample_nearest2(TapeT<T>* tape, const TensorT<T>& x) {
    const Shape4 s = x.shape();
    auto out = TensorT<T>::zeros({s.n, s.c, s.h * 2, s.w * 2});
    auto ov = out.values();
    auto xv = x.values();
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            const std::int64_t ib = (n * s.c + c) * s.h * s.w;
            const std::int64_t ob = (n * s.c + c) * s.h * s.w * 4;
            for (std::int64_t r = 0; r < s.h; ++r)
                for (std::int64_t q = 0; q < s.w; ++q) {
                    const T v = xv[ib + r * s.w + q];
                    const std::int64_t o00 = ob + (2 * r) * (2 * s.w) + 2 * q;
                    ov[o00] = v;
                    ov[o00 + 1] = v;
                    ov[o00 + 2 * s.w] = v;
                    ov[o00 + 2 * s.w + 1] = v;
                }
        }
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            const Shape4 s2 = xc.shape();
            auto g = oc.grad();
            auto xg = xc.grad();
            for (std::int64_t n = 0; n < s2.n; ++n)
                for (std::int64_t c = 0; c < s2.c; ++c) {
                    const std::int64_t ib = (n * s2.c + c) * s2.h * s2.w;
                    const std::int64_t ob = ib * 4;
                    for (std::int64_t r = 0; r < s2.h; ++r)
                        for (std::int64_t q = 0; q < s2.w; ++q) {
                            const std::int64_t o00 = ob + (2 * r) * (2 * s2.w) + 2 * q;
                            xg[ib + r * s2.w + q] += g[o00] + g[o00 + 1] + g[o00 + 2 * s2.w] +
                                                     g[o00 + 2 * s2.w + 1];
                        }
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& x) {
    const Shape4 s = x.shape();
    const std::int64_t plane = s.h * s.w;
    if (plane == 0) throw TensorError("global_avg_pool: empty spatial extent");
    auto out = TensorT<T>::zeros({s.n, s.c, 1, 1});
    auto ov = out.values();
    auto xv = x.values();
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            double acc = 0.0;
            const T* p = xv.data() + (n * s.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            ov[n * s.c + c] = static_cast<T>(acc / static_cast<double>(plane));
        }
    if (want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        TensorT<T> xc = x, oc = out;
        tape->record([xc, oc, plane]() mutable {
            const Shape4 s2 = xc.shape();
            auto g = oc.grad();
            auto xg = xc.grad();
            const T inv = T(1) / static_cast<T>(plane);
            for (std::int64_t n = 0; n < s2.n; ++n)
                for (std::int64_t c = 0; c < s2.c; ++c) {
                    const T gv = g[n * s2.c + c] * inv;
                    T* p = xg.data() + (n * s2.c + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
                }
        });
    }
    return out;
}

// ---- explicit instantiations ----------------------------------------------

#define IRST_INSTANTIATE_OPS(T)                                                                  \
    template struct BatchNormState<T>;                                                           \
    template void check_finite<T>(const TensorT<T>&, const char*);                               \
    template TensorT<T> conv2d<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&,               \
                                  const ConvSpec&, const TensorT<T>&);                           \
    template TensorT<T> batch_norm<T>(TapeT<T>*, const TensorT<T>&, BatchNormState<T>&, bool);   \
    template TensorT<T> silu<T>(TapeT<T>*, const TensorT<T>&);                                   \
    template TensorT<T> sigmoid<T>(TapeT<T>*, const TensorT<T>&);                                \
    template TensorT<T> relu<T>(TapeT<T>*, const TensorT<T>&);                                   \
    template TensorT<T> arctan<T>(TapeT<T>*, const TensorT<T>&);                                 \
    template TensorT<T> arctan2<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);             \
    template TensorT<T> sqrt<T>(TapeT<T>*, const TensorT<T>&);                                   \
    template TensorT<T> add<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
    template TensorT<T> sub<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
    template TensorT<T> mul<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
    template TensorT<T> divide<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);              \
    template TensorT<T> minimum<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);             \
    template TensorT<T> maximum<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);             \
    template TensorT<T> scale_by<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);            \
    template TensorT<T> add_scalar<T>(TapeT<T>*, const TensorT<T>&, T);                          \
    template TensorT<T> mul_scalar<T>(TapeT<T>*, const TensorT<T>&, T);                          \
    template TensorT<T> neg<T>(TapeT<T>*, const TensorT<T>&);                                    \
    template TensorT<T> sum<T>(TapeT<T>*, const TensorT<T>&);                                    \
    template TensorT<T> mean<T>(TapeT<T>*, const TensorT<T>&);                                   \
    template TensorT<T> concat_channels<T>(TapeT<T>*, const std::vector<TensorT<T>>&);           \
    template TensorT<T> slice_channels<T>(TapeT<T>*, const TensorT<T>&, std::int64_t,            \
                                          std::int64_t);                                         \
    template TensorT<T> slice_batch<T>(TapeT<T>*, const TensorT<T>&, std::int64_t);              \
    template TensorT<T> max_pool2<T>(TapeT<T>*, const TensorT<T>&);                              \
    template TensorT<T> upsample_nearest2<T>(TapeT<T>*, const TensorT<T>&);                      \
    template TensorT<T> global_avg_pool<T>(TapeT<T>*, const TensorT<T>&);

IRST_INSTANTIATE_OPS(float)
IRST_INSTANTIATE_OPS(double)

}  // namespace irst
