#include "irst/nets.hpp"

#include "irst/ops.hpp"

namespace irst {

std::string to_string(StemKind k) { return k == StemKind::conv ? "conv" : "pconv"; }

StemKind stem_kind_from(const std::string& s) {
    if (s == "conv") return StemKind::conv;
    if (s == "pconv") return StemKind::pconv;
    throw std::runtime_error("unknown stem kind: " + s);
}

template <typename T>
Stem<T> Stem<T>::make(StemKind kind, int c1, int c2, int stride, int k, Rng& rng) {
    Stem<T> s;
    s.kind = kind;
    s.k = k;
    if (kind == StemKind::conv) {
        s.conv = ConvBlock<T>::make(c1, c2, stride, rng);
    } else {
        PConvSpec ps{c1, c2, k, stride};
        s.pconv = PConvLayer<T>::make(ps, rng);
    }
    return s;
}

template <typename T>
TensorT<T> Stem<T>::forward(TapeT<T>* tape, const TensorT<T>& x, bool training) {
    return kind == StemKind::conv ? conv.forward(tape, x, training)
                                  : pconv.forward(tape, x, training);
}

template <typename T>
void Stem<T>::collect_params(std::vector<TensorT<T>>& out) const {
    if (kind == StemKind::conv)
        conv.collect_params(out);
    else
        pconv.collect_params(out);
}

template <typename T>
void Stem<T>::collect_bn(std::vector<BatchNormState<T>*>& out) {
    if (kind == StemKind::conv)
        conv.collect_bn(out);
    else
        pconv.collect_bn(out);
}

template <typename T>
std::int64_t Stem<T>::conv_weight_count() const {
    return kind == StemKind::conv ? conv.conv_weight_count() : pconv.conv_weight_count();
}

namespace {

int k_at(const std::vector<int>& ks, std::size_t i) {
    if (ks.empty()) return 3;
    return i < ks.size() ? ks[i] : ks.back();
}

template <typename T>
void assert_halved(const TensorT<T>& y, const Shape4& in, int c_want, const char* where) {
    const Shape4 s = y.shape();
    if (s.c != c_want || s.h != in.h / 2 || s.w != in.w / 2)
        throw TensorError(std::string(where) + ": stem output " + s.str() +
                          " does not halve input " + in.str());
}

}  // namespace

template <typename T>
SegNetT<T> SegNetT<T>::make(StemKind kind, const std::vector<int>& ks, int base_c,
                            std::uint64_t seed) {
    SegNetT net;
    net.base_c = base_c;
    Rng rng(seed, 0xbeef);
    net.stem1 = Stem<T>::make(kind, 1, base_c, 2, k_at(ks, 0), rng);
    net.stem2 = Stem<T>::make(kind, base_c, 2 * base_c, 2, k_at(ks, 1), rng);
    net.enc1 = ConvBlock<T>::make(2 * base_c, 2 * base_c, 1, rng);
    net.enc2 = ConvBlock<T>::make(2 * base_c, 2 * base_c, 1, rng);
    net.dec1 = ConvBlock<T>::make(3 * base_c, base_c, 1, rng);
    net.dec2 = ConvBlock<T>::make(base_c, base_c, 1, rng);
    ConvSpec hs;
    hs.in_channels = base_c;
    hs.out_channels = 1;
    hs.kernel_h = hs.kernel_w = 1;
    hs.bias = true;
    net.head = Conv2dLayer<T>::make(hs, rng);
    return net;
}

template <typename T>
void SegNetT<T>::set_stem(StemKind kind, const std::vector<int>& ks, std::uint64_t seed) {
    Rng rng(seed, 0xbeef);
    stem1 = Stem<T>::make(kind, 1, base_c, 2, k_at(ks, 0), rng);
    stem2 = Stem<T>::make(kind, base_c, 2 * base_c, 2, k_at(ks, 1), rng);
}

template <typename T>
TensorT<T> SegNetT<T>::forward(TapeT<T>* tape, const TensorT<T>& x) {
    const Shape4 in = x.shape();
    auto s1 = stem1.forward(tape, x, training);
    assert_halved(s1, in, base_c, "segnet stem1");
    auto s2 = stem2.forward(tape, s1, training);
    assert_halved(s2, s1.shape(), 2 * base_c, "segnet stem2");
    auto e = enc1.forward(tape, s2, training);
    e = enc2.forward(tape, e, training);
    auto u1 = upsample_nearest2(tape, e);
    auto d1 = dec1.forward(tape, concat_channels(tape, {u1, s1}), training);
    auto u2 = upsample_nearest2(tape, d1);
    auto d2 = dec2.forward(tape, u2, training);
    auto out = sigmoid(tape, head.forward(tape, d2));
    if (!(out.shape() == Shape4{in.n, 1, in.h, in.w}))
        throw TensorError("segnet: output shape " + out.shape().str() + " for input " + in.str());
    return out;
}

template <typename T>
std::vector<TensorT<T>> SegNetT<T>::params() const {
    std::vector<TensorT<T>> p;
    stem1.collect_params(p);
    stem2.collect_params(p);
    enc1.collect_params(p);
    enc2.collect_params(p);
    dec1.collect_params(p);
    dec2.collect_params(p);
    head.collect_params(p);
    return p;
}

template <typename T>
std::vector<BatchNormState<T>*> SegNetT<T>::bn_states() {
    std::vector<BatchNormState<T>*> v;
    stem1.collect_bn(v);
    stem2.collect_bn(v);
    enc1.collect_bn(v);
    enc2.collect_bn(v);
    dec1.collect_bn(v);
    dec2.collect_bn(v);
    return v;
}

template <typename T>
std::int64_t SegNetT<T>::stem_weight_count() const {
    return stem1.conv_weight_count() + stem2.conv_weight_count();
}

template <typename T>
BoxNetT<T> BoxNetT<T>::make(StemKind kind, const std::vector<int>& ks, int base_c,
                            std::uint64_t seed) {
    BoxNetT net;
    net.base_c = base_c;
    Rng rng(seed, 0xf00d);
    // image plus two coordinate channels; plain features pooled globally
    // cannot encode position
    net.stem1 = Stem<T>::make(kind, 3, base_c, 2, k_at(ks, 0), rng);
    net.stem2 = Stem<T>::make(kind, base_c, 2 * base_c, 2, k_at(ks, 1), rng);
    net.body1 = ConvBlock<T>::make(2 * base_c, 2 * base_c, 1, rng);
    net.body2 = ConvBlock<T>::make(2 * base_c, 2 * base_c, 1, rng);
    net.body3 = ConvBlock<T>::make(2 * base_c, 2 * base_c, 1, rng);
    ConvSpec hs;
    hs.in_channels = 2 * base_c;
    hs.out_channels = 3;
    hs.kernel_h = hs.kernel_w = 1;
    hs.bias = true;
    net.head = Conv2dLayer<T>::make(hs, rng);
    // size prior near the small-target regime; sizes are capped at half the
    // image so the location term cannot reward runaway box inflation
    net.head.bias.values()[1] = T(-1.2);
    net.head.bias.values()[2] = T(-1.2);
    return net;
}

template <typename T>
void BoxNetT<T>::set_stem(StemKind kind, const std::vector<int>& ks, std::uint64_t seed) {
    Rng rng(seed, 0xf00d);
    stem1 = Stem<T>::make(kind, 3, base_c, 2, k_at(ks, 0), rng);
    stem2 = Stem<T>::make(kind, base_c, 2 * base_c, 2, k_at(ks, 1), rng);
}

namespace {

// normalized (x, y) grids appended to the input image
template <typename T>
TensorT<T> coord_channels(const Shape4& s) {
    auto out = TensorT<T>::zeros({s.n, 2, s.h, s.w});
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t r = 0; r < s.h; ++r)
            for (std::int64_t q = 0; q < s.w; ++q) {
                out.at(n, 0, r, q) = static_cast<T>(double(q) / double(s.w - 1));
                out.at(n, 1, r, q) = static_cast<T>(double(r) / double(s.h - 1));
            }
    return out;
}

}  // namespace

template <typename T>
TensorT<T> BoxNetT<T>::forward(TapeT<T>* tape, const TensorT<T>& x) {
    const Shape4 in = x.shape();
    auto xc = concat_channels(tape, {x, coord_channels<T>(in)});
    auto s1 = stem1.forward(tape, xc, training);
    assert_halved(s1, in, base_c, "boxnet stem1");
    auto s2 = stem2.forward(tape, s1, training);
    assert_halved(s2, s1.shape(), 2 * base_c, "boxnet stem2");
    auto b = body1.forward(tape, s2, training);
    b = body2.forward(tape, b, training);
    b = body3.forward(tape, b, training);
    return head.forward(tape, b);
}

template <typename T>
BoxVar<T> BoxNetT<T>::box_for(TapeT<T>* tape, const TensorT<T>& head_out, std::int64_t i,
                              int img_w, int img_h) const {
    auto one = slice_batch(tape, head_out, i);
    const Shape4 s = one.shape();
    const double cell_w = double(img_w) / double(s.w);
    const double cell_h = double(img_h) / double(s.h);

    // attention weights over the cells
    auto att = sigmoid(tape, slice_channels(tape, one, 0, 1));
    auto inv_norm = divide(tape, TensorT<T>::scalar(T(1)),
                           add_scalar(tape, sum(tape, att), T(1e-6)));
    auto weights = scale_by(tape, att, inv_norm);

    // cell-centre coordinate grids in image pixels
    auto xg = TensorT<T>::zeros({1, 1, s.h, s.w});
    auto yg = TensorT<T>::zeros({1, 1, s.h, s.w});
    for (std::int64_t r = 0; r < s.h; ++r)
        for (std::int64_t q = 0; q < s.w; ++q) {
            xg.at(0, 0, r, q) = static_cast<T>((double(q) + 0.5) * cell_w);
            yg.at(0, 0, r, q) = static_cast<T>((double(r) + 0.5) * cell_h);
        }
    auto cx = sum(tape, mul(tape, weights, xg));
    auto cy = sum(tape, mul(tape, weights, yg));

    // sizes read at the attended cells, bounded to half the image
    auto wl = sum(tape, mul(tape, weights, slice_channels(tape, one, 1, 1)));
    auto hl = sum(tape, mul(tape, weights, slice_channels(tape, one, 2, 1)));
    auto half_w = mul_scalar(tape, sigmoid(tape, wl), static_cast<T>(img_w * 0.25));
    auto half_h = mul_scalar(tape, sigmoid(tape, hl), static_cast<T>(img_h * 0.25));

    BoxVar<T> box;
    box.x1 = sub(tape, cx, half_w);
    box.y1 = sub(tape, cy, half_h);
    box.x2 = add(tape, cx, half_w);
    box.y2 = add(tape, cy, half_h);
    return box;
}

template <typename T>
std::vector<TensorT<T>> BoxNetT<T>::params() const {
    std::vector<TensorT<T>> p;
    stem1.collect_params(p);
    stem2.collect_params(p);
    body1.collect_params(p);
    body2.collect_params(p);
    body3.collect_params(p);
    head.collect_params(p);
    return p;
}

template <typename T>
std::vector<BatchNormState<T>*> BoxNetT<T>::bn_states() {
    std::vector<BatchNormState<T>*> v;
    stem1.collect_bn(v);
    stem2.collect_bn(v);
    body1.collect_bn(v);
    body2.collect_bn(v);
    body3.collect_bn(v);
    return v;
}

template <typename T>
std::int64_t BoxNetT<T>::stem_weight_count() const {
    return stem1.conv_weight_count() + stem2.conv_weight_count();
}

template struct Stem<float>;
template struct Stem<double>;
template struct SegNetT<float>;
template struct SegNetT<double>;
template struct BoxNetT<float>;
template struct BoxNetT<double>;

}  // namespace irst
