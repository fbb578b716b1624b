#include "irst/pconv.hpp"

#include <cmath>
#include <map>

namespace irst {

void PConvSpec::validate() const {
    if (c1 <= 0 || c2 <= 0) throw TensorError("pconv: channels must be positive");
    if (c2 % 4 != 0) throw TensorError("pconv: c2 must be divisible by 4");
    if (k < 2) throw TensorError("pconv: fan-leaf length k must be >= 2");
    if (s < 1) throw TensorError("pconv: stride must be >= 1");
}

std::array<BranchSpec, 4> pconv_branches(int k) {
    // Pads are (left, right, top, bottom); the k-long kernel axis carries
    // the pad-k side, the orthogonal axis gets pad 1 on one side.
    std::array<BranchSpec, 4> b;
    b[0] = {true, {1, 0, 0, k}};   // vertical, reaches downward
    b[1] = {false, {0, k, 0, 1}};  // horizontal, reaches rightward
    b[2] = {true, {0, 1, k, 0}};   // vertical, reaches upward
    b[3] = {false, {k, 0, 1, 0}};  // horizontal, reaches leftward
    return b;
}

std::int64_t conv_block_param_count(int c1, int c2) {
    return std::int64_t(9) * c1 * c2;
}

std::int64_t pconv_param_count(const PConvSpec& spec) {
    spec.validate();
    const std::int64_t branch = std::int64_t(4) * (spec.c2 / 4) * spec.c1 * spec.k;
    const std::int64_t fusion = std::int64_t(4) * spec.c2 * spec.c2;
    return branch + fusion;
}

std::int64_t pconv_param_count_formula(const PConvSpec& spec) {
    return std::int64_t(spec.c2) * spec.c1 * spec.k + std::int64_t(4) * spec.c2 * spec.c1;
}

namespace {

LayerStats stats_from_grid(const std::map<std::pair<int, int>, int>& mult,
                           std::int64_t params) {
    LayerStats st;
    st.param_count = params;
    if (mult.empty()) return st;
    int rmin = 1 << 30, rmax = -(1 << 30), cmin = 1 << 30, cmax = -(1 << 30);
    for (const auto& [rc, m] : mult) {
        (void)m;
        rmin = std::min(rmin, rc.first);
        rmax = std::max(rmax, rc.first);
        cmin = std::min(cmin, rc.second);
        cmax = std::max(cmax, rc.second);
    }
    st.extent_h = rmax - rmin + 1;
    st.extent_w = cmax - cmin + 1;
    st.influence.assign(st.extent_h, std::vector<int>(st.extent_w, 0));
    for (const auto& [rc, m] : mult) {
        st.influence[rc.first - rmin][rc.second - cmin] = m;
        ++st.receptive_field_cells;
    }
    return st;
}

}  // namespace

LayerStats receptive_field_conv_block(int c1, int c2, int s) {
    (void)s;  // a single conv's footprint does not depend on stride
    std::map<std::pair<int, int>, int> mult;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) mult[{r, c}] = 1;
    return stats_from_grid(mult, conv_block_param_count(c1, c2));
}

LayerStats receptive_field_pconv(const PConvSpec& spec) {
    spec.validate();
    const auto branches = pconv_branches(spec.k);
    std::map<std::pair<int, int>, int> mult;
    // One fusion output cell pulls the 2x2 window of first-layer cells
    // (u, v) in {0,1}^2; each of those maps through every branch tap back
    // to input coordinates. Counts are per (branch, fusion tap, kernel tap)
    // path on an unclipped grid.
    for (int u = 0; u < 2; ++u)
        for (int v = 0; v < 2; ++v)
            for (const auto& br : branches) {
                const int kh = br.kernel_h(spec.k), kw = br.kernel_w(spec.k);
                for (int fh = 0; fh < kh; ++fh)
                    for (int fw = 0; fw < kw; ++fw) {
                        const int r = u * spec.s - br.pad.top + fh;
                        const int c = v * spec.s - br.pad.left + fw;
                        ++mult[{r, c}];
                    }
            }
    return stats_from_grid(mult, pconv_param_count(spec));
}

// ---- layers ----------------------------------------------------------------

namespace {

template <typename T>
TensorT<T> kaiming_uniform(const Shape4& shape, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> data(static_cast<std::size_t>(shape.numel()));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return TensorT<T>::from(shape, std::move(data), true);
}

}  // namespace

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::make(const ConvSpec& spec, Rng& rng) {
    spec.validate();
    Conv2dLayer<T> l;
    l.spec = spec;
    const std::int64_t cpg = spec.in_channels / spec.groups;
    const std::int64_t fan_in = cpg * spec.kernel_h * spec.kernel_w;
    l.weight = kaiming_uniform<T>({spec.out_channels, cpg, spec.kernel_h, spec.kernel_w}, fan_in,
                                  rng);
    if (spec.bias) l.bias = TensorT<T>::zeros({1, spec.out_channels, 1, 1}, true);
    return l;
}

template <typename T>
TensorT<T> Conv2dLayer<T>::forward(TapeT<T>* tape, const TensorT<T>& x) const {
    return conv2d(tape, x, weight, spec, bias);
}

template <typename T>
void Conv2dLayer<T>::collect_params(std::vector<TensorT<T>>& out) const {
    out.push_back(weight);
    if (spec.bias) out.push_back(bias);
}

template <typename T>
ConvBlock<T> ConvBlock<T>::make(int c1, int c2, int s, Rng& rng) {
    ConvBlock<T> b;
    ConvSpec cs;
    cs.in_channels = c1;
    cs.out_channels = c2;
    cs.kernel_h = cs.kernel_w = 3;
    cs.stride = s;
    cs.pad = {1, 1, 1, 1};
    b.conv = Conv2dLayer<T>::make(cs, rng);
    b.bn = BatchNormState<T>::identity(c2);
    return b;
}

template <typename T>
TensorT<T> ConvBlock<T>::forward(TapeT<T>* tape, const TensorT<T>& x, bool training) {
    if (x.shape().h % conv.spec.stride != 0 || x.shape().w % conv.spec.stride != 0)
        throw TensorError("conv block: input dims not divisible by stride");
    auto y = conv.forward(tape, x);
    y = batch_norm(tape, y, bn, training);
    return silu(tape, y);
}

template <typename T>
void ConvBlock<T>::collect_params(std::vector<TensorT<T>>& out) const {
    conv.collect_params(out);
    out.push_back(bn.gamma);
    out.push_back(bn.beta);
}

template <typename T>
PConvLayer<T> PConvLayer<T>::make(const PConvSpec& spec, Rng& rng) {
    spec.validate();
    PConvLayer<T> l;
    l.spec = spec;
    const int cp = spec.c2 / 4;
    const auto geo = pconv_branches(spec.k);
    for (int i = 0; i < 4; ++i) {
        ConvSpec cs;
        cs.in_channels = spec.c1;
        cs.out_channels = cp;
        cs.kernel_h = geo[i].kernel_h(spec.k);
        cs.kernel_w = geo[i].kernel_w(spec.k);
        cs.stride = spec.s;
        cs.pad = geo[i].pad;
        l.branches[i] = Conv2dLayer<T>::make(cs, rng);
        l.branch_bn[i] = BatchNormState<T>::identity(cp);
    }
    ConvSpec fs;
    fs.in_channels = spec.c2;
    fs.out_channels = spec.c2;
    fs.kernel_h = fs.kernel_w = 2;
    fs.stride = 1;
    l.fusion = Conv2dLayer<T>::make(fs, rng);
    l.fusion_bn = BatchNormState<T>::identity(spec.c2);
    return l;
}

template <typename T>
TensorT<T> PConvLayer<T>::concat_branches(TapeT<T>* tape, const TensorT<T>& x, bool training) {
    if (x.shape().c != spec.c1)
        throw TensorError("pconv: input has wrong channel count");
    if (x.shape().h % spec.s != 0 || x.shape().w % spec.s != 0)
        throw TensorError("pconv: input dims not divisible by stride");
    std::vector<TensorT<T>> outs;
    outs.reserve(4);
    for (int i = 0; i < 4; ++i) {
        auto y = branches[i].forward(tape, x);
        y = batch_norm(tape, y, branch_bn[i], training);
        outs.push_back(silu(tape, y));
    }
    return concat_channels(tape, outs);
}

template <typename T>
TensorT<T> PConvLayer<T>::forward(TapeT<T>* tape, const TensorT<T>& x, bool training) {
    auto cat = concat_branches(tape, x, training);
    auto y = fusion.forward(tape, cat);
    y = batch_norm(tape, y, fusion_bn, training);
    return silu(tape, y);
}

template <typename T>
void PConvLayer<T>::collect_params(std::vector<TensorT<T>>& out) const {
    for (int i = 0; i < 4; ++i) {
        branches[i].collect_params(out);
        out.push_back(branch_bn[i].gamma);
        out.push_back(branch_bn[i].beta);
    }
    fusion.collect_params(out);
    out.push_back(fusion_bn.gamma);
    out.push_back(fusion_bn.beta);
}

template <typename T>
std::int64_t PConvLayer<T>::conv_weight_count() const {
    std::int64_t total = fusion.weight_count();
    for (const auto& b : branches) total += b.weight_count();
    return total;
}

template struct Conv2dLayer<float>;
template struct Conv2dLayer<double>;
template struct ConvBlock<float>;
template struct ConvBlock<double>;
template struct PConvLayer<float>;
template struct PConvLayer<double>;

}  // namespace irst
