#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "irst/ops.hpp"
#include "irst/rng.hpp"
#include "irst/tensor.hpp"

namespace irst {

/// Configuration of one pinwheel convolution layer. The four branches each
/// emit c2/4 channels, so c2 must be divisible by 4; k is the fan-leaf
/// length (long-axis kernel extent and matching one-side pad).
struct PConvSpec {
    int c1 = 0;
    int c2 = 0;
    int k = 3;
    int s = 1;

    void validate() const;
};

/// Geometry of one pinwheel branch: a k-long kernel (vertical k x 1 or
/// horizontal 1 x k) padded by k along its long axis and 1 on one
/// orthogonal side, which keeps the first-layer output at (h/s+1, w/s+1).
struct BranchSpec {
    bool vertical = true;
    PadSpec pad;

    int kernel_h(int k) const { return vertical ? k : 1; }
    int kernel_w(int k) const { return vertical ? 1 : k; }
};

/// The four branches in concatenation order.
std::array<BranchSpec, 4> pconv_branches(int k);

/// Parameter numbers and receptive-field structure of a layer.
struct LayerStats {
    std::int64_t param_count = 0;           // exact conv-weight element count
    std::int64_t receptive_field_cells = 0; // input cells with nonzero influence
    int extent_h = 0, extent_w = 0;         // bounding box of the influence pattern
    std::vector<std::vector<int>> influence; // per-cell path multiplicities
};

/// Exact conv-weight counts (BN affine parameters excluded).
std::int64_t conv_block_param_count(int c1, int c2);
std::int64_t pconv_param_count(const PConvSpec& spec);
/// The published closed form, which prices the fusion at 4*c2*c1; exact
/// only when c1 == c2 (the as-built fusion holds 4*c2*c2 weights).
std::int64_t pconv_param_count_formula(const PConvSpec& spec);

/// Receptive field by dependency propagation from one interior output cell.
LayerStats receptive_field_conv_block(int c1, int c2, int s = 1);
LayerStats receptive_field_pconv(const PConvSpec& spec);

/// One plain convolution with trainable weight (and optional bias).
template <typename T>
struct Conv2dLayer {
    ConvSpec spec;
    TensorT<T> weight;
    TensorT<T> bias;

    static Conv2dLayer make(const ConvSpec& spec, Rng& rng);
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x) const;
    void collect_params(std::vector<TensorT<T>>& out) const;
    std::int64_t weight_count() const { return weight.numel(); }
};

/// Standard block the paper swaps against: 3x3 conv, symmetric pad 1,
/// stride s, then BN and SiLU.
template <typename T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNormState<T> bn;

    static ConvBlock make(int c1, int c2, int s, Rng& rng);
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x, bool training);
    void collect_params(std::vector<TensorT<T>>& out) const;
    void collect_bn(std::vector<BatchNormState<T>*>& out) { out.push_back(&bn); }
    std::int64_t conv_weight_count() const { return conv.weight_count(); }
};

/// Pinwheel-shaped convolution: four asymmetric-padding branches (each
/// BN+SiLU), channel concatenation, then a 2x2 unpadded fusion conv with
/// BN+SiLU. Output is (n, c2, h/s, w/s), interchangeable with ConvBlock.
template <typename T>
struct PConvLayer {
    PConvSpec spec;
    std::array<Conv2dLayer<T>, 4> branches;
    std::array<BatchNormState<T>, 4> branch_bn;
    Conv2dLayer<T> fusion;
    BatchNormState<T> fusion_bn;

    static PConvLayer make(const PConvSpec& spec, Rng& rng);

    /// Branch convs + BN + SiLU, concatenated: the (h/s+1, w/s+1, c2) map
    /// that feeds the fusion conv.
    TensorT<T> concat_branches(TapeT<T>* tape, const TensorT<T>& x, bool training);
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x, bool training);
    void collect_params(std::vector<TensorT<T>>& out) const;
    void collect_bn(std::vector<BatchNormState<T>*>& out) {
        for (auto& b : branch_bn) out.push_back(&b);
        out.push_back(&fusion_bn);
    }
    std::int64_t conv_weight_count() const;
};

}  // namespace irst
