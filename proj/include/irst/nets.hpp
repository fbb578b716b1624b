#pragma once

#include <string>
#include <vector>

#include "irst/box_loss.hpp"
#include "irst/pconv.hpp"

namespace irst {

enum class StemKind { conv, pconv };

std::string to_string(StemKind k);
StemKind stem_kind_from(const std::string& s);

/// A swappable stem layer: either the standard conv block or a pinwheel
/// layer, both stride-2 with identical output shapes.
template <typename T>
struct Stem {
    StemKind kind = StemKind::conv;
    int k = 3;
    ConvBlock<T> conv;
    PConvLayer<T> pconv;

    static Stem make(StemKind kind, int c1, int c2, int stride, int k, Rng& rng);
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x, bool training);
    void collect_params(std::vector<TensorT<T>>& out) const;
    void collect_bn(std::vector<BatchNormState<T>*>& out);
    std::int64_t conv_weight_count() const;
};

/// Encoder/decoder segmentation net: two swappable stride-2 stems, two
/// fixed conv blocks, two upsample+conv decoder stages with a skip
/// connection, and a 1-channel sigmoid head. Output matches the input
/// spatially.
template <typename T>
struct SegNetT {
    int base_c = 8;
    Stem<T> stem1, stem2;
    ConvBlock<T> enc1, enc2;
    ConvBlock<T> dec1, dec2;
    Conv2dLayer<T> head;
    bool training = true;

    static SegNetT make(StemKind kind, const std::vector<int>& ks, int base_c,
                        std::uint64_t seed);
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x);
    std::vector<TensorT<T>> params() const;
    std::vector<BatchNormState<T>*> bn_states();
    /// Replaces both stem layers in place; downstream shapes are unchanged.
    void set_stem(StemKind kind, const std::vector<int>& ks, std::uint64_t seed);
    std::int64_t stem_weight_count() const;
};

/// Single-box regressor: the same swappable stems, three conv blocks, and a
/// globally pooled 4-value head. The center comes from attention-weighted
/// coordinate pooling (soft-argmax; a uniformly pooled head cannot encode
/// position), the width/height from the attended size logits, both
/// sigmoid-bounded to the image.
template <typename T>
struct BoxNetT {
    int base_c = 8;
    Stem<T> stem1, stem2;
    ConvBlock<T> body1, body2, body3;
    Conv2dLayer<T> head;  // 1x1, 3 channels per cell: attention, w, h
    bool training = true;

    static BoxNetT make(StemKind kind, const std::vector<int>& ks, int base_c,
                        std::uint64_t seed);
    /// Per-cell head map, shape (n,3,h/4,w/4).
    TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x);
    /// Corner box for batch element i, in image pixels; valid by
    /// construction (width/height are nonnegative).
    BoxVar<T> box_for(TapeT<T>* tape, const TensorT<T>& head_out, std::int64_t i, int img_w,
                      int img_h) const;
    std::vector<TensorT<T>> params() const;
    std::vector<BatchNormState<T>*> bn_states();
    void set_stem(StemKind kind, const std::vector<int>& ks, std::uint64_t seed);
    std::int64_t stem_weight_count() const;
};

using SegNet = SegNetT<real_t>;
using BoxNet = BoxNetT<real_t>;

}  // namespace irst
