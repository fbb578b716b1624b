#pragma once

#include <optional>
#include <vector>

#include "irst/tensor.hpp"

namespace irst {

/// Per-side zero padding in pixels.
struct PadSpec {
    int left = 0, right = 0, top = 0, bottom = 0;

    bool operator==(const PadSpec&) const = default;
    void validate() const;
};

/// Geometry of one convolution: channels, kernel, stride, groups, padding.
struct ConvSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int groups = 1;
    PadSpec pad;
    bool bias = false;

    void validate() const;
    /// Output spatial size for an (h, w) input; throws if non-positive.
    std::pair<std::int64_t, std::int64_t> out_hw(std::int64_t h, std::int64_t w) const;
};

/// Running statistics and affine parameters of one batch-norm op.
template <typename T>
struct BatchNormState {
    TensorT<T> gamma;  // shape (1, c, 1, 1)
    TensorT<T> beta;   // shape (1, c, 1, 1)
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static BatchNormState identity(int channels);
};

/// Throws if any value of t is NaN/Inf; `where` names the producing op.
template <typename T>
void check_finite(const TensorT<T>& t, const char* where);

// ---- operator set -------------------------------------------------------
//
// Every op takes the tape as its first argument (nullptr = no recording,
// e.g. inference) and returns a freshly allocated output. Gradients
// accumulate into input grad buffers when backward() replays the tape.

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& weight,
                  const ConvSpec& spec, const TensorT<T>& bias = {});

template <typename T>
TensorT<T> batch_norm(TapeT<T>* tape, const TensorT<T>& x, BatchNormState<T>& state,
                      bool training);

template <typename T>
TensorT<T> silu(TapeT<T>* tape, const TensorT<T>& x);

template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x);

template <typename T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x);

template <typename T>
TensorT<T> arctan(TapeT<T>* tape, const TensorT<T>& x);

/// Elementwise atan2(y, x).
template <typename T>
TensorT<T> arctan2(TapeT<T>* tape, const TensorT<T>& y, const TensorT<T>& x);

template <typename T>
TensorT<T> sqrt(TapeT<T>* tape, const TensorT<T>& x);

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> divide(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

/// Elementwise min/max; ties route the gradient to the first argument.
template <typename T>
TensorT<T> minimum(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> maximum(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

/// Broadcast multiply by a (1,1,1,1) scalar tensor; gradients reach both.
template <typename T>
TensorT<T> scale_by(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& s);

template <typename T>
TensorT<T> add_scalar(TapeT<T>* tape, const TensorT<T>& x, T s);
template <typename T>
TensorT<T> mul_scalar(TapeT<T>* tape, const TensorT<T>& x, T s);
template <typename T>
TensorT<T> neg(TapeT<T>* tape, const TensorT<T>& x);

/// Sum / mean over all elements, returned as a (1,1,1,1) scalar.
template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x);
template <typename T>
TensorT<T> mean(TapeT<T>* tape, const TensorT<T>& x);

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const std::vector<TensorT<T>>& xs);

/// Channels [c0, c0+count) of x.
template <typename T>
TensorT<T> slice_channels(TapeT<T>* tape, const TensorT<T>& x, std::int64_t c0,
                          std::int64_t count);

/// Batch element i as an (1,c,h,w) tensor.
template <typename T>
TensorT<T> slice_batch(TapeT<T>* tape, const TensorT<T>& x, std::int64_t i);

/// 2x2 max pooling, stride 2; odd trailing rows/cols are dropped.
template <typename T>
TensorT<T> max_pool2(TapeT<T>* tape, const TensorT<T>& x);

/// Nearest-neighbour x2 upsampling.
template <typename T>
TensorT<T> upsample_nearest2(TapeT<T>* tape, const TensorT<T>& x);

/// Spatial mean per channel, output (n,c,1,1).
template <typename T>
TensorT<T> global_avg_pool(TapeT<T>* tape, const TensorT<T>& x);

}  // namespace irst
