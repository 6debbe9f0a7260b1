#pragma once

#include <span>
#include <vector>

#include "manet/tensor.hpp"

namespace manet::ops {

// Cross-correlation with zero padding. weight is [Cout,Cin,kh,kw], bias is
// [1,Cout,1,1]. Output is [N,Cout,(H+2p-kh)/s+1,(W+2p-kw)/s+1].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding);

// Backward warp in pixel units: out(n,c,y,x) samples input at
// (x + flow(n,0,y,x), y + flow(n,1,y,x)). Taps outside the image read zero.
// At an exact integer sample position the left/upper cell is used, so the
// flow derivative there is the backward difference.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& flow);

// Softmax across channels at every pixel, max-subtracted.
template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& logits);

// [N,C,H,W] x [N,C,H,W] -> [N,1,H,W], sum over channels of a*b.
template <typename T>
Tensor<T> per_pixel_inner_product(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// weights [N,1,H,W] broadcast over the C channels of feature [N,C,H,W].
template <typename T>
Tensor<T> multiply_broadcast_channel(const Tensor<T>& weights,
                                     const Tensor<T>& feature);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count);
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
  std::vector<Tensor<T>> v(parts);
  return concat_channels<T>(std::span<const Tensor<T>>(v));
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
// bound * tanh(x / bound): identity near zero, saturating at +-bound.
template <typename T>
Tensor<T> soft_clamp(const Tensor<T>& x, T bound);
// x / sqrt(mean over channels of x^2 + epsilon), per pixel.
template <typename T>
Tensor<T> pixel_norm(const Tensor<T>& x, T epsilon);

// Half-pixel-centred bilinear resampling with edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);
template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Mean-reduced losses, returned as [1,1,1,1].
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);
template <typename T>
Tensor<T> charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& target,
                           T epsilon);

}  // namespace manet::ops
