#pragma once

// Multi-candidate alignment: K backward warps of a reference map, per-pixel
// attention over the candidates, and the attention-weighted average.

#include <string>
#include <vector>

#include "manet/parameters.hpp"
#include "manet/tensor.hpp"

namespace manet::align {

enum class AttentionMode { none, fc, ip };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

// K interleaved (horizontal, vertical) displacement fields in pixels,
// stored as [N, 2K, H, W].
template <typename T>
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(Tensor<T> flows, int k);

  int k() const { return k_; }
  const Tensor<T>& tensor() const { return flows_; }
  // Candidate l as a [N,2,H,W] tensor, differentiable.
  Tensor<T> flow(int l) const;

 private:
  Tensor<T> flows_;
  int k_ = 0;
};

// Bilinear resize of every field to (h, w); displacement values are scaled by
// the same ratio. The two axes must be scaled by the same factor.
template <typename T>
FlowStack<T> rescale_flows(const FlowStack<T>& flows, int h, int w);

template <typename T>
struct WarpedStack {
  std::vector<Tensor<T>> aligned;
  int k() const { return static_cast<int>(aligned.size()); }
};

template <typename T>
struct AttentionLogits {
  Tensor<T> logits;  // [N,K,H,W]
};

template <typename T>
struct AttentionMap {
  Tensor<T> weights;  // [N,K,H,W], convex per pixel
};

// 1x1 convolution from flow-estimator features to K logits.
template <typename T>
struct FcAttentionHead {
  Conv2d<T> conv;
  int k() const { return conv.out_channels(); }
};

// theta embeds the current map, phi embeds each warped candidate. Both are
// 1x1 convolutions C -> Ce.
template <typename T>
struct IpAttentionHead {
  Conv2d<T> theta;
  Conv2d<T> phi;
  int embed_channels() const { return theta.out_channels(); }
};

template <typename T>
WarpedStack<T> multi_warp(const Tensor<T>& reference, const FlowStack<T>& flows);

template <typename T>
AttentionLogits<T> attention_logits_fc(const Tensor<T>& flow_features,
                                       const FcAttentionHead<T>& head);

template <typename T>
AttentionLogits<T> attention_logits_ip(const Tensor<T>& current,
                                       const WarpedStack<T>& warped,
                                       const IpAttentionHead<T>& head);

template <typename T>
AttentionMap<T> normalize_attention(const AttentionLogits<T>& logits);

template <typename T>
Tensor<T> fuse(const AttentionMap<T>& weights, const WarpedStack<T>& warped);

// Attention inputs for one multi_align call. For fc, flow_features is the
// estimator's penultimate map; its logits are resized to the aligned map's
// resolution when the two differ. Mode none aligns with the first flow only.
template <typename T>
struct AttentionHeads {
  AttentionMode mode = AttentionMode::none;
  const FcAttentionHead<T>* fc = nullptr;
  Tensor<T> flow_features;
  const IpAttentionHead<T>* ip = nullptr;
};

template <typename T>
struct AlignResult {
  Tensor<T> fused;
  AttentionMap<T> attention;
  WarpedStack<T> warped;
};

template <typename T>
AlignResult<T> multi_align(const Tensor<T>& current, const Tensor<T>& reference,
                           const FlowStack<T>& flows, const AttentionHeads<T>& heads);

}  // namespace manet::align
