#include "manet/alignment.hpp"

#include "manet/ops.hpp"

namespace manet::align {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::none:
      return "none";
    case AttentionMode::fc:
      return "fc";
    case AttentionMode::ip:
      return "ip";
  }
  return "none";
}

AttentionMode parse_attention_mode(const std::string& text) {
  if (text == "none" || text == "baseline") return AttentionMode::none;
  if (text == "fc") return AttentionMode::fc;
  if (text == "ip") return AttentionMode::ip;
  throw ConfigError("unknown attention mode '" + text + "' (expected none|fc|ip)");
}

template <typename T>
FlowStack<T>::FlowStack(Tensor<T> flows, int k) : flows_(std::move(flows)), k_(k) {
  if (k < 1) throw ShapeError("flow stack needs K >= 1, got " + std::to_string(k));
  if (flows_.shape().c != 2 * k) {
    throw ShapeError("flow stack with K=" + std::to_string(k) + " needs " +
                     std::to_string(2 * k) + " channels, got " + flows_.shape().str());
  }
}

template <typename T>
Tensor<T> FlowStack<T>::flow(int l) const {
  return ops::slice_channels(flows_, 2 * l, 2);
}

template <typename T>
FlowStack<T> rescale_flows(const FlowStack<T>& flows, int h, int w) {
  const Shape& s = flows.tensor().shape();
  if (s.h == h && s.w == w) return flows;
  // Cross-multiplied so 32->16 and 16->8 compare exactly.
  if (static_cast<long>(h) * s.w != static_cast<long>(w) * s.h) {
    throw ShapeError("rescale_flows: anisotropic resize " + s.str() + " -> " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  const T ratio = static_cast<T>(h) / static_cast<T>(s.h);
  return FlowStack<T>(ops::scale(ops::resize_bilinear(flows.tensor(), h, w), ratio),
                      flows.k());
}

template <typename T>
WarpedStack<T> multi_warp(const Tensor<T>& reference, const FlowStack<T>& flows) {
  const Shape& rs = reference.shape();
  const Shape& fs = flows.tensor().shape();
  if (rs.n != fs.n || rs.h != fs.h || rs.w != fs.w) {
    throw ShapeError("multi_warp: reference " + rs.str() + " and flows " + fs.str() +
                     " disagree");
  }
  WarpedStack<T> out;
  out.aligned.reserve(flows.k());
  for (int l = 0; l < flows.k(); ++l) {
    out.aligned.push_back(ops::grid_sample_bilinear(reference, flows.flow(l)));
  }
  return out;
}

template <typename T>
AttentionLogits<T> attention_logits_fc(const Tensor<T>& flow_features,
                                       const FcAttentionHead<T>& head) {
  if (flow_features.shape().c != head.conv.in_channels()) {
    throw ShapeError("attention_logits_fc: features " + flow_features.shape().str() +
                     " vs head weight " + head.conv.weight.shape().str());
  }
  return {head.conv(flow_features)};
}

template <typename T>
AttentionLogits<T> attention_logits_ip(const Tensor<T>& current,
                                       const WarpedStack<T>& warped,
                                       const IpAttentionHead<T>& head) {
  if (warped.aligned.empty()) throw ShapeError("attention_logits_ip: empty warped stack");
  for (const auto& w : warped.aligned) {
    if (!(w.shape() == current.shape())) {
      throw ShapeError("attention_logits_ip: warped " + w.shape().str() +
                       " vs current " + current.shape().str());
    }
  }
  if (current.shape().c != head.theta.in_channels()) {
    throw ShapeError("attention_logits_ip: current " + current.shape().str() +
                     " vs theta weight " + head.theta.weight.shape().str());
  }
  const Tensor<T> embedded = head.theta(current);
  std::vector<Tensor<T>> channels;
  channels.reserve(warped.aligned.size());
  for (const auto& w : warped.aligned) {
    channels.push_back(ops::per_pixel_inner_product(embedded, head.phi(w)));
  }
  return {ops::concat_channels<T>(channels)};
}

template <typename T>
AttentionMap<T> normalize_attention(const AttentionLogits<T>& logits) {
  return {ops::channel_softmax(logits.logits)};
}

template <typename T>
Tensor<T> fuse(const AttentionMap<T>& weights, const WarpedStack<T>& warped) {
  const Shape& ws = weights.weights.shape();
  if (ws.c != warped.k() || warped.aligned.empty()) {
    throw ShapeError("fuse: attention has " + std::to_string(ws.c) +
                     " channels but " + std::to_string(warped.k()) + " candidates");
  }
  Tensor<T> total;
  for (int l = 0; l < warped.k(); ++l) {
    const auto& cand = warped.aligned[l];
    if (cand.shape().n != ws.n || cand.shape().h != ws.h || cand.shape().w != ws.w) {
      throw ShapeError("fuse: attention " + ws.str() + " vs candidate " +
                       cand.shape().str());
    }
    auto term = ops::multiply_broadcast_channel(ops::slice_channels(weights.weights, l, 1), cand);
    total = l == 0 ? term : ops::add(total, term);
  }
  return total;
}

template <typename T>
AlignResult<T> multi_align(const Tensor<T>& current, const Tensor<T>& reference,
                           const FlowStack<T>& flows, const AttentionHeads<T>& heads) {
  if (!(current.shape() == reference.shape())) {
    throw ShapeError("multi_align: current " + current.shape().str() +
                     " vs reference " + reference.shape().str());
  }
  AlignResult<T> result;
  const Shape& s = current.shape();
  switch (heads.mode) {
    case AttentionMode::none: {
      const FlowStack<T> single(flows.flow(0), 1);
      result.warped = multi_warp(reference, single);
      result.attention = {Tensor<T>(Shape{s.n, 1, s.h, s.w}, T(1))};
      result.fused = result.warped.aligned[0];
      return result;
    }
    case AttentionMode::fc: {
      if (heads.fc == nullptr) throw ConfigError("multi_align: fc mode without fc head");
      if (heads.fc->k() != flows.k()) {
        throw ShapeError("multi_align: fc head has " + std::to_string(heads.fc->k()) +
                         " outputs for K=" + std::to_string(flows.k()));
      }
      result.warped = multi_warp(reference, flows);
      auto logits = attention_logits_fc(heads.flow_features, *heads.fc);
      const Shape& ls = logits.logits.shape();
      if (ls.h != s.h || ls.w != s.w) {
        logits.logits = ops::resize_bilinear(logits.logits, s.h, s.w);
      }
      result.attention = normalize_attention(logits);
      break;
    }
    case AttentionMode::ip: {
      if (heads.ip == nullptr) throw ConfigError("multi_align: ip mode without ip head");
      result.warped = multi_warp(reference, flows);
      result.attention = normalize_attention(attention_logits_ip(current, result.warped, *heads.ip));
      break;
    }
  }
  result.fused = fuse(result.attention, result.warped);
  return result;
}

#define MANET_INSTANTIATE_ALIGN(T)                                                    \
  template class FlowStack<T>;                                                        \
  template FlowStack<T> rescale_flows(const FlowStack<T>&, int, int);                 \
  template WarpedStack<T> multi_warp(const Tensor<T>&, const FlowStack<T>&);          \
  template AttentionLogits<T> attention_logits_fc(const Tensor<T>&,                   \
                                                  const FcAttentionHead<T>&);         \
  template AttentionLogits<T> attention_logits_ip(const Tensor<T>&,                   \
                                                  const WarpedStack<T>&,              \
                                                  const IpAttentionHead<T>&);         \
  template AttentionMap<T> normalize_attention(const AttentionLogits<T>&);            \
  template Tensor<T> fuse(const AttentionMap<T>&, const WarpedStack<T>&);             \
  template AlignResult<T> multi_align(const Tensor<T>&, const Tensor<T>&,             \
                                      const FlowStack<T>&, const AttentionHeads<T>&);

MANET_INSTANTIATE_ALIGN(float)
MANET_INSTANTIATE_ALIGN(double)

#undef MANET_INSTANTIATE_ALIGN

}  // namespace manet::align
