#pragma once

// Denoiser composed of a shared feature pyramid, a multi-flow estimator over
// the concatenated frame pair, per-level multi-candidate alignment and a
// skip-connected synthesis decoder that predicts a residual.
//
// Parameter names are stable paths such as "flow_estimator.head.weight"; the
// first path component is the parameter group.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "manet/alignment.hpp"
#include "manet/parameters.hpp"

namespace manet::nn {

using align::AttentionMode;

struct ModelConfig {
  int channels = 3;           // frame channels
  int base_channels = 16;     // flow estimator width at full resolution
  int feature_channels = 16;  // estimator penultimate width, the distillation tap
  int pyramid_base = 16;      // pyramid widths are pyramid_base * 2^level
  int levels = 3;
  int k = 4;
  AttentionMode attention_mode = AttentionMode::none;
  double width_factor = 1.0;
  int bottleneck_multiplier = 16;  // coarsest estimator width = base * this
  bool align_image = false;        // also align the previous frame itself
  double leaky_slope = 0.1;
  double candidate_spread = 1.0;   // initial offset radius of candidates 2..K, px
  double max_displacement = 4.0;  // flows are soft-clamped to +-this many px

  void validate() const;
  int head_channels() const;  // 2K, plus K for the fc head
  int pyramid_channels(int level) const { return pyramid_base << level; }
  std::vector<int> estimator_channels() const;
  // Required divisor of the frame height and width.
  int size_multiple() const { return 1 << (levels - 1); }
  bool operator==(const ModelConfig&) const = default;
};
using FlowEstimatorConfig = ModelConfig;

// Student configuration: flow-estimator widths scaled by width_factor,
// rounded up with a floor of 2. K, attention mode and the tap width are kept.
ModelConfig slim(const ModelConfig& config, double width_factor);

struct ParamCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> per_group;
};

template <typename T>
struct ForwardResult {
  Tensor<T> denoised;
  Tensor<T> residual;
  align::FlowStack<T> flows;   // full resolution
  Tensor<T> flow_features;     // estimator penultimate map
  // One entry per pyramid level (finest first), then the image level if on.
  std::vector<align::AttentionMap<T>> attention;
};

template <typename T>
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // current/previous are [N,C,H,W] with H and W multiples of size_multiple().
  ForwardResult<T> forward(const Tensor<T>& current, const Tensor<T>& previous) const;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  ParamCount count_params() const;

  // Copies values for every parameter whose name and shape match in source.
  // Returns the number of parameters copied.
  template <typename U>
  std::size_t copy_matching_from(const ParameterSet<U>& source);

 private:
  Model() = default;

  struct PyramidLevel {
    Conv2d<T> down, refine;
  };
  struct EstimatorLevel {
    std::vector<Conv2d<T>> convs;
  };

  std::vector<Tensor<T>> pyramid(const Tensor<T>& frame) const;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  ParameterSet<T> params_;
  std::vector<PyramidLevel> pyramid_;
  std::vector<EstimatorLevel> encoder_;
  std::optional<Conv2d<T>> reduce_;
  std::vector<Conv2d<T>> estimator_decoder_;  // indexed by level, 0 = tap
  Conv2d<T> flow_head_;
  std::optional<align::FcAttentionHead<T>> fc_head_;
  std::vector<align::IpAttentionHead<T>> ip_heads_;  // per level
  std::optional<align::IpAttentionHead<T>> ip_image_head_;
  std::vector<Conv2d<T>> synthesis_;  // indexed by level
  Conv2d<T> synthesis_out_;
};

template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed) {
  return Model<T>::build(config, seed);
}

// Exact closed-form size of the attention heads that the fc/ip variants add
// on top of the baseline with the same dimensions.
std::size_t attention_overhead(const ModelConfig& config);

template <typename T>
template <typename U>
std::size_t Model<T>::copy_matching_from(const ParameterSet<U>& source) {
  std::size_t copied = 0;
  for (auto& p : params_.items()) {
    const auto* src = source.find(p.name);
    if (src == nullptr || !(src->value.shape() == p.value.shape())) continue;
    auto dst = p.value.mutable_data();
    const auto values = src->value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(values[i]);
    ++copied;
  }
  return copied;
}

}  // namespace manet::nn
