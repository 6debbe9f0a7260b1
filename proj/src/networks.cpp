#include "manet/networks.hpp"

#include <cmath>
#include <numbers>

#include "manet/ops.hpp"

namespace manet::nn {

void ModelConfig::validate() const {
  if (k < 1) throw ConfigError("k must be >= 1, got " + std::to_string(k));
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (feature_channels < 1) throw ConfigError("feature_channels must be >= 1");
  if (pyramid_base < 1) throw ConfigError("pyramid_base must be >= 1");
  if (levels < 1 || levels > 8) throw ConfigError("levels must be in [1,8]");
  if (bottleneck_multiplier < 1) throw ConfigError("bottleneck_multiplier must be >= 1");
  if (!(width_factor > 0.0 && width_factor <= 1.0)) {
    throw ConfigError("width_factor must be in (0,1], got " + std::to_string(width_factor));
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0,1)");
  if (!std::isfinite(candidate_spread)) throw ConfigError("candidate_spread must be finite");
  if (!(max_displacement > 0.0) || !std::isfinite(max_displacement)) {
    throw ConfigError("max_displacement must be positive and finite");
  }
  if (k > 1 && !(std::abs(candidate_spread) < max_displacement)) {
    throw ConfigError("candidate_spread must be smaller than max_displacement");
  }
}

int ModelConfig::head_channels() const {
  return 2 * k + (attention_mode == AttentionMode::fc ? k : 0);
}

std::vector<int> ModelConfig::estimator_channels() const {
  std::vector<int> out;
  for (int l = 0; l < levels; ++l) {
    const bool coarsest = l == levels - 1 && levels > 1;
    out.push_back(coarsest ? base_channels * bottleneck_multiplier : base_channels << l);
  }
  return out;
}

ModelConfig slim(const ModelConfig& config, double width_factor) {
  if (!(width_factor > 0.0 && width_factor <= 1.0)) {
    throw ConfigError("slim: width_factor must be in (0,1], got " + std::to_string(width_factor));
  }
  ModelConfig out = config;
  if (width_factor == 1.0) return out;
  out.base_channels =
      std::max(2, static_cast<int>(std::ceil(config.base_channels * width_factor - 1e-9)));
  out.width_factor = width_factor;
  return out;
}

std::size_t attention_overhead(const ModelConfig& config) {
  const auto k = static_cast<std::size_t>(config.k);
  switch (config.attention_mode) {
    case AttentionMode::none:
      return 0;
    case AttentionMode::fc:
      return k * static_cast<std::size_t>(config.feature_channels) + k;
    case AttentionMode::ip: {
      std::size_t total = 0;
      auto level = [&](std::size_t c) { total += 2 * (c * c + c); };
      for (int l = 0; l < config.levels; ++l) level(config.pyramid_channels(l));
      if (config.align_image) level(config.channels);
      return total;
    }
  }
  return 0;
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.seed_ = seed;
  const int L = config.levels;
  const double slope = config.leaky_slope;
  auto conv = [&](const std::string& name, int in, int out, int kernel, int stride,
                  ConvInit init = ConvInit::he_uniform) {
    return make_conv(m.params_, name, ConvSpec{in, out, kernel, stride}, seed, init, slope);
  };

  const auto est = config.estimator_channels();
  for (int l = 0; l < L; ++l) {
    const std::string p = "flow_estimator.enc" + std::to_string(l);
    EstimatorLevel level;
    const int in = l == 0 ? 2 * config.channels : est[l - 1];
    level.convs.push_back(conv(p + ".conv0", in, est[l], 3, l == 0 ? 1 : 2));
    level.convs.push_back(conv(p + ".conv1", est[l], est[l], 3, 1));
    if (l == L - 1 && L > 1) level.convs.push_back(conv(p + ".conv2", est[l], est[l], 3, 1));
    m.encoder_.push_back(std::move(level));
  }
  m.estimator_decoder_.resize(L);
  if (L == 1) {
    m.estimator_decoder_[0] = conv("flow_estimator.dec0", est[0], config.feature_channels, 3, 1);
  } else {
    m.reduce_ = conv("flow_estimator.reduce", est[L - 1], est[L - 2], 3, 1);
    int width = est[L - 2];
    for (int l = L - 2; l >= 0; --l) {
      const int out = l == 0 ? config.feature_channels : est[l];
      m.estimator_decoder_[l] =
          conv("flow_estimator.dec" + std::to_string(l), width + est[l], out, 3, 1);
      width = out;
    }
  }
  m.flow_head_ = conv("flow_estimator.head", config.feature_channels, 2 * config.k, 3, 1,
                      ConvInit::zero);
  // Candidates after the first start on a ring of fixed offsets so that the
  // K warps differ from the first step.
  {
    auto bias = m.flow_head_.bias.mutable_data();
    const double bound = config.max_displacement;
    auto raw = [bound](double v) { return bound * std::atanh(v / bound); };
    for (int l = 1; l < config.k; ++l) {
      const double angle = 2.0 * std::numbers::pi * (l - 1) / (config.k - 1);
      bias[2 * l] = static_cast<T>(raw(config.candidate_spread * std::cos(angle)));
      bias[2 * l + 1] = static_cast<T>(raw(config.candidate_spread * std::sin(angle)));
    }
  }

  for (int l = 0; l < L; ++l) {
    const std::string p = "pyramid.level" + std::to_string(l);
    const int in = l == 0 ? config.channels : config.pyramid_channels(l - 1);
    const int c = config.pyramid_channels(l);
    m.pyramid_.push_back({conv(p + ".conv0", in, c, 3, l == 0 ? 1 : 2), conv(p + ".conv1", c, c, 3, 1)});
  }

  if (config.attention_mode == AttentionMode::fc) {
    m.fc_head_ = align::FcAttentionHead<T>{
        conv("attention.fc", config.feature_channels, config.k, 1, 1)};
  } else if (config.attention_mode == AttentionMode::ip) {
    auto ip = [&](const std::string& p, int c) {
      return align::IpAttentionHead<T>{conv(p + ".theta", c, c, 1, 1), conv(p + ".phi", c, c, 1, 1)};
    };
    for (int l = 0; l < L; ++l) {
      m.ip_heads_.push_back(ip("attention.ip" + std::to_string(l), config.pyramid_channels(l)));
    }
    if (config.align_image) m.ip_image_head_ = ip("attention.ip_image", config.channels);
  }

  m.synthesis_.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    const int c = config.pyramid_channels(l);
    int in = 2 * c;
    if (l < L - 1) in += config.pyramid_channels(l + 1);
    if (l == 0 && config.align_image) in += config.channels;
    m.synthesis_[l] = conv("synthesis.dec" + std::to_string(l), in, c, 3, 1);
  }
  m.synthesis_out_ = conv("synthesis.out", config.pyramid_channels(0), config.channels, 3, 1);
  return m;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::pyramid(const Tensor<T>& frame) const {
  const T slope = static_cast<T>(config_.leaky_slope);
  std::vector<Tensor<T>> out;
  Tensor<T> x = frame;
  for (const auto& level : pyramid_) {
    x = ops::leaky_relu(level.down(x), slope);
    x = ops::leaky_relu(level.refine(x), slope);
    out.push_back(x);
  }
  return out;
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& current, const Tensor<T>& previous) const {
  const Shape& s = current.shape();
  if (!(s == previous.shape())) {
    throw ShapeError("forward: current " + s.str() + " vs previous " + previous.shape().str());
  }
  if (s.c != config_.channels) {
    throw ShapeError("forward: model expects " + std::to_string(config_.channels) +
                     " channels, got " + s.str());
  }
  const int multiple = config_.size_multiple();
  if (s.h % multiple != 0 || s.w % multiple != 0) {
    throw ShapeError("forward: spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " must be a multiple of " + std::to_string(multiple));
  }
  const int L = config_.levels;
  const T slope = static_cast<T>(config_.leaky_slope);
  auto act = [&](const Tensor<T>& x) { return ops::leaky_relu(x, slope); };

  // Flow estimator.
  std::vector<Tensor<T>> skips;
  Tensor<T> x = ops::concat_channels({current, previous});
  for (const auto& level : encoder_) {
    for (const auto& c : level.convs) x = act(c(x));
    skips.push_back(x);
  }
  if (L == 1) {
    x = act(estimator_decoder_[0](x));
  } else {
    x = act((*reduce_)(x));
    for (int l = L - 2; l >= 0; --l) {
      x = act(estimator_decoder_[l](ops::concat_channels({ops::bilinear_upsample_2x(x), skips[l]})));
    }
  }
  ForwardResult<T> result;
  result.flow_features = ops::pixel_norm(x, static_cast<T>(1e-6));
  result.flows = align::FlowStack<T>(
      ops::soft_clamp(flow_head_(result.flow_features), static_cast<T>(config_.max_displacement)),
      config_.k);

  const auto cur = pyramid(current);
  const auto prev = pyramid(previous);

  auto heads_for = [&](const align::IpAttentionHead<T>* ip) {
    align::AttentionHeads<T> heads;
    heads.mode = config_.attention_mode;
    if (fc_head_) heads.fc = &*fc_head_;
    heads.flow_features = result.flow_features;
    heads.ip = ip;
    return heads;
  };

  std::vector<Tensor<T>> fused(L);
  for (int l = 0; l < L; ++l) {
    const Shape& ls = cur[l].shape();
    const auto flows = align::rescale_flows(result.flows, ls.h, ls.w);
    auto aligned = align::multi_align(cur[l], prev[l], flows,
                                      heads_for(ip_heads_.empty() ? nullptr : &ip_heads_[l]));
    fused[l] = aligned.fused;
    result.attention.push_back(aligned.attention);
  }
  Tensor<T> fused_image;
  if (config_.align_image) {
    auto aligned = align::multi_align(current, previous, result.flows,
                                      heads_for(ip_image_head_ ? &*ip_image_head_ : nullptr));
    fused_image = aligned.fused;
    result.attention.push_back(aligned.attention);
  }

  // Synthesis decoder over the current pyramid and the aligned features.
  Tensor<T> d;
  for (int l = L - 1; l >= 0; --l) {
    std::vector<Tensor<T>> parts;
    if (l < L - 1) parts.push_back(ops::bilinear_upsample_2x(d));
    parts.push_back(cur[l]);
    parts.push_back(fused[l]);
    if (l == 0 && config_.align_image) parts.push_back(fused_image);
    d = act(synthesis_[l](ops::concat_channels<T>(parts)));
  }
  result.residual = synthesis_out_(d);
  result.denoised = ops::add(current, result.residual);
  return result;
}

template <typename T>
ParamCount Model<T>::count_params() const {
  ParamCount out;
  for (const auto& p : params_.items()) {
    const auto n = p.value.numel();
    out.total += n;
    out.per_group[p.name.substr(0, p.name.find('.'))] += n;
  }
  return out;
}

template class Model<float>;
template class Model<double>;

}  // namespace manet::nn
