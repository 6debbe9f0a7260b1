#include "manet/parameters.hpp"

#include <cmath>
#include <random>

namespace manet {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
Tensor<T> ParameterSet<T>::add(const std::string& name, Shape shape) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  Tensor<T> t(shape);
  t.set_requires_grad(true);
  t.zero_grad();
  index_.emplace(name, items_.size());
  items_.push_back({name, t});
  return t;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t total = 0;
  for (const auto& p : items_) total += p.value.numel();
  return total;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : items_) p.value.zero_grad();
}

template <typename T>
void ParameterSet<T>::set_requires_grad(bool on) {
  for (auto& p : items_) p.value.set_requires_grad(on);
}

template <typename T>
void init_he_uniform(Tensor<T>& weight, std::uint64_t seed, double leaky_slope) {
  const Shape s = weight.shape();
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  const double bound = std::sqrt(6.0 / ((1.0 + leaky_slope * leaky_slope) * fan_in));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : weight.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
Conv2d<T> make_conv(ParameterSet<T>& params, const std::string& prefix, ConvSpec spec,
                    std::uint64_t model_seed, ConvInit init, double leaky_slope) {
  if (spec.in < 1 || spec.out < 1 || spec.kernel < 1 || spec.kernel % 2 == 0) {
    throw ConfigError("invalid convolution " + prefix);
  }
  Conv2d<T> conv;
  conv.weight = params.add(prefix + ".weight", Shape{spec.out, spec.in, spec.kernel, spec.kernel});
  conv.bias = params.add(prefix + ".bias", Shape{1, spec.out, 1, 1});
  conv.stride = spec.stride;
  conv.padding = spec.kernel / 2;
  if (init == ConvInit::he_uniform) {
    init_he_uniform(conv.weight, parameter_seed(model_seed, prefix + ".weight"), leaky_slope);
  }
  return conv;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template void init_he_uniform(Tensor<float>&, std::uint64_t, double);
template void init_he_uniform(Tensor<double>&, std::uint64_t, double);
template Conv2d<float> make_conv(ParameterSet<float>&, const std::string&, ConvSpec,
                                 std::uint64_t, ConvInit, double);
template Conv2d<double> make_conv(ParameterSet<double>&, const std::string&, ConvSpec,
                                  std::uint64_t, ConvInit, double);

}  // namespace manet
