#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "manet/ops.hpp"
#include "manet/tensor.hpp"

namespace manet {

// A named leaf tensor. The gradient lives on the tensor node and always has
// the value's shape once zero_grad() ran.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

// Registration order is kept; names are unique.
template <typename T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape);

  std::vector<Parameter<T>>& items() { return items_; }
  const std::vector<Parameter<T>>& items() const { return items_; }
  const Parameter<T>* find(std::string_view name) const;
  Parameter<T>* find(std::string_view name);

  std::size_t scalar_count() const;
  void zero_grad();
  void set_requires_grad(bool on);

 private:
  std::vector<Parameter<T>> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);

// Seed for one named parameter, independent of registration order.
inline std::uint64_t parameter_seed(std::uint64_t model_seed, std::string_view name) {
  return splitmix64(model_seed ^ fnv1a(name));
}

// Uniform in +-sqrt(6 / ((1 + slope^2) * fan_in)), drawn in double precision.
template <typename T>
void init_he_uniform(Tensor<T>& weight, std::uint64_t seed, double leaky_slope);

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [Cout,Cin,k,k]
  Tensor<T> bias;    // [1,Cout,1,1]
  int stride = 1;
  int padding = 0;

  int in_channels() const { return weight.shape().c; }
  int out_channels() const { return weight.shape().n; }
  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv2d(x, weight, bias, stride, padding);
  }
};

struct ConvSpec {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
};

enum class ConvInit { he_uniform, zero };

// Registers "<prefix>.weight" and "<prefix>.bias" and initializes them.
template <typename T>
Conv2d<T> make_conv(ParameterSet<T>& params, const std::string& prefix, ConvSpec spec,
                    std::uint64_t model_seed, ConvInit init, double leaky_slope);

}  // namespace manet
