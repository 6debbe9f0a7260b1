#include "manet/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace manet {

std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + "]";
}

namespace {
thread_local bool tls_grad_enabled = true;
thread_local std::uint64_t tls_record_index = 0;
}  // namespace

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) {
  tls_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

namespace detail {
std::uint64_t next_record_index() { return ++tls_record_index; }
}  // namespace detail

template <typename T>
Tape<T> Tape<T>::collect(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<const TensorNode<T>*> seen;
  std::vector<std::shared_ptr<TensorNode<T>>> stack{root.node()};
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (!node->requires_grad || !node->backward) continue;
    if (!seen.insert(node.get()).second) continue;
    for (const auto& in : node->inputs) stack.push_back(in);
    tape.nodes_.push_back(std::move(node));
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto& a, const auto& b) { return a->order > b->order; });
  return tape;
}

template <typename T>
std::vector<std::uint64_t> Tape<T>::visit_order() const {
  std::vector<std::uint64_t> order;
  order.reserve(nodes_.size());
  for (const auto& n : nodes_) order.push_back(n->order);
  return order;
}

template <typename T>
void Tape<T>::run(const Tensor<T>& root) const {
  auto& seed = root.node()->grad_buffer();
  std::fill(seed.begin(), seed.end(), T(0));
  seed[0] = T(1);
  for (const auto& node : nodes_) {
    if (node->grad.empty()) continue;
    node->backward(*node);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     loss.shape().str());
  }
  if (!loss.requires_grad()) return;
  Tape<T>::collect(loss).run(loss);
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace manet
