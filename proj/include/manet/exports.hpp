#pragma once

// Visual diagnostics: 8-bit attention maps, warping-error maps and the
// histogram of candidate flow offsets around a reference flow.

#include <cstdint>
#include <string>
#include <vector>

#include "manet/alignment.hpp"
#include "manet/tensor.hpp"

namespace manet::exports {

// Attention weights [1,K,H,W] to K grayscale frames [1,1,H,W] on the 1/255
// grid. Each weight becomes floor(255 w) or ceil(255 w), chosen by largest
// remainder so that the K bytes at every pixel sum to exactly 255.
std::vector<TensorF> quantize_attention(const TensorF& weights);

// Per-pixel mean absolute difference over channels, clamped to [0,1]: [1,1,H,W].
TensorF warping_error(const TensorF& warped, const TensorF& reference);

// 2-D histogram over [-range, range]^2 with bins x bins cells; samples
// outside the range count in the nearest edge cell.
class OffsetHistogram {
 public:
  explicit OffsetHistogram(int bins = 41, double range = 2.0);

  void add(double dx, double dy);
  // Adds flow - reference at every pixel for every candidate of the stack.
  void add_offsets(const align::FlowStack<float>& flows, const TensorF& reference_flow);

  int bins() const { return bins_; }
  double range() const { return range_; }
  std::uint64_t count(int ix, int iy) const { return counts_[static_cast<std::size_t>(iy) * bins_ + ix]; }
  std::uint64_t total() const { return total_; }
  int bin_of(double v) const;

  // Header lines, then one row per dy bin with bins counts separated by spaces.
  std::string to_text() const;

 private:
  int bins_;
  double range_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

}  // namespace manet::exports
