#include "manet/exports.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "manet/errors.hpp"

namespace manet::exports {

std::vector<TensorF> quantize_attention(const TensorF& weights) {
  const Shape s = weights.shape();
  if (s.n != 1) throw ShapeError("quantize_attention expects one item, got " + s.str());
  const int k = s.c;
  const std::size_t plane = s.plane();
  const auto w = weights.data();

  std::vector<std::vector<float>> out(static_cast<std::size_t>(k), std::vector<float>(plane));
  std::vector<int> units(static_cast<std::size_t>(k));
  std::vector<double> remainder(static_cast<std::size_t>(k));
  std::vector<int> order(static_cast<std::size_t>(k));
  for (std::size_t px = 0; px < plane; ++px) {
    int assigned = 0;
    for (int c = 0; c < k; ++c) {
      const double scaled = 255.0 * std::clamp(static_cast<double>(w[c * plane + px]), 0.0, 1.0);
      units[c] = static_cast<int>(std::floor(scaled));
      remainder[c] = scaled - units[c];
      assigned += units[c];
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return remainder[a] > remainder[b]; });
    // Weights are convex up to rounding, so the deficit is at most K-1 units;
    // clamping guards against inputs that are not.
    int missing = 255 - assigned;
    for (int i = 0; missing > 0 && i < k; ++i, --missing) ++units[order[i]];
    for (int i = k - 1; missing < 0 && i >= 0; --i) {
      const int c = order[i];
      if (units[c] > 0) {
        --units[c];
        ++missing;
      }
    }
    for (int c = 0; c < k; ++c) out[c][px] = static_cast<float>(units[c]) / 255.0f;
  }

  std::vector<TensorF> maps;
  maps.reserve(out.size());
  for (auto& v : out) maps.emplace_back(Shape{1, 1, s.h, s.w}, std::move(v));
  return maps;
}

TensorF warping_error(const TensorF& warped, const TensorF& reference) {
  const Shape s = warped.shape();
  if (!(s == reference.shape()) || s.n != 1) {
    throw ShapeError("warping_error needs matching single-item shapes, got " + s.str() + " and " +
                     reference.shape().str());
  }
  const std::size_t plane = s.plane();
  const auto a = warped.data();
  const auto b = reference.data();
  std::vector<float> err(plane, 0.0f);
  for (std::size_t px = 0; px < plane; ++px) {
    double acc = 0.0;
    for (int c = 0; c < s.c; ++c) acc += std::abs(double(a[c * plane + px]) - double(b[c * plane + px]));
    err[px] = static_cast<float>(std::min(1.0, acc / s.c));
  }
  return TensorF(Shape{1, 1, s.h, s.w}, std::move(err));
}

OffsetHistogram::OffsetHistogram(int bins, double range) : bins_(bins), range_(range) {
  if (bins < 1 || !(range > 0.0)) throw ConfigError("histogram needs bins >= 1 and range > 0");
  counts_.assign(static_cast<std::size_t>(bins) * bins, 0);
}

int OffsetHistogram::bin_of(double v) const {
  if (std::isnan(v)) throw NumericalError("histogram sample is NaN");
  const double pos = (v + range_) / (2.0 * range_) * bins_;
  if (pos <= 0.0) return 0;
  if (pos >= bins_) return bins_ - 1;
  return std::min(bins_ - 1, static_cast<int>(pos));
}

void OffsetHistogram::add(double dx, double dy) {
  ++counts_[static_cast<std::size_t>(bin_of(dy)) * bins_ + bin_of(dx)];
  ++total_;
}

void OffsetHistogram::add_offsets(const align::FlowStack<float>& flows, const TensorF& reference) {
  const Shape fs = flows.tensor().shape();
  const Shape rs = reference.shape();
  if (rs.c != 2 || rs.n != fs.n || rs.h != fs.h || rs.w != fs.w) {
    throw ShapeError("reference flow " + rs.str() + " does not match flow stack " + fs.str());
  }
  const auto f = flows.tensor().data();
  const auto r = reference.data();
  for (int n = 0; n < fs.n; ++n) {
    for (int l = 0; l < flows.k(); ++l) {
      for (int y = 0; y < fs.h; ++y) {
        for (int x = 0; x < fs.w; ++x) {
          const double dx = f[flows.tensor().index(n, 2 * l, y, x)] - r[reference.index(n, 0, y, x)];
          const double dy = f[flows.tensor().index(n, 2 * l + 1, y, x)] - r[reference.index(n, 1, y, x)];
          add(dx, dy);
        }
      }
    }
  }
}

std::string OffsetHistogram::to_text() const {
  std::ostringstream os;
  os << "manet-offset-histogram 1\n";
  os << "bins " << bins_ << "\n";
  os << "range " << range_ << "\n";
  os << "total " << total_ << "\n";
  os << "edges";
  for (int i = 0; i <= bins_; ++i) os << " " << (-range_ + 2.0 * range_ * i / bins_);
  os << "\n";
  for (int iy = 0; iy < bins_; ++iy) {
    for (int ix = 0; ix < bins_; ++ix) os << (ix ? " " : "") << count(ix, iy);
    os << "\n";
  }
  return os.str();
}

}  // namespace manet::exports
