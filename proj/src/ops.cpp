#include "manet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace manet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " +
                     b.str());
  }
}

template <typename T>
bool wants_grad(const TensorNode<T>& node) {
  return node.requires_grad;
}

struct ConvGeometry {
  int cin, h, w, kh, kw, stride, pad, ho, wo;
  bool pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad == 0;
  }
  int rows() const { return cin * kh * kw; }
  int cols() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + k lies inside [0, w).
inline void valid_range(int k, const ConvGeometry& g, int& lo, int& hi) {
  const int off = k - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - 1 - off < 0 ? 0 : std::min(g.wo, (g.w - 1 - off) / g.stride + 1);
  if (hi < lo) hi = lo;
}

// cols is [cin*kh*kw, ho*wo] inside a row-major matrix with row stride ld.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols, std::size_t ld) {
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* plane = img + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++row) {
        int lo, hi;
        valid_range(kx, g, lo, hi);
        const int off = kx - g.pad;
        T* dst = cols + row * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* d = dst + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(d, d + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w + off;
          std::fill(d, d + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, d + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride];
          }
          std::fill(d + hi, d + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img, std::size_t ld) {
  std::size_t row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    T* plane = img + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++row) {
        int lo, hi;
        valid_range(kx, g, lo, hi);
        const int off = kx - g.pad;
        const T* src = cols + row * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w + off;
          const T* s = src + static_cast<std::size_t>(oy) * g.wo;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += s[ox];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (ws.c != is.c) {
    throw ShapeError("conv2d: input " + is.str() + " has " +
                     std::to_string(is.c) + " channels but weight " + ws.str() +
                     " expects " + std::to_string(ws.c));
  }
  if (ws.h % 2 == 0 || ws.w % 2 == 0) {
    throw ShapeError("conv2d: kernel must be odd, weight " + ws.str());
  }
  if (!(bias.shape() == Shape{1, ws.n, 1, 1})) {
    throw ShapeError("conv2d: bias " + bias.shape().str() +
                     " does not match weight " + ws.str());
  }
  if (stride < 1 || padding < 0) {
    throw ShapeError("conv2d: invalid stride/padding");
  }
  if (is.h + 2 * padding < ws.h || is.w + 2 * padding < ws.w) {
    throw ShapeError("conv2d: input " + is.str() + " smaller than kernel " +
                     ws.str() + " with padding " + std::to_string(padding));
  }
  const ConvGeometry g{is.c,
                       is.h,
                       is.w,
                       ws.h,
                       ws.w,
                       stride,
                       padding,
                       (is.h + 2 * padding - ws.h) / stride + 1,
                       (is.w + 2 * padding - ws.w) / stride + 1};
  const int cout = ws.n;
  Tensor<T> out(Shape{is.n, cout, g.ho, g.wo});

  // The whole batch goes through one GEMM: item n owns columns
  // [n*cols, (n+1)*cols) of the im2col matrix.
  const int batch = is.n;
  const std::size_t ld = static_cast<std::size_t>(batch) * g.cols();
  const ConstMapMat<T> wmat(weight.data().data(), cout, g.rows());
  const T* bptr = bias.data().data();
  const std::size_t in_stride = static_cast<std::size_t>(is.c) * is.h * is.w;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * g.cols();
  T* optr = out.mutable_data().data();
  if (batch == 1) {
    const T* cptr = input.data().data();
    std::unique_ptr<T[]> cols;
    if (!g.pointwise()) {
      cols.reset(new T[static_cast<std::size_t>(g.rows()) * g.cols()]);
      im2col(cptr, g, cols.get(), ld);
      cptr = cols.get();
    }
    MapMat<T>(optr, cout, g.cols()).noalias() = wmat * ConstMapMat<T>(cptr, g.rows(), g.cols());
  } else {
    std::unique_ptr<T[]> cols(new T[static_cast<std::size_t>(g.rows()) * ld]);
    for (int n = 0; n < batch; ++n) {
      im2col(input.data().data() + n * in_stride, g, cols.get() + n * g.cols(), ld);
    }
    RowMat<T> prod(cout, static_cast<Eigen::Index>(ld));
    prod.noalias() = wmat * ConstMapMat<T>(cols.get(), g.rows(), static_cast<Eigen::Index>(ld));
    for (int n = 0; n < batch; ++n) {
      MapMat<T>(optr + n * out_stride, cout, g.cols()) = prod.middleCols(n * g.cols(), g.cols());
    }
  }
  for (int n = 0; n < batch; ++n) {
    MapMat<T> omat(optr + n * out_stride, cout, g.cols());
    for (int co = 0; co < cout; ++co) omat.row(co).array() += bptr[co];
  }

  detail::record<T>(out, {input, weight, bias}, [g, cout](TensorNode<T>& o) {
    auto& in = *o.inputs[0];
    auto& wt = *o.inputs[1];
    auto& bs = *o.inputs[2];
    const int batch = o.shape.n;
    const std::size_t ld = static_cast<std::size_t>(batch) * g.cols();
    const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(cout) * g.cols();
    const ConstMapMat<T> wmat(wt.value.data(), cout, g.rows());
    const auto cols_n = static_cast<Eigen::Index>(ld);

    if (wants_grad(bs)) {
      auto& gb = bs.grad_buffer();
      for (int n = 0; n < batch; ++n) {
        // Plain loop: Eigen's vectorised sum peels by address, which would make
        // the rounding depend on where the buffer happens to live.
        for (int co = 0; co < cout; ++co) {
          const T* row = o.grad.data() + n * out_stride + co * g.cols();
          T acc = T(0);
          for (int j = 0; j < g.cols(); ++j) acc += row[j];
          gb[co] += acc;
        }
      }
    }
    if (!wants_grad(wt) && !wants_grad(in)) return;

    // Upstream gradient as [cout, batch*cols].
    RowMat<T> gout(cout, cols_n);
    for (int n = 0; n < batch; ++n) {
      gout.middleCols(n * g.cols(), g.cols()) =
          ConstMapMat<T>(o.grad.data() + n * out_stride, cout, g.cols());
    }
    if (wants_grad(wt)) {
      std::unique_ptr<T[]> cols(new T[static_cast<std::size_t>(g.rows()) * ld]);
      for (int n = 0; n < batch; ++n) {
        im2col(in.value.data() + n * in_stride, g, cols.get() + n * g.cols(), ld);
      }
      MapMat<T> gw(wt.grad_buffer().data(), cout, g.rows());
      gw.noalias() += gout * ConstMapMat<T>(cols.get(), g.rows(), cols_n).transpose();
    }
    if (wants_grad(in)) {
      RowMat<T> gcols(g.rows(), cols_n);
      gcols.noalias() = wmat.transpose() * gout;
      T* gin = in.grad_buffer().data();
      for (int n = 0; n < batch; ++n) {
        col2im_add(gcols.data() + n * g.cols(), g, gin + n * in_stride, ld);
      }
    }
  });
  return out;
}

namespace {

// Bilinear tap set for one sample position. Index pairs are (lo, lo+1) with
// lo = ceil(s) - 1, which equals floor(s) except at integers.
template <typename T>
struct Taps {
  int x0, y0;
  T wx0, wx1, wy0, wy1;
  bool any;
};

template <typename T>
Taps<T> make_taps(T sx, T sy, int h, int w) {
  Taps<T> t{};
  // Every tap is outside unless sx in (-1, w] and sy in (-1, h].
  if (!(sx > T(-1) && sx <= T(w) && sy > T(-1) && sy <= T(h))) {
    t.any = false;
    return t;
  }
  t.any = true;
  t.x0 = static_cast<int>(std::ceil(sx)) - 1;
  t.y0 = static_cast<int>(std::ceil(sy)) - 1;
  t.wx1 = sx - T(t.x0);
  t.wx0 = T(1) - t.wx1;
  t.wy1 = sy - T(t.y0);
  t.wy0 = T(1) - t.wy1;
  return t;
}

}  // namespace

template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& flow) {
  const Shape& is = input.shape();
  const Shape& fs = flow.shape();
  if (fs.c != 2) {
    throw ShapeError("grid_sample_bilinear: flow must have 2 channels, got " +
                     fs.str());
  }
  if (fs.n != is.n || fs.h != is.h || fs.w != is.w) {
    throw ShapeError("grid_sample_bilinear: input " + is.str() +
                     " and flow " + fs.str() + " disagree");
  }
  const int H = is.h, W = is.w, C = is.c;
  const std::size_t plane = is.plane();
  Tensor<T> out(is);
  T* optr = out.mutable_data().data();
  const T* iptr = input.data().data();
  const T* fptr = flow.data().data();
  for (int n = 0; n < is.n; ++n) {
    const T* fx = fptr + (2 * n) * plane;
    const T* fy = fx + plane;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * W + x;
        const auto t = make_taps<T>(T(x) + fx[p], T(y) + fy[p], H, W);
        if (!t.any) continue;
        const bool x0in = t.x0 >= 0, x1in = t.x0 + 1 < W;
        const bool y0in = t.y0 >= 0, y1in = t.y0 + 1 < H;
        const std::ptrdiff_t i00 = static_cast<std::ptrdiff_t>(t.y0) * W + t.x0;
        for (int c = 0; c < C; ++c) {
          const T* img = iptr + (static_cast<std::size_t>(n) * C + c) * plane;
          const T v00 = (y0in && x0in) ? img[i00] : T(0);
          const T v01 = (y0in && x1in) ? img[i00 + 1] : T(0);
          const T v10 = (y1in && x0in) ? img[i00 + W] : T(0);
          const T v11 = (y1in && x1in) ? img[i00 + W + 1] : T(0);
          optr[(static_cast<std::size_t>(n) * C + c) * plane + p] =
              t.wy0 * (t.wx0 * v00 + t.wx1 * v01) +
              t.wy1 * (t.wx0 * v10 + t.wx1 * v11);
        }
      }
    }
  }

  detail::record<T>(out, {input, flow}, [](TensorNode<T>& o) {
    auto& in = *o.inputs[0];
    auto& fl = *o.inputs[1];
    const Shape& s = in.shape;
    const int H = s.h, W = s.w, C = s.c;
    const std::size_t plane = s.plane();
    T* gin = wants_grad(in) ? in.grad_buffer().data() : nullptr;
    T* gfl = wants_grad(fl) ? fl.grad_buffer().data() : nullptr;
    const T* go = o.grad.data();
    for (int n = 0; n < s.n; ++n) {
      const T* fx = fl.value.data() + (2 * n) * plane;
      const T* fy = fx + plane;
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * W + x;
          const auto t = make_taps<T>(T(x) + fx[p], T(y) + fy[p], H, W);
          if (!t.any) continue;
          const bool x0in = t.x0 >= 0, x1in = t.x0 + 1 < W;
          const bool y0in = t.y0 >= 0, y1in = t.y0 + 1 < H;
          const std::ptrdiff_t i00 = static_cast<std::ptrdiff_t>(t.y0) * W + t.x0;
          T dsx = T(0), dsy = T(0);
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            const T g = go[base + p];
            if (g == T(0)) continue;
            const T* img = in.value.data() + base;
            const T v00 = (y0in && x0in) ? img[i00] : T(0);
            const T v01 = (y0in && x1in) ? img[i00 + 1] : T(0);
            const T v10 = (y1in && x0in) ? img[i00 + W] : T(0);
            const T v11 = (y1in && x1in) ? img[i00 + W + 1] : T(0);
            if (gin) {
              T* gi = gin + base;
              if (y0in && x0in) gi[i00] += g * t.wy0 * t.wx0;
              if (y0in && x1in) gi[i00 + 1] += g * t.wy0 * t.wx1;
              if (y1in && x0in) gi[i00 + W] += g * t.wy1 * t.wx0;
              if (y1in && x1in) gi[i00 + W + 1] += g * t.wy1 * t.wx1;
            }
            dsx += g * (t.wy0 * (v01 - v00) + t.wy1 * (v11 - v10));
            dsy += g * (t.wx0 * (v10 - v00) + t.wx1 * (v11 - v01));
          }
          if (gfl) {
            gfl[(2 * n) * plane + p] += dsx;
            gfl[(2 * n + 1) * plane + p] += dsy;
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  if (s.c < 1) throw ShapeError("channel_softmax: needs K >= 1, got " + s.str());
  Tensor<T> out(s);
  const std::size_t plane = s.plane();
  const T* in = logits.data().data();
  T* o = out.mutable_data().data();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = in[base + p];
      for (int k = 1; k < s.c; ++k) mx = std::max(mx, in[base + k * plane + p]);
      T total = T(0);
      for (int k = 0; k < s.c; ++k) {
        const T e = std::exp(in[base + k * plane + p] - mx);
        o[base + k * plane + p] = e;
        total += e;
      }
      for (int k = 0; k < s.c; ++k) o[base + k * plane + p] /= total;
    }
  }
  detail::record<T>(out, {logits}, [](TensorNode<T>& node) {
    auto& in = *node.inputs[0];
    const Shape& s = node.shape;
    const std::size_t plane = s.plane();
    auto& gi = in.grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        T dot = T(0);
        for (int k = 0; k < s.c; ++k) {
          const std::size_t i = base + k * plane + p;
          dot += node.grad[i] * node.value[i];
        }
        for (int k = 0; k < s.c; ++k) {
          const std::size_t i = base + k * plane + p;
          gi[i] += node.value[i] * (node.grad[i] - dot);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> per_pixel_inner_product(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "per_pixel_inner_product");
  const Shape& s = a.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(Shape{s.n, 1, s.h, s.w});
  T* o = out.mutable_data().data();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        o[n * plane + p] += a.data()[base + p] * b.data()[base + p];
      }
    }
  }
  detail::record<T>(out, {a, b}, [](TensorNode<T>& node) {
    auto& na = *node.inputs[0];
    auto& nb = *node.inputs[1];
    const Shape& s = na.shape;
    const std::size_t plane = s.plane();
    T* ga = wants_grad(na) ? na.grad_buffer().data() : nullptr;
    T* gb = wants_grad(nb) ? nb.grad_buffer().data() : nullptr;
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * s.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const T g = node.grad[n * plane + p];
          if (ga) ga[base + p] += g * nb.value[base + p];
          if (gb) gb[base + p] += g * na.value[base + p];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  detail::record<T>(out, {a, b}, [](TensorNode<T>& node) {
    for (auto& in : node.inputs) {
      if (!wants_grad(*in)) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
  detail::record<T>(out, {a, b}, [](TensorNode<T>& node) {
    if (wants_grad(*node.inputs[0])) {
      auto& g = node.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
    if (wants_grad(*node.inputs[1])) {
      auto& g = node.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= node.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  detail::record<T>(out, {a, b}, [](TensorNode<T>& node) {
    auto& na = *node.inputs[0];
    auto& nb = *node.inputs[1];
    if (wants_grad(na)) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * nb.value[i];
    }
    if (wants_grad(nb)) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * na.value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * factor;
  detail::record<T>(out, {a}, [factor](TensorNode<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> multiply_broadcast_channel(const Tensor<T>& weights,
                                     const Tensor<T>& feature) {
  const Shape& ws = weights.shape();
  const Shape& fs = feature.shape();
  if (ws.c != 1 || ws.n != fs.n || ws.h != fs.h || ws.w != fs.w) {
    throw ShapeError("multiply_broadcast_channel: weights " + ws.str() +
                     " cannot broadcast over feature " + fs.str());
  }
  const std::size_t plane = fs.plane();
  Tensor<T> out(fs);
  T* o = out.mutable_data().data();
  for (int n = 0; n < fs.n; ++n) {
    const T* wp = weights.data().data() + n * plane;
    for (int c = 0; c < fs.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * fs.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        o[base + p] = wp[p] * feature.data()[base + p];
      }
    }
  }
  detail::record<T>(out, {weights, feature}, [](TensorNode<T>& node) {
    auto& nw = *node.inputs[0];
    auto& nf = *node.inputs[1];
    const Shape& fs = nf.shape;
    const std::size_t plane = fs.plane();
    T* gw = wants_grad(nw) ? nw.grad_buffer().data() : nullptr;
    T* gf = wants_grad(nf) ? nf.grad_buffer().data() : nullptr;
    for (int n = 0; n < fs.n; ++n) {
      for (int c = 0; c < fs.c; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * fs.c + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const T g = node.grad[base + p];
          if (gw) gw[n * plane + p] += g * nf.value[base + p];
          if (gf) gf[base + p] += g * nw.value[n * plane + p];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count) {
  const Shape& s = x.shape();
  if (start < 0 || count < 0 || start + count > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + s.str());
  }
  const std::size_t plane = s.plane();
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  T* o = out.mutable_data().data();
  for (int n = 0; n < s.n; ++n) {
    const T* src = x.data().data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
    std::copy(src, src + count * plane, o + static_cast<std::size_t>(n) * count * plane);
  }
  detail::record<T>(out, {x}, [start, count](TensorNode<T>& node) {
    auto& in = *node.inputs[0];
    const Shape& s = in.shape;
    const std::size_t plane = s.plane();
    auto& g = in.grad_buffer();
    for (int n = 0; n < s.n; ++n) {
      T* dst = g.data() + (static_cast<std::size_t>(n) * s.c + start) * plane;
      const T* src = node.grad.data() + static_cast<std::size_t>(n) * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  int channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: " + s.str() + " incompatible with " +
                       first.str());
    }
    channels += s.c;
  }
  const std::size_t plane = first.plane();
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  T* o = out.mutable_data().data();
  for (int n = 0; n < first.n; ++n) {
    T* dst = o + static_cast<std::size_t>(n) * channels * plane;
    for (const auto& p : parts) {
      const std::size_t len = static_cast<std::size_t>(p.shape().c) * plane;
      const T* src = p.data().data() + n * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
  detail::record<T>(out, std::move(inputs), [channels](TensorNode<T>& node) {
    const Shape& s = node.shape;
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const T* src = node.grad.data() + static_cast<std::size_t>(n) * channels * plane;
      for (auto& in : node.inputs) {
        const std::size_t len = static_cast<std::size_t>(in->shape.c) * plane;
        if (wants_grad(*in)) {
          T* dst = in->grad_buffer().data() + n * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        src += len;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T v = x.data()[i];
    o[i] = v > T(0) ? v : slope * v;
  }
  detail::record<T>(out, {x}, [slope](TensorNode<T>& node) {
    auto& in = *node.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += in.value[i] > T(0) ? node.grad[i] : slope * node.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> soft_clamp(const Tensor<T>& x, T bound) {
  if (!(bound > T(0))) throw ConfigError("soft_clamp bound must be positive");
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = bound * std::tanh(x.data()[i] / bound);
  detail::record<T>(out, {x}, [bound](TensorNode<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T t = node.value[i] / bound;
      g[i] += (T(1) - t * t) * node.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> pixel_norm(const Tensor<T>& x, T epsilon) {
  if (!(epsilon > T(0))) throw ConfigError("pixel_norm epsilon must be positive");
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  const auto in = x.data();
  std::vector<T> inv_rms(static_cast<std::size_t>(s.n) * plane);
  Tensor<T> out(s);
  auto o = out.mutable_data();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      T ms = T(0);
      for (int c = 0; c < s.c; ++c) ms += in[base + c * plane + px] * in[base + c * plane + px];
      const T r = T(1) / std::sqrt(ms / s.c + epsilon);
      inv_rms[n * plane + px] = r;
      for (int c = 0; c < s.c; ++c) o[base + c * plane + px] = in[base + c * plane + px] * r;
    }
  }
  detail::record<T>(out, {x}, [s, plane, inv_rms = std::move(inv_rms)](TensorNode<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    const auto& y = node.value;
    const auto& gy = node.grad;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t px = 0; px < plane; ++px) {
        T dot = T(0);
        for (int c = 0; c < s.c; ++c) dot += gy[base + c * plane + px] * y[base + c * plane + px];
        dot /= s.c;
        const T r = inv_rms[n * plane + px];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = base + c * plane + px;
          g[i] += r * (gy[i] - y[i] * dot);
        }
      }
    }
  });
  return out;
}

namespace {

struct ResizeTap {
  int i0, i1;
  double w1;
};

std::vector<ResizeTap> resize_taps(int in, int out) {
  std::vector<ResizeTap> taps(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  if (out_h < 1 || out_w < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("resize_bilinear: cannot resize " + s.str() + " to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const auto ty = resize_taps(s.h, out_h);
  const auto tx = resize_taps(s.w, out_w);
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  T* o = out.mutable_data().data();
  const std::size_t in_plane = s.plane();
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x.data().data() + nc * in_plane;
    T* dst = o + nc * out_plane;
    for (int y = 0; y < out_h; ++y) {
      const T wy1 = static_cast<T>(ty[y].w1), wy0 = T(1) - wy1;
      const T* r0 = src + static_cast<std::size_t>(ty[y].i0) * s.w;
      const T* r1 = src + static_cast<std::size_t>(ty[y].i1) * s.w;
      for (int xo = 0; xo < out_w; ++xo) {
        const T wx1 = static_cast<T>(tx[xo].w1), wx0 = T(1) - wx1;
        dst[y * out_w + xo] = wy0 * (wx0 * r0[tx[xo].i0] + wx1 * r0[tx[xo].i1]) +
                              wy1 * (wx0 * r1[tx[xo].i0] + wx1 * r1[tx[xo].i1]);
      }
    }
  }
  detail::record<T>(out, {x}, [ty, tx](TensorNode<T>& node) {
    auto& in = *node.inputs[0];
    const Shape& s = in.shape;
    const int out_h = node.shape.h, out_w = node.shape.w;
    const std::size_t in_plane = s.plane();
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    auto& g = in.grad_buffer();
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      T* dst = g.data() + nc * in_plane;
      const T* go = node.grad.data() + nc * out_plane;
      for (int y = 0; y < out_h; ++y) {
        const T wy1 = static_cast<T>(ty[y].w1), wy0 = T(1) - wy1;
        T* r0 = dst + static_cast<std::size_t>(ty[y].i0) * s.w;
        T* r1 = dst + static_cast<std::size_t>(ty[y].i1) * s.w;
        for (int xo = 0; xo < out_w; ++xo) {
          const T gv = go[y * out_w + xo];
          const T wx1 = static_cast<T>(tx[xo].w1), wx0 = T(1) - wx1;
          r0[tx[xo].i0] += gv * wy0 * wx0;
          r0[tx[xo].i1] += gv * wy0 * wx1;
          r1[tx[xo].i0] += gv * wy1 * wx0;
          r1[tx[xo].i1] += gv * wy1 * wx1;
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& x) {
  return resize_bilinear(x, 2 * x.shape().h, 2 * x.shape().w);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto out = Tensor<T>::scalar(total);
  detail::record<T>(out, {x}, [](TensorNode<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    const T go = node.grad[0];
    for (auto& v : g) v += go;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred.shape(), target.shape(), "l1_loss");
  const std::size_t count = pred.numel();
  T total = T(0);
  for (std::size_t i = 0; i < count; ++i) {
    total += std::abs(pred.data()[i] - target.data()[i]);
  }
  auto out = Tensor<T>::scalar(total / static_cast<T>(count));
  detail::record<T>(out, {pred, target}, [count](TensorNode<T>& node) {
    auto& p = *node.inputs[0];
    auto& t = *node.inputs[1];
    const T g = node.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = p.value[i] - t.value[i];
      const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
      if (wants_grad(p)) p.grad_buffer()[i] += s;
      if (wants_grad(t)) t.grad_buffer()[i] -= s;
    }
  });
  return out;
}

template <typename T>
Tensor<T> charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& target,
                           T epsilon) {
  require_same(pred.shape(), target.shape(), "charbonnier_loss");
  const std::size_t count = pred.numel();
  const T eps2 = epsilon * epsilon;
  T total = T(0);
  for (std::size_t i = 0; i < count; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    total += std::sqrt(d * d + eps2);
  }
  auto out = Tensor<T>::scalar(total / static_cast<T>(count));
  detail::record<T>(out, {pred, target}, [count, eps2](TensorNode<T>& node) {
    auto& p = *node.inputs[0];
    auto& t = *node.inputs[1];
    const T g = node.grad[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = p.value[i] - t.value[i];
      const T s = g * d / std::sqrt(d * d + eps2);
      if (wants_grad(p)) p.grad_buffer()[i] += s;
      if (wants_grad(t)) t.grad_buffer()[i] -= s;
    }
  });
  return out;
}

#define MANET_INSTANTIATE_OPS(T)                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                            int, int);                                             \
  template Tensor<T> grid_sample_bilinear(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> channel_softmax(const Tensor<T>&);                            \
  template Tensor<T> per_pixel_inner_product(const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                   \
  template Tensor<T> multiply_broadcast_channel(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);                   \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                  \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                              \
  template Tensor<T> soft_clamp(const Tensor<T>&, T);                              \
  template Tensor<T> pixel_norm(const Tensor<T>&, T);                              \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                  \
  template Tensor<T> bilinear_upsample_2x(const Tensor<T>&);                       \
  template Tensor<T> sum(const Tensor<T>&);                                        \
  template Tensor<T> mean(const Tensor<T>&);                                       \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> charbonnier_loss(const Tensor<T>&, const Tensor<T>&, T);

MANET_INSTANTIATE_OPS(float)
MANET_INSTANTIATE_OPS(double)

#undef MANET_INSTANTIATE_OPS

}  // namespace manet::ops
