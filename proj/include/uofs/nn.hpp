#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "uofs/box.hpp"
#include "uofs/error.hpp"
#include "uofs/rng.hpp"

namespace uofs {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// N feature maps of shape C x H x W stored as a C x (N*H*W) matrix;
// column n*H*W + y*W + x holds the channel vector at (n, y, x).
template <class T>
struct FeatureBatch {
  int channels = 0, height = 0, width = 0, count = 0;
  Mat<T> data;

  FeatureBatch() = default;
  FeatureBatch(int c, int h, int w, int n)
      : channels(c), height(h), width(w), count(n), data(Mat<T>::Zero(c, Eigen::Index(n) * h * w)) {}

  int plane() const { return height * width; }
  Eigen::Index column(int n, int y, int x) const { return Eigen::Index(n) * plane() + y * width + x; }
  T& at(int c, int n, int y, int x) { return data(c, column(n, y, x)); }
  T at(int c, int n, int y, int x) const { return data(c, column(n, y, x)); }
};

template <class T>
inline T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

struct ConvShape {
  int in = 0, out = 0, kernel = 1, stride = 1, pad = 0;
};

template <class T>
struct Conv2d {
  ConvShape shape;
  Mat<T> weight;  // out x (kernel*kernel*in), column (ky*k + kx)*in + c
  Vec<T> bias;
  Mat<T> weight_grad;
  Vec<T> bias_grad;

  struct Cache {
    Mat<T> cols;
    int in_h = 0, in_w = 0, count = 0;
  };

  Conv2d() = default;
  explicit Conv2d(ConvShape s)
      : shape(s),
        weight(Mat<T>::Zero(s.out, s.kernel * s.kernel * s.in)),
        bias(Vec<T>::Zero(s.out)),
        weight_grad(Mat<T>::Zero(s.out, s.kernel * s.kernel * s.in)),
        bias_grad(Vec<T>::Zero(s.out)) {}

  int out_size(int n) const { return (n + 2 * shape.pad - shape.kernel) / shape.stride + 1; }

  // He-normal weights scaled by `gain`, zero bias.
  void init(Rng& rng, double gain = 1.0) {
    const double std = gain * std::sqrt(2.0 / (shape.kernel * shape.kernel * shape.in));
    for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = T(std * rng.normal());
    bias.setZero();
  }

  void zero_grad() {
    weight_grad.setZero();
    bias_grad.setZero();
  }

  Mat<T> im2col(const FeatureBatch<T>& x, int oh, int ow) const {
    const int k = shape.kernel, C = shape.in;
    Mat<T> cols = Mat<T>::Zero(Eigen::Index(k) * k * C, Eigen::Index(x.count) * oh * ow);
    for (int n = 0; n < x.count; ++n)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Eigen::Index col = (Eigen::Index(n) * oh + oy) * ow + ox;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * shape.stride - shape.pad + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * shape.stride - shape.pad + kx;
              if (ix < 0 || ix >= x.width) continue;
              cols.block((ky * k + kx) * C, col, C, 1) = x.data.col(x.column(n, iy, ix));
            }
          }
        }
    return cols;
  }

  FeatureBatch<T> forward(const FeatureBatch<T>& x, Cache* cache = nullptr) const {
    if (x.channels != shape.in) throw std::invalid_argument("conv: channel mismatch");
    const int oh = out_size(x.height), ow = out_size(x.width);
    FeatureBatch<T> y;
    y.channels = shape.out;
    y.height = oh;
    y.width = ow;
    y.count = x.count;
    Mat<T> cols = im2col(x, oh, ow);
    y.data.noalias() = weight * cols;
    y.data.colwise() += bias;
    if (cache) {
      cache->cols = std::move(cols);
      cache->in_h = x.height;
      cache->in_w = x.width;
      cache->count = x.count;
    }
    return y;
  }

  // Accumulates parameter gradients; returns the input gradient when requested.
  FeatureBatch<T> backward(const FeatureBatch<T>& dy, const Cache& cache, bool input_grad = true) {
    weight_grad.noalias() += dy.data * cache.cols.transpose();
    bias_grad += dy.data.rowwise().sum();
    if (!input_grad) return {};
    const Mat<T> dcols = weight.transpose() * dy.data;
    FeatureBatch<T> dx(shape.in, cache.in_h, cache.in_w, cache.count);
    const int k = shape.kernel, C = shape.in;
    for (int n = 0; n < dy.count; ++n)
      for (int oy = 0; oy < dy.height; ++oy)
        for (int ox = 0; ox < dy.width; ++ox) {
          const Eigen::Index col = (Eigen::Index(n) * dy.height + oy) * dy.width + ox;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * shape.stride - shape.pad + ky;
            if (iy < 0 || iy >= cache.in_h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * shape.stride - shape.pad + kx;
              if (ix < 0 || ix >= cache.in_w) continue;
              dx.data.col(dx.column(n, iy, ix)) += dcols.block((ky * k + kx) * C, col, C, 1);
            }
          }
        }
    return dx;
  }
};

template <class T>
inline void relu_inplace(FeatureBatch<T>& x) {
  x.data = x.data.cwiseMax(T(0));
}

// dy masked by the forward output (y > 0).
template <class T>
inline void relu_backward_inplace(FeatureBatch<T>& dy, const FeatureBatch<T>& y) {
  dy.data = (y.data.array() > T(0)).select(dy.data, T(0));
}

// Per-proposal average over the spatial plane: C x N.
template <class T>
inline Mat<T> global_average(const FeatureBatch<T>& x) {
  Mat<T> out(x.channels, x.count);
  const int p = x.plane();
  for (int n = 0; n < x.count; ++n) out.col(n) = x.data.middleCols(Eigen::Index(n) * p, p).rowwise().sum() / T(p);
  return out;
}

template <class T>
inline FeatureBatch<T> global_average_backward(const Mat<T>& dout, int height, int width) {
  FeatureBatch<T> dx(int(dout.rows()), height, width, int(dout.cols()));
  const int p = height * width;
  for (int n = 0; n < dx.count; ++n)
    dx.data.middleCols(Eigen::Index(n) * p, p).colwise() = dout.col(n) / T(p);
  return dx;
}

// Bilinear ROI crop: each box is resampled to grid x grid points at bin
// centers, in feature coordinates u = x / stride - 0.5.
struct RoiSample {
  int idx[4];
  double w[4];
};

struct RoiAlignCache {
  std::vector<RoiSample> samples;  // count * grid * grid
  int height = 0, width = 0;
};

template <class T>
inline FeatureBatch<T> roi_align(const FeatureBatch<T>& fmap, std::span<const Box> boxes, int stride, int grid,
                                 RoiAlignCache* cache = nullptr) {
  if (fmap.count != 1) throw std::invalid_argument("roi_align expects one feature map");
  FeatureBatch<T> out(fmap.channels, grid, grid, int(boxes.size()));
  RoiAlignCache local;
  RoiAlignCache& c = cache ? *cache : local;
  c.samples.assign(boxes.size() * grid * grid, {});
  c.height = fmap.height;
  c.width = fmap.width;
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const Box& b = boxes[r];
    if (!(b.width() > 0 && b.height() > 0)) throw Error("roi_align: degenerate (zero-area) box");
    const double bw = b.width() / grid, bh = b.height() / grid;
    for (int i = 0; i < grid; ++i) {
      const double v = std::clamp((b.y1 + (i + 0.5) * bh) / stride - 0.5, 0.0, double(fmap.height - 1));
      const int y0 = int(v);
      const int y1 = std::min(y0 + 1, fmap.height - 1);
      const double wy = v - y0;
      for (int j = 0; j < grid; ++j) {
        const double u = std::clamp((b.x1 + (j + 0.5) * bw) / stride - 0.5, 0.0, double(fmap.width - 1));
        const int x0 = int(u);
        const int x1 = std::min(x0 + 1, fmap.width - 1);
        const double wx = u - x0;
        RoiSample s;
        s.idx[0] = y0 * fmap.width + x0;
        s.idx[1] = y0 * fmap.width + x1;
        s.idx[2] = y1 * fmap.width + x0;
        s.idx[3] = y1 * fmap.width + x1;
        s.w[0] = (1 - wy) * (1 - wx);
        s.w[1] = (1 - wy) * wx;
        s.w[2] = wy * (1 - wx);
        s.w[3] = wy * wx;
        const Eigen::Index col = out.column(int(r), i, j);
        auto dst = out.data.col(col);
        for (int q = 0; q < 4; ++q)
          if (s.w[q] != 0) dst += T(s.w[q]) * fmap.data.col(s.idx[q]);
        c.samples[col] = s;
      }
    }
  }
  return out;
}

template <class T>
inline FeatureBatch<T> roi_align_backward(const FeatureBatch<T>& dout, const RoiAlignCache& cache) {
  FeatureBatch<T> dmap(dout.channels, cache.height, cache.width, 1);
  for (Eigen::Index col = 0; col < dout.data.cols(); ++col) {
    const RoiSample& s = cache.samples[col];
    for (int q = 0; q < 4; ++q)
      if (s.w[q] != 0) dmap.data.col(s.idx[q]) += T(s.w[q]) * dout.data.col(col);
  }
  return dmap;
}

template <class T>
struct Linear {
  Mat<T> weight;  // out x in
  Vec<T> bias;
  Mat<T> weight_grad;
  Vec<T> bias_grad;

  Linear() = default;
  Linear(int in, int out)
      : weight(Mat<T>::Zero(out, in)), bias(Vec<T>::Zero(out)), weight_grad(Mat<T>::Zero(out, in)),
        bias_grad(Vec<T>::Zero(out)) {}

  void init(Rng& rng, double std) {
    for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = T(std * rng.normal());
    bias.setZero();
  }
  void zero_grad() {
    weight_grad.setZero();
    bias_grad.setZero();
  }
  Mat<T> forward(const Mat<T>& x) const {
    Mat<T> y = weight * x;
    y.colwise() += bias;
    return y;
  }
  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    weight_grad.noalias() += dy * x.transpose();
    bias_grad += dy.rowwise().sum();
    return weight.transpose() * dy;
  }
};

}  // namespace uofs
