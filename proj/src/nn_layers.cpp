#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "wmlab/nn/layers.hpp"

namespace wmlab::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void uniform_fill(std::vector<float>& v, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& x : v) x = dist(rng);
}

// Eigen's vectorised reductions peel by pointer alignment, which makes the
// result depend on where the heap put a buffer. Fixed order keeps runs
// bit-reproducible.
float ordered_sum(const float* v, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += v[i];
  return acc;
}

}  // namespace

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("concat_channels: " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor out(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy_n(a.sample_ptr(i), a.sample(), out.sample_ptr(i));
    std::copy_n(b.sample_ptr(i), b.sample(), out.sample_ptr(i) + a.sample());
  }
  return out;
}

Tensor concat_batch(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: no parts");
  const Tensor& f = *parts.front();
  int n = 0;
  for (const Tensor* p : parts) {
    if (p->c != f.c || p->h != f.h || p->w != f.w) {
      throw std::invalid_argument("concat_batch: " + p->shape_str() + " vs " +
                                  f.shape_str());
    }
    n += p->n;
  }
  Tensor out(n, f.c, f.h, f.w);
  auto it = out.v.begin();
  for (const Tensor* p : parts) it = std::copy(p->v.begin(), p->v.end(), it);
  return out;
}

Tensor slice_batch(const Tensor& t, int first, int count) {
  if (first < 0 || count < 0 || first + count > t.n) {
    throw std::out_of_range("slice_batch: range outside batch");
  }
  Tensor out(count, t.c, t.h, t.w);
  std::copy_n(t.sample_ptr(first), out.size(), out.v.begin());
  return out;
}

Tensor slice_channels(const Tensor& t, int channels) {
  if (channels > t.c) throw std::out_of_range("slice_channels");
  Tensor out(t.n, channels, t.h, t.w);
  for (int i = 0; i < t.n; ++i) {
    std::copy_n(t.sample_ptr(i), out.sample(), out.sample_ptr(i));
  }
  return out;
}

Conv2d::Conv2d(std::string name, int cin, int cout, int kernel, int stride,
               int pad)
    : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride), pad_(pad) {
  weight.name = name + ".weight";
  bias.name = name + ".bias";
  weight.resize(static_cast<std::size_t>(cout) * cin * kernel * kernel);
  bias.resize(cout);
}

void Conv2d::init(std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(cin_ * kernel_ * kernel_));
  uniform_fill(weight.value, bound, rng);
  uniform_fill(bias.value, bound, rng);
}

void Conv2d::im2col(const float* x, int h, int w, float* cols) const {
  const int oh = out_size(h);
  const int ow = out_size(w);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::size_t row = 0;
  for (int c = 0; c < cin_; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx, ++row) {
        float* dst = cols + row * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          float* d = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill_n(d, ow, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * w;
          if (stride_ == 1) {
            // Valid output columns form one contiguous run.
            const int shift = kx - pad_;
            const int lo = std::max(0, -shift);
            const int hi = std::min(ow, w - shift);
            std::fill_n(d, lo, 0.0f);
            if (hi > lo) std::copy_n(src + lo + shift, hi - lo, d + lo);
            std::fill_n(d + std::max(hi, lo), ow - std::max(hi, lo), 0.0f);
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride_ - pad_ + kx;
            d[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const float* cols, int h, int w, float* x) const {
  const int oh = out_size(h);
  const int ow = out_size(w);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::fill_n(x, static_cast<std::size_t>(cin_) * h * w, 0.0f);
  std::size_t row = 0;
  for (int c = 0; c < cin_; ++c) {
    float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx, ++row) {
        const float* src = cols + row * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          const float* s = src + static_cast<std::size_t>(oy) * ow;
          float* d = xc + static_cast<std::size_t>(iy) * w;
          if (stride_ == 1) {
            const int shift = kx - pad_;
            const int lo = std::max(0, -shift);
            const int hi = std::min(ow, w - shift);
            for (int ox = lo; ox < hi; ++ox) d[ox + shift] += s[ox];
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride_ - pad_ + kx;
            if (ix >= 0 && ix < w) d[ix] += s[ox];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.c != cin_) {
    throw std::invalid_argument("Conv2d " + weight.name + ": expected " +
                                std::to_string(cin_) + " channels, got " +
                                x.shape_str());
  }
  const int oh = out_size(x.h);
  const int ow = out_size(x.w);
  if (oh < 1 || ow < 1) {
    throw std::invalid_argument("Conv2d " + weight.name + ": input too small " +
                                x.shape_str());
  }
  Tensor y(x.n, cout_, oh, ow);
  const int k = cin_ * kernel_ * kernel_;
  const int p = oh * ow;
  const bool direct = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<float> cols(direct ? 0 : static_cast<std::size_t>(k) * p);
  CMapMat wm(weight.value.data(), cout_, k);
  for (int i = 0; i < x.n; ++i) {
    const float* src = x.sample_ptr(i);
    if (!direct) {
      im2col(src, x.h, x.w, cols.data());
      src = cols.data();
    }
    MapMat ym(y.sample_ptr(i), cout_, p);
    ym.noalias() = wm * CMapMat(src, k, p);
    for (int o = 0; o < cout_; ++o) ym.row(o).array() += bias.value[o];
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out) {
  const int oh = out_size(x.h);
  const int ow = out_size(x.w);
  const int k = cin_ * kernel_ * kernel_;
  const int p = oh * ow;
  const bool direct = kernel_ == 1 && stride_ == 1 && pad_ == 0;
  Tensor gx(x.n, cin_, x.h, x.w);
  std::vector<float> cols(direct ? 0 : static_cast<std::size_t>(k) * p);
  std::vector<float> gcols(direct ? 0 : static_cast<std::size_t>(k) * p);
  CMapMat wm(weight.value.data(), cout_, k);
  MapMat gw(weight.grad.data(), cout_, k);
  for (int i = 0; i < x.n; ++i) {
    CMapMat gy(grad_out.sample_ptr(i), cout_, p);
    const float* src = x.sample_ptr(i);
    if (!direct) {
      im2col(src, x.h, x.w, cols.data());
      src = cols.data();
    }
    gw.noalias() += gy * CMapMat(src, k, p).transpose();
    for (int o = 0; o < cout_; ++o) bias.grad[o] += ordered_sum(gy.row(o).data(), p);
    if (direct) {
      MapMat(gx.sample_ptr(i), k, p).noalias() = wm.transpose() * gy;
    } else {
      MapMat(gcols.data(), k, p).noalias() = wm.transpose() * gy;
      col2im(gcols.data(), x.h, x.w, gx.sample_ptr(i));
    }
  }
  return gx;
}

Upsample2x::Upsample2x(std::string name, int cin, int cout)
    : cin_(cin), cout_(cout) {
  weight.name = name + ".weight";
  bias.name = name + ".bias";
  weight.resize(static_cast<std::size_t>(cout) * 4 * cin);
  bias.resize(cout);
}

void Upsample2x::init(std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(cin_ * 4));
  uniform_fill(weight.value, bound, rng);
  uniform_fill(bias.value, bound, rng);
}

// Row (o * 4 + dy * 2 + dx) of the weight produces output pixel
// (2y + dy, 2x + dx) of channel o.
Tensor Upsample2x::forward(const Tensor& x) const {
  if (x.c != cin_) {
    throw std::invalid_argument("Upsample2x " + weight.name + ": expected " +
                                std::to_string(cin_) + " channels, got " +
                                x.shape_str());
  }
  Tensor y(x.n, cout_, x.h * 2, x.w * 2);
  const int p = x.h * x.w;
  RowMat tmp(cout_ * 4, p);
  CMapMat wm(weight.value.data(), cout_ * 4, cin_);
  for (int i = 0; i < x.n; ++i) {
    tmp.noalias() = wm * CMapMat(x.sample_ptr(i), cin_, p);
    for (int o = 0; o < cout_; ++o) {
      for (int d = 0; d < 4; ++d) {
        const int dy = d / 2, dx = d % 2;
        const float* s = tmp.row(o * 4 + d).data();
        for (int yy = 0; yy < x.h; ++yy)
          for (int xx = 0; xx < x.w; ++xx)
            y.at(i, o, 2 * yy + dy, 2 * xx + dx) =
                s[yy * x.w + xx] + bias.value[o];
      }
    }
  }
  return y;
}

Tensor Upsample2x::backward(const Tensor& x, const Tensor& grad_out) {
  Tensor gx(x.n, cin_, x.h, x.w);
  const int p = x.h * x.w;
  RowMat g(cout_ * 4, p);
  CMapMat wm(weight.value.data(), cout_ * 4, cin_);
  MapMat gw(weight.grad.data(), cout_ * 4, cin_);
  for (int i = 0; i < x.n; ++i) {
    for (int o = 0; o < cout_; ++o) {
      for (int d = 0; d < 4; ++d) {
        const int dy = d / 2, dx = d % 2;
        float* s = g.row(o * 4 + d).data();
        for (int yy = 0; yy < x.h; ++yy)
          for (int xx = 0; xx < x.w; ++xx)
            s[yy * x.w + xx] = grad_out.at(i, o, 2 * yy + dy, 2 * xx + dx);
      }
      bias.grad[o] += ordered_sum(g.row(o * 4).data(), 4 * p);
    }
    CMapMat xm(x.sample_ptr(i), cin_, p);
    gw.noalias() += g * xm.transpose();
    MapMat(gx.sample_ptr(i), cin_, p).noalias() = wm.transpose() * g;
  }
  return gx;
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.v) v = v > 0.0f ? v : 0.0f;
}

void leaky_relu_inplace(Tensor& t, float slope) {
  for (auto& v : t.v) v = v > 0.0f ? v : slope * v;
}

void sigmoid_inplace(Tensor& t) {
  for (auto& v : t.v) v = 1.0f / (1.0f + std::exp(-v));
}

void relu_backward_inplace(Tensor& grad, const Tensor& activated) {
  for (std::size_t i = 0; i < grad.v.size(); ++i)
    if (activated.v[i] <= 0.0f) grad.v[i] = 0.0f;
}

void leaky_relu_backward_inplace(Tensor& grad, const Tensor& activated,
                                 float slope) {
  for (std::size_t i = 0; i < grad.v.size(); ++i)
    if (activated.v[i] <= 0.0f) grad.v[i] *= slope;
}

void sigmoid_backward_inplace(Tensor& grad, const Tensor& activated) {
  for (std::size_t i = 0; i < grad.v.size(); ++i) {
    const float s = activated.v[i];
    grad.v[i] *= s * (1.0f - s);
  }
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

}  // namespace wmlab::nn
