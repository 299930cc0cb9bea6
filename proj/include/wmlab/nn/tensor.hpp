#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace wmlab::nn {

/// Dense NCHW float tensor.
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return v.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample() const { return static_cast<std::size_t>(c) * h * w; }

  float* sample_ptr(int i) { return v.data() + sample() * i; }
  const float* sample_ptr(int i) const { return v.data() + sample() * i; }

  float& at(int ni, int ci, int y, int x) {
    return v[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
  }
  float at(int ni, int ci, int y, int x) const {
    return v[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }
  void zero() { std::fill(v.begin(), v.end(), 0.0f); }
};

inline void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": tensor shape " +
                                a.shape_str() + " vs " + b.shape_str());
  }
}

/// Concatenate along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Concatenate along the batch axis.
Tensor concat_batch(const std::vector<const Tensor*>& parts);
/// Rows [first, first + count) of the batch.
Tensor slice_batch(const Tensor& t, int first, int count);
/// Leading `channels` channels of every sample.
Tensor slice_channels(const Tensor& t, int channels);

}  // namespace wmlab::nn
