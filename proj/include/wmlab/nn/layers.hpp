#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "wmlab/nn/tensor.hpp"

namespace wmlab::nn {

/// Trainable buffer with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  void resize(std::size_t n) {
    value.assign(n, 0.0f);
    grad.assign(n, 0.0f);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// 2-D convolution with square kernel, zero padding.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int cin, int cout, int kernel, int stride, int pad);

  void init(std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  /// Accumulates parameter gradients, returns the input gradient.
  Tensor backward(const Tensor& x, const Tensor& grad_out);

  int out_size(int in) const { return (in + 2 * pad_ - kernel_) / stride_ + 1; }
  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }

  Param weight;  // [cout][cin * k * k]
  Param bias;    // [cout]

 private:
  void im2col(const float* x, int h, int w, float* cols) const;
  void col2im(const float* cols, int h, int w, float* x) const;

  int cin_ = 0;
  int cout_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int pad_ = 0;
};

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
class Upsample2x {
 public:
  Upsample2x() = default;
  Upsample2x(std::string name, int cin, int cout);

  void init(std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out);

  Param weight;  // [cout * 4][cin]
  Param bias;    // [cout]

 private:
  int cin_ = 0;
  int cout_ = 0;
};

void relu_inplace(Tensor& t);
void leaky_relu_inplace(Tensor& t, float slope);
void sigmoid_inplace(Tensor& t);
/// grad *= (activation > 0), using the post-activation output.
void relu_backward_inplace(Tensor& grad, const Tensor& activated);
void leaky_relu_backward_inplace(Tensor& grad, const Tensor& activated,
                                 float slope);
void sigmoid_backward_inplace(Tensor& grad, const Tensor& activated);
void add_inplace(Tensor& a, const Tensor& b);

}  // namespace wmlab::nn
