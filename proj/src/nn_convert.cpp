#include "wmlab/nn/convert.hpp"

namespace wmlab::nn {

Tensor to_tensor(const std::vector<const ImageTensor*>& images) {
  if (images.empty()) throw std::invalid_argument("to_tensor: empty batch");
  const Shape s = images.front()->shape();
  Tensor t(static_cast<int>(images.size()), s.channels, s.height, s.width);
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images[i]->shape(), s, "to_tensor");
    const auto d = images[i]->data();
    float* out = t.sample_ptr(static_cast<int>(i));
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < s.channels; ++c)
        out[c * plane + p] = static_cast<float>(d[p * s.channels + c]);
  }
  return t;
}

Tensor to_tensor(const std::vector<ImageTensor>& images) {
  std::vector<const ImageTensor*> ptrs;
  ptrs.reserve(images.size());
  for (const auto& img : images) ptrs.push_back(&img);
  return to_tensor(ptrs);
}

Tensor to_tensor(const ImageTensor& image) { return to_tensor({&image}); }

ImageTensor to_image(const Tensor& t, int i) {
  const std::size_t plane = t.plane();
  std::vector<double> d(t.sample());
  const float* src = t.sample_ptr(i);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < t.c; ++c) d[p * t.c + c] = src[c * plane + p];
  return ImageTensor::from_unclamped({t.h, t.w, t.c}, std::move(d));
}

Tensor repeat_channels(const Tensor& t, int channels) {
  if (t.c != 1) throw std::invalid_argument("repeat_channels: expects one channel");
  Tensor out(t.n, channels, t.h, t.w);
  for (int i = 0; i < t.n; ++i)
    for (int c = 0; c < channels; ++c)
      std::copy_n(t.sample_ptr(i), t.plane(), out.sample_ptr(i) + c * t.plane());
  return out;
}

std::vector<ImageTensor> map_images(const Network& net,
                                    const std::vector<ImageTensor>& images,
                                    int batch) {
  std::vector<ImageTensor> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch) {
    std::vector<const ImageTensor*> part;
    for (std::size_t i = start; i < std::min(images.size(), start + batch); ++i) {
      part.push_back(&images[i]);
    }
    Tensor y = net.forward(to_tensor(part));
    for (int i = 0; i < y.n; ++i) out.push_back(to_image(y, i));
  }
  return out;
}

}  // namespace wmlab::nn
