#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wmlab {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" +
           std::to_string(channels);
  }
};

inline void require_same_shape(const Shape& a, const Shape& b,
                               std::string_view what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() +
                     " vs " + b.str());
  }
}

/// Interleaved H x W x C image with every sample in [0, 1].
///
/// The constructor validates the range; `from_unclamped` clamps instead.
class ImageTensor {
 public:
  ImageTensor() = default;

  ImageTensor(Shape shape, std::vector<double> data)
      : shape_(shape), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_.size()) {
      throw ShapeError("ImageTensor: buffer has " +
                       std::to_string(data_.size()) + " samples, shape " +
                       shape_.str() + " needs " +
                       std::to_string(shape_.size()));
    }
    for (double v : data_) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw std::domain_error("ImageTensor: sample outside [0,1]: " +
                                std::to_string(v));
      }
    }
  }

  static ImageTensor filled(Shape shape, double value) {
    return ImageTensor(shape, std::vector<double>(shape.size(), value));
  }

  static ImageTensor from_unclamped(Shape shape, std::vector<double> data) {
    for (double& v : data) {
      v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    }
    return ImageTensor(shape, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * shape_.width + x) *
                     shape_.channels +
                 c];
  }

  bool operator==(const ImageTensor&) const = default;

 private:
  static void validate_shape(const Shape& s) {
    if (s.height < 1 || s.width < 1 || s.channels < 1) {
      throw ShapeError("ImageTensor: invalid shape " + s.str());
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

enum class ResidualRole { delta_prime_a, delta_prime_b, noise_gt, noise_est };

inline std::string_view to_string(ResidualRole r) {
  switch (r) {
    case ResidualRole::delta_prime_a: return "delta_prime_a";
    case ResidualRole::delta_prime_b: return "delta_prime_b";
    case ResidualRole::noise_gt: return "noise_gt";
    case ResidualRole::noise_est: return "noise_est";
  }
  return "unknown";
}

/// Signed difference of two images.
struct Residual {
  Shape shape;
  std::vector<double> data;
  ResidualRole role = ResidualRole::delta_prime_b;

  static Residual difference(const ImageTensor& minuend,
                             const ImageTensor& subtrahend,
                             ResidualRole role) {
    require_same_shape(minuend.shape(), subtrahend.shape(), "Residual");
    Residual r{minuend.shape(), std::vector<double>(minuend.size()), role};
    auto m = minuend.data();
    auto s = subtrahend.data();
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = m[i] - s[i];
    return r;
  }

  /// Affine map r -> 0.5 + r / 2 into the image range, clamped.
  ImageTensor remapped() const {
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 + 0.5 * data[i];
    return ImageTensor::from_unclamped(shape, std::move(out));
  }

  /// Gray-centred rendering scaled by `gain`, for visual inspection.
  ImageTensor amplified(double gain) const {
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 + gain * data[i];
    return ImageTensor::from_unclamped(shape, std::move(out));
  }
};

/// Watermark image. The null watermark is the all-white image.
class Watermark {
 public:
  static Watermark null_mark(Shape shape) {
    return Watermark(ImageTensor::filled(shape, 1.0), true);
  }

  static Watermark from_image(ImageTensor image) {
    const auto d = image.data();
    if (std::all_of(d.begin(), d.end(), [&](double v) { return v == d[0]; })) {
      throw std::invalid_argument(
          "Watermark: constant image cannot serve as a watermark");
    }
    return Watermark(std::move(image), false);
  }

  const ImageTensor& image() const { return image_; }
  bool is_null() const { return is_null_; }

 private:
  Watermark(ImageTensor image, bool is_null)
      : image_(std::move(image)), is_null_(is_null) {}

  ImageTensor image_;
  bool is_null_ = false;
};

inline ImageTensor clamp01(Shape shape, std::vector<double> data) {
  return ImageTensor::from_unclamped(shape, std::move(data));
}

}  // namespace wmlab
