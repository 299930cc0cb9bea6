#include "wmlab/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace wmlab {

double mse(const ImageTensor& x, const ImageTensor& y) {
  require_same_shape(x.shape(), y.shape(), "mse");
  auto a = x.data();
  auto b = y.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const ImageTensor& x, const ImageTensor& y) {
  const double m = mse(x, y);
  if (m < kPsnrZeroMse) return kPsnrSentinelDb;
  return 10.0 * std::log10(1.0 / m);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr std::array<double, 5> kScaleWeights = {0.0448, 0.2856, 0.3001,
                                                 0.2363, 0.1333};

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - (kWindow - 1) / 2.0;
    g[i] = std::exp(-(d * d) / (2.0 * kSigma * kSigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Separable 'valid' Gaussian filter.
Plane filter_valid(const Plane& p, const std::array<double, kWindow>& g) {
  const int ow = p.w - kWindow + 1;
  const int oh = p.h - kWindow + 1;
  Plane tmp{p.h, ow, std::vector<double>(static_cast<std::size_t>(p.h) * ow)};
  for (int y = 0; y < p.h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += g[k] * p.at(y, x + k);
      tmp.v[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  Plane out{oh, ow, std::vector<double>(static_cast<std::size_t>(oh) * ow)};
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += g[k] * tmp.at(y + k, x);
      out.v[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

// Returns {mean ssim, mean contrast-structure} over the valid region.
std::pair<double, double> ssim_terms(const Plane& a, const Plane& b,
                                     const std::array<double, kWindow>& g) {
  Plane aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const Plane mu_a = filter_valid(a, g);
  const Plane mu_b = filter_valid(b, g);
  const Plane s_aa = filter_valid(aa, g);
  const Plane s_bb = filter_valid(bb, g);
  const Plane s_ab = filter_valid(ab, g);
  double ssim_sum = 0.0;
  double cs_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i];
    const double mb = mu_b.v[i];
    const double va = s_aa.v[i] - ma * ma;
    const double vb = s_bb.v[i] - mb * mb;
    const double cov = s_ab.v[i] - ma * mb;
    const double cs = (2.0 * cov + kC2) / (va + vb + kC2);
    const double lum = (2.0 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
    cs_sum += cs;
    ssim_sum += lum * cs;
  }
  const double n = static_cast<double>(mu_a.v.size());
  return {ssim_sum / n, cs_sum / n};
}

Plane downsample2(const Plane& p) {
  const int oh = p.h / 2;
  const int ow = p.w / 2;
  Plane out{oh, ow, std::vector<double>(static_cast<std::size_t>(oh) * ow)};
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      out.v[static_cast<std::size_t>(y) * ow + x] =
          0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) +
                  p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
    }
  }
  return out;
}

Plane channel_plane(const ImageTensor& img, int c) {
  Plane p{img.height(), img.width(),
          std::vector<double>(static_cast<std::size_t>(img.height()) *
                              img.width())};
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      p.v[static_cast<std::size_t>(y) * img.width() + x] = img.at(y, x, c);
  return p;
}

}  // namespace

MsSsimResult ms_ssim_detailed(const ImageTensor& x, const ImageTensor& y) {
  require_same_shape(x.shape(), y.shape(), "ms_ssim");
  int side = std::min(x.height(), x.width());
  if (side < kWindow) {
    throw ShapeError("ms_ssim: image " + x.shape().str() +
                     " is smaller than the 11x11 window");
  }
  int scales = 0;
  while (scales < static_cast<int>(kScaleWeights.size()) && side >= kWindow) {
    ++scales;
    side /= 2;
  }
  double weight_sum = 0.0;
  for (int s = 0; s < scales; ++s) weight_sum += kScaleWeights[s];

  const auto g = gaussian_window();
  double total = 0.0;
  for (int c = 0; c < x.channels(); ++c) {
    Plane a = channel_plane(x, c);
    Plane b = channel_plane(y, c);
    double score = 1.0;
    for (int s = 0; s < scales; ++s) {
      const auto [ssim, cs] = ssim_terms(a, b, g);
      const double w = kScaleWeights[s] / weight_sum;
      const double term = (s + 1 == scales) ? ssim : cs;
      score *= std::pow(std::max(term, 0.0), w);
      if (s + 1 < scales) {
        a = downsample2(a);
        b = downsample2(b);
      }
    }
    total += score;
  }
  return {std::clamp(total / x.channels(), 0.0, 1.0), scales};
}

double ms_ssim(const ImageTensor& x, const ImageTensor& y) {
  return ms_ssim_detailed(x, y).value;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ShapeError("normalized_correlation: length mismatch " +
                     std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  }
  if (x.empty()) throw ShapeError("normalized_correlation: empty input");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return {0.0, true};
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), false};
}

double normalized_correlation(std::span<const double> x,
                              std::span<const double> y) {
  return pearson(x, y).value;
}

double normalized_correlation(const ImageTensor& x, const ImageTensor& y) {
  return pearson(x.data(), y.data()).value;
}

bool extraction_success(const ImageTensor& extracted, const Watermark& delta) {
  if (delta.is_null()) {
    throw std::invalid_argument(
        "extraction_success: undefined against the null watermark");
  }
  require_same_shape(extracted.shape(), delta.image().shape(),
                     "extraction_success");
  return exceeds_extraction_threshold(
      normalized_correlation(extracted, delta.image()));
}

double removal_success_rate(const std::vector<bool>& extractions) {
  if (extractions.empty()) {
    throw std::invalid_argument("removal_success_rate: empty outcome list");
  }
  std::size_t ok = 0;
  for (bool e : extractions) ok += e ? 1 : 0;
  return 1.0 - static_cast<double>(ok) / static_cast<double>(extractions.size());
}

void MetricsReport::validate() const {
  auto in = [](double v, double lo, double hi) {
    return std::isfinite(v) && v >= lo && v <= hi;
  };
  if (!std::isfinite(psnr_db))
    throw std::domain_error("MetricsReport: psnr not finite");
  if (!in(ms_ssim, 0.0, 1.0))
    throw std::domain_error("MetricsReport: ms_ssim outside [0,1]");
  if (!in(correlation, -1.0, 1.0))
    throw std::domain_error("MetricsReport: correlation outside [-1,1]");
  if (!in(sr_remove, 0.0, 1.0))
    throw std::domain_error("MetricsReport: sr_remove outside [0,1]");
  if (sample_count < 1)
    throw std::domain_error("MetricsReport: sample_count must be >= 1");
}

}  // namespace wmlab
