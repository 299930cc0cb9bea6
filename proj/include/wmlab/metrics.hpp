#pragma once

#include <span>
#include <vector>

#include "wmlab/image.hpp"

namespace wmlab {

/// Peak value is 1.0; identical images report this instead of +inf.
inline constexpr double kPsnrSentinelDb = 99.0;
inline constexpr double kPsnrZeroMse = 1e-10;
/// An extraction counts as successful when correlation is strictly above this.
inline constexpr double kExtractionThreshold = 0.96;

double mse(const ImageTensor& x, const ImageTensor& y);
double psnr(const ImageTensor& x, const ImageTensor& y);

struct MsSsimResult {
  double value = 0.0;
  int scales = 0;
};

/// Multi-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and the usual five per-scale exponents. Scales whose side would
/// drop below the window are dropped and the remaining exponents rescaled to
/// sum to one. Channels are scored independently and averaged.
MsSsimResult ms_ssim_detailed(const ImageTensor& x, const ImageTensor& y);
double ms_ssim(const ImageTensor& x, const ImageTensor& y);

struct Correlation {
  double value = 0.0;
  bool degenerate = false;  // one side had zero variance
};

/// Pearson correlation over flattened samples.
Correlation pearson(std::span<const double> x, std::span<const double> y);
double normalized_correlation(std::span<const double> x,
                              std::span<const double> y);
double normalized_correlation(const ImageTensor& x, const ImageTensor& y);

inline bool exceeds_extraction_threshold(double correlation) {
  return correlation > kExtractionThreshold;
}

/// True iff the Pearson correlation with the watermark exceeds 0.96.
bool extraction_success(const ImageTensor& extracted, const Watermark& delta);

/// 1 - (successful extractions / attempts).
double removal_success_rate(const std::vector<bool>& extractions);

struct MetricsReport {
  double psnr_db = 0.0;
  double ms_ssim = 0.0;
  double correlation = 0.0;
  double sr_remove = 0.0;
  int sample_count = 0;

  /// Throws std::domain_error when a field leaves its documented range.
  void validate() const;
};

}  // namespace wmlab
