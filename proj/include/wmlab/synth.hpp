#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "wmlab/image.hpp"

namespace wmlab {

/// Knobs for the procedural deraining dataset.
struct SynthParams {
  int image_size = 64;
  int victim_pairs = 2000;    // victim half, used to train GNet and the watermark
  int attacker_pairs = 2000;  // attacker half, disjoint from the victim half
  int val_pairs = 200;        // screener calibration
  int eval_pairs = 300;       // held-out evaluation set
  int textures = 1000;        // out-of-domain part of the null set
  double noise_level = 1.0;   // 0 disables rain and sensor noise (A = B)
  std::uint64_t seed = 1;

  void validate() const;
};

/// Clean image: two-colour gradient, a few flat shapes, band-limited noise.
ImageTensor synth_clean(std::mt19937_64& rng, int size);
/// Adds bright oriented streaks and sensor noise to `clean`.
ImageTensor synth_rain(std::mt19937_64& rng, const ImageTensor& clean,
                       double level);
/// Out-of-domain texture: uniform noise with 0 to 2 box blurs.
ImageTensor synth_texture(std::mt19937_64& rng, int size);
/// Grayscale ring-and-cross glyph on a white field.
ImageTensor default_watermark(int size);
/// Reads a watermark PNG as grayscale, or draws the glyph when `file` is
/// empty. A PNG of the wrong size is a ShapeError.
Watermark load_watermark(const std::filesystem::path& file, int size);

/// Separable Gaussian blur with mirrored borders, applied per channel.
std::vector<double> gaussian_blur(const std::vector<double>& img, int h, int w,
                                  int c, double sigma);

struct PairSet {
  std::vector<ImageTensor> a;  // noisy
  std::vector<ImageTensor> b;  // clean
  std::size_t size() const { return b.size(); }
};

/// In-memory view of a dataset directory. Every image went through 8-bit PNG.
struct Dataset {
  SynthParams params;
  PairSet victim, val, eval, attacker;
  std::vector<ImageTensor> textures;
  std::string content_hash;  // SHA-256 over every PNG, in layout order
};

/// Writes `dir/{victim,val,eval,attacker}/{a,b}/NNNNNN.png`,
/// `dir/textures/NNNNNN.png` and `dir/dataset.json`. Deterministic in params.
void synth_dataset(const SynthParams& params, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Per-image hashes, for disjointness checks between splits.
std::vector<std::string> image_hashes(const std::vector<ImageTensor>& images);

}  // namespace wmlab
