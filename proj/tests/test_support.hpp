#pragma once

#include <filesystem>
#include <random>

#include "wmlab/synth.hpp"
#include "wmlab/victim.hpp"

namespace wmlab::fixtures {

inline constexpr int kSize = 16;

inline nn::NetworkSpec spec(nn::NetKind kind, int in, int out, int depth, std::uint64_t seed) {
  return {kind, in, out, 8, depth, seed};
}

inline PairSet pairs(int n, double level, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PairSet p;
  for (int i = 0; i < n; ++i) {
    auto b = synth_clean(rng, kSize);
    p.a.push_back(level > 0 ? synth_rain(rng, b, level) : b);
    p.b.push_back(b);
  }
  return p;
}

inline std::vector<ImageTensor> textures(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ImageTensor> t;
  for (int i = 0; i < n; ++i) t.push_back(synth_texture(rng, kSize));
  return t;
}

inline TrainingConfig quick(int epochs, std::uint64_t seed) {
  TrainingConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

inline Watermark mark() { return Watermark::from_image(default_watermark(kSize)); }

/// Barely trained 16px victim; good for plumbing, not for quality.
inline VictimBundle tiny_bundle(double beta3 = 0.01) {
  auto data = pairs(8, 1.0, 5);
  auto g = train_gnet(data, spec(nn::NetKind::gnet, 3, 3, 2, 1), quick(1, 2));
  TrainingConfig c = quick(1, 3);
  c.beta3 = beta3;
  return joint_train(std::move(g.net), data.b, textures(8, 9), mark(), c,
                     spec(nn::NetKind::hnet, 4, 3, 2, 4), spec(nn::NetKind::enet, 3, 1, 3, 5),
                     spec(nn::NetKind::disc, 3, 1, 3, 6));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("wmlab_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace wmlab::fixtures
