#pragma once

// Exact additive victim used as an oracle: b' = b + w, SNet(x) = x + w.
// Values live on the dyadic 8-bit grid k/256 so every sum and difference
// below is exact in double precision.

#include <random>

#include "wmlab/attacks.hpp"

namespace wmlab::fixtures {

struct MockLinearCase {
  ImageTensor a, b, b_prime;
  std::vector<double> w;
};

inline MockLinearCase mock_linear_case(std::mt19937_64& rng, Shape s) {
  std::uniform_int_distribution<int> level(0, 256);
  std::uniform_int_distribution<int> shift(-32, 32);
  std::vector<double> av(s.size()), bv(s.size()), bp(s.size()), w(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    av[i] = level(rng) / 256.0;
    // Keep b + w inside [0, 1] so b' is a valid image without clamping.
    int k = level(rng), d = shift(rng);
    k = std::clamp(k, std::max(0, -d), std::min(256, 256 - d));
    bv[i] = k / 256.0;
    w[i] = d / 256.0;
    bp[i] = bv[i] + w[i];
  }
  return {ImageTensor(s, av), ImageTensor(s, bv), ImageTensor(s, bp), w};
}

inline Surrogate mock_surrogate(const std::vector<double>& w) {
  return [w](const ImageTensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + w[i];
    return out;
  };
}

/// Instances (out of `count`) where forward removal before clamping is not
/// bit-identical to b.
inline int forward_identity_mismatches(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> side(1, 8);
  int bad = 0;
  for (int n = 0; n < count; ++n) {
    const Shape s{side(rng), side(rng), 3};
    const auto c = mock_linear_case(rng, s);
    const auto raw = forward_remove_raw(mock_surrogate(c.w), c.a, c.b_prime);
    if (raw != c.b.values()) ++bad;
  }
  return bad;
}

}  // namespace wmlab::fixtures
