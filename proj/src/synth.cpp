#include "wmlab/synth.hpp"

#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numbers>
#include <stdexcept>

#include "wmlab/imageio.hpp"
#include "wmlab/metrics.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

namespace {

using Rng = std::mt19937_64;

double uni(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uni_int(Rng& rng, int lo, int hi_exclusive) {
  return std::uniform_int_distribution<int>(lo, hi_exclusive - 1)(rng);
}

// numpy 'reflect' padding: mirror without repeating the edge sample.
int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

Rng image_rng(std::uint64_t seed, int split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split),
                    static_cast<std::uint32_t>(index)};
  return Rng(seq);
}

constexpr const char* kSplits[] = {"victim", "val", "eval", "attacker"};

std::string file_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.png", i);
  return buf;
}

}  // namespace

void SynthParams::validate() const {
  if (image_size < 16 || image_size % 8 != 0) {
    throw std::invalid_argument("synth: image_size must be a multiple of 8 and >= 16");
  }
  if (victim_pairs < 1 || attacker_pairs < 1 || val_pairs < 1 || eval_pairs < 1 ||
      textures < 0) {
    throw std::invalid_argument("synth: split counts must be positive");
  }
  if (!std::isfinite(noise_level) || noise_level < 0.0) {
    throw std::invalid_argument("synth: noise_level must be finite and >= 0");
  }
}

std::vector<double> gaussian_blur(const std::vector<double>& img, int h, int w,
                                  int c, double sigma) {
  const int r = static_cast<int>(3 * sigma + 0.5);
  if (r < 1) return img;
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-i * i / (2 * sigma * sigma));
  for (double& v : k) v /= sum;
  std::vector<double> tmp(img.size()), out(img.size());
  auto idx = [&](int y, int x, int ch) {
    return (static_cast<std::size_t>(y) * w + x) * c + ch;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img[idx(mirror(y + i, h), x, ch)];
        tmp[idx(y, x, ch)] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[idx(y, mirror(x + i, w), ch)];
        out[idx(y, x, ch)] = acc;
      }
  return out;
}

ImageTensor synth_clean(Rng& rng, int size) {
  const int s = size;
  std::vector<double> img(static_cast<std::size_t>(s) * s * 3);
  double c0[3], c1[3];
  for (double& v : c0) v = uni(rng, 0.1, 0.9);
  for (double& v : c1) v = uni(rng, 0.1, 0.9);
  const double ang = uni(rng, 0.0, 2 * std::numbers::pi);
  std::vector<double> t(static_cast<std::size_t>(s) * s);
  double tmin = 1e300, tmax = -1e300;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double v = std::cos(ang) * x / s + std::sin(ang) * y / s;
      t[static_cast<std::size_t>(y) * s + x] = v;
      tmin = std::min(tmin, v);
      tmax = std::max(tmax, v);
    }
  for (std::size_t p = 0; p < t.size(); ++p) {
    const double u = (t[p] - tmin) / (tmax - tmin + 1e-9);
    for (int ch = 0; ch < 3; ++ch) img[3 * p + ch] = c0[ch] * (1 - u) + c1[ch] * u;
  }

  const int shapes = uni_int(rng, 2, 6);
  for (int k = 0; k < shapes; ++k) {
    double col[3];
    for (double& v : col) v = uni(rng, 0.0, 1.0);
    const double cx = uni(rng, 0, 1), cy = uni(rng, 0, 1);
    const double rad = uni(rng, 0.05, 0.3);
    const bool circle = uni(rng, 0, 1) < 0.5;
    double bw = 0, bh = 0;
    if (!circle) {
      bw = uni(rng, 0.05, 0.4);
      bh = uni(rng, 0.05, 0.4);
    }
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double xx = double(x) / s, yy = double(y) / s;
        const bool in = circle ? (xx - cx) * (xx - cx) + (yy - cy) * (yy - cy) < rad * rad
                               : std::abs(xx - cx) < bw / 2 && std::abs(yy - cy) < bh / 2;
        if (!in) continue;
        double* px = &img[(static_cast<std::size_t>(y) * s + x) * 3];
        for (int ch = 0; ch < 3; ++ch) px[ch] = 0.3 * px[ch] + 0.7 * col[ch];
      }
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> n(img.size());
  for (double& v : n) v = gauss(rng);
  n = gaussian_blur(n, s, s, 3, 2.0);
  double mean = 0, sq = 0;
  for (double v : n) mean += v;
  mean /= n.size();
  for (double v : n) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / n.size()) + 1e-9;
  for (std::size_t i = 0; i < img.size(); ++i) img[i] += 0.04 * n[i] / sd;
  img = gaussian_blur(img, s, s, 3, 0.6);
  return ImageTensor::from_unclamped({s, s, 3}, std::move(img));
}

ImageTensor synth_rain(Rng& rng, const ImageTensor& clean, double level) {
  if (level <= 0.0) return clean;
  const int s = clean.height();
  const int w = clean.width();
  std::vector<double> layer(static_cast<std::size_t>(s) * w, 0.0);
  const double ang = uni(rng, -0.4, 0.4) + std::numbers::pi / 2;
  const int streaks = static_cast<int>(uni_int(rng, 20, 40) * level);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (int k = 0; k < streaks; ++k) {
    const double len = uni(rng, 6, 16);
    const double x0 = uni(rng, 0, w), y0 = uni(rng, 0, s);
    const double inten = uni(rng, 0.3, 0.7);
    const double a = ang + jitter(rng);
    const int steps = static_cast<int>(len * 2);
    for (int i = 0; i < steps; ++i) {
      const double t = steps > 1 ? len * i / (steps - 1) : 0.0;
      const int x = static_cast<int>(x0 + t * std::cos(a));
      const int y = static_cast<int>(y0 + t * std::sin(a));
      if (x >= 0 && x < w && y >= 0 && y < s) {
        double& v = layer[static_cast<std::size_t>(y) * w + x];
        v = std::max(v, inten);
      }
    }
  }
  layer = gaussian_blur(layer, s, w, 1, 0.7);
  std::normal_distribution<double> sensor(0.0, 0.02 * level);
  const auto b = clean.data();
  const int c = clean.channels();
  std::vector<double> out(clean.size());
  for (std::size_t p = 0; p < layer.size(); ++p) {
    const double l = 1.6 * layer[p];
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = p * c + ch;
      out[i] = b[i] + l * (1.0 - b[i]);
    }
  }
  for (double& v : out) v += sensor(rng);
  return ImageTensor::from_unclamped(clean.shape(), std::move(out));
}

ImageTensor synth_texture(Rng& rng, int size) {
  const int s = size;
  std::vector<double> img(static_cast<std::size_t>(s) * s * 3);
  for (double& v : img) v = uni(rng, 0.0, 1.0);
  const int blurs = uni_int(rng, 0, 3);
  for (int k = 0; k < blurs; ++k) {
    // 3x3 box filter, zero padded, always divided by 9.
    std::vector<double> out(img.size(), 0.0);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          double acc = 0.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < s && xx >= 0 && xx < s) {
                acc += img[(static_cast<std::size_t>(yy) * s + xx) * 3 + ch];
              }
            }
          out[(static_cast<std::size_t>(y) * s + x) * 3 + ch] = acc / 9.0;
        }
    img = std::move(out);
  }
  return ImageTensor::from_unclamped({s, s, 3}, std::move(img));
}

ImageTensor default_watermark(int size) {
  const int s = size;
  std::vector<double> img(static_cast<std::size_t>(s) * s, 1.0);
  const double c = s / 2.0;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double r = std::hypot(x - c + 0.5, y - c + 0.5);
      bool ink = r > s * 0.30 && r < s * 0.40;
      if (r < s * 0.30) {
        ink = ink || std::abs(x - y) < s * 0.06 || std::abs(x - (s - 1 - y)) < s * 0.06;
      }
      if (ink) img[static_cast<std::size_t>(y) * s + x] = 0.0;
    }
  return ImageTensor({s, s, 1}, std::move(img));
}

Watermark load_watermark(const std::filesystem::path& file, int size) {
  if (file.empty()) return Watermark::from_image(default_watermark(size));
  ImageTensor img = read_png(file, 1);
  if (img.shape() != Shape{size, size, 1}) {
    throw ShapeError("watermark " + file.string() + " must be " + std::to_string(size) + "x" +
                     std::to_string(size));
  }
  return Watermark::from_image(std::move(img));
}

std::vector<std::string> image_hashes(const std::vector<ImageTensor>& images) {
  std::vector<std::string> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    const auto png = encode_png(img);
    out.push_back(sha256_hex(std::as_bytes(std::span(png))));
  }
  return out;
}

void synth_dataset(const SynthParams& params, const std::filesystem::path& dir) {
  params.validate();
  const int counts[] = {params.victim_pairs, params.val_pairs, params.eval_pairs,
                        params.attacker_pairs};
  nlohmann::json meta;
  meta["params"] = {{"image_size", params.image_size},
                    {"victim_pairs", params.victim_pairs},
                    {"attacker_pairs", params.attacker_pairs},
                    {"val_pairs", params.val_pairs},
                    {"eval_pairs", params.eval_pairs},
                    {"textures", params.textures},
                    {"noise_level", params.noise_level},
                    {"seed", params.seed}};
  Sha256 all;
  for (int split = 0; split < 4; ++split) {
    double psnr_sum = 0.0;
    for (int i = 0; i < counts[split]; ++i) {
      Rng rng = image_rng(params.seed, split, i);
      // Round through 8 bits first so the stored rain sits on the stored clean image.
      const ImageTensor b = quantize8(synth_clean(rng, params.image_size));
      const ImageTensor a = quantize8(synth_rain(rng, b, params.noise_level));
      psnr_sum += psnr(a, b);
      for (const auto& [sub, img] : {std::pair{"a", &a}, std::pair{"b", &b}}) {
        const auto png = encode_png(*img);
        all.update(std::as_bytes(std::span(png)));
        write_file(dir / kSplits[split] / sub / file_name(i),
                   std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
      }
    }
    meta["splits"][kSplits[split]] = {{"count", counts[split]},
                                      {"mean_psnr_a_b", psnr_sum / counts[split]}};
  }
  std::filesystem::create_directories(dir / "textures");
  for (int i = 0; i < params.textures; ++i) {
    Rng rng = image_rng(params.seed, 4, i);
    const auto png = encode_png(synth_texture(rng, params.image_size));
    all.update(std::as_bytes(std::span(png)));
    write_file(dir / "textures" / file_name(i),
               std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
  }
  meta["content_hash"] = all.hex_digest();
  meta["null_set"] = "victim/b plus textures";
  write_file(dir / "dataset.json", meta.dump(2) + "\n");
}

namespace {

std::vector<ImageTensor> load_dir(const std::filesystem::path& dir, int count,
                                  Sha256& all) {
  std::vector<ImageTensor> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const std::string raw = read_file(dir / file_name(i));
    all.update(raw);
    out.push_back(decode_png(std::vector<unsigned char>(raw.begin(), raw.end()), 3));
  }
  return out;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto meta = nlohmann::json::parse(read_file(dir / "dataset.json"));
  Dataset ds;
  const auto& p = meta.at("params");
  ds.params.image_size = p.at("image_size");
  ds.params.victim_pairs = p.at("victim_pairs");
  ds.params.attacker_pairs = p.at("attacker_pairs");
  ds.params.val_pairs = p.at("val_pairs");
  ds.params.eval_pairs = p.at("eval_pairs");
  ds.params.textures = p.at("textures");
  ds.params.noise_level = p.at("noise_level");
  ds.params.seed = p.at("seed");
  PairSet* sets[] = {&ds.victim, &ds.val, &ds.eval, &ds.attacker};
  const int counts[] = {ds.params.victim_pairs, ds.params.val_pairs,
                        ds.params.eval_pairs, ds.params.attacker_pairs};
  Sha256 all;
  for (int split = 0; split < 4; ++split) {
    // Hash order matches synth_dataset: a then b per index.
    for (int i = 0; i < counts[split]; ++i) {
      for (const char* sub : {"a", "b"}) {
        const std::string raw = read_file(dir / kSplits[split] / sub / file_name(i));
        all.update(raw);
        auto img = decode_png(std::vector<unsigned char>(raw.begin(), raw.end()), 3);
        (sub[0] == 'a' ? sets[split]->a : sets[split]->b).push_back(std::move(img));
      }
    }
  }
  ds.textures = load_dir(dir / "textures", ds.params.textures, all);
  ds.content_hash = all.hex_digest();
  if (ds.content_hash != meta.at("content_hash").get<std::string>()) {
    throw std::runtime_error("dataset " + dir.string() +
                             ": content hash differs from dataset.json");
  }
  return ds;
}

}  // namespace wmlab
