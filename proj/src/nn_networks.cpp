#include "wmlab/nn/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "wmlab/util.hpp"

namespace wmlab::nn {

std::string_view to_string(NetKind k) {
  switch (k) {
    case NetKind::gnet: return "gnet";
    case NetKind::hnet: return "hnet";
    case NetKind::enet: return "enet";
    case NetKind::disc: return "disc";
    case NetKind::snet: return "snet";
    case NetKind::hnet_inverse: return "hnet_inverse";
  }
  return "unknown";
}

NetKind net_kind_from_string(std::string_view s) {
  for (NetKind k : {NetKind::gnet, NetKind::hnet, NetKind::enet, NetKind::disc,
                    NetKind::snet, NetKind::hnet_inverse}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown network kind: " + std::string(s));
}

void NetworkSpec::validate(int carrier, int mark) const {
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument("NetworkSpec(" + std::string(to_string(kind)) +
                                "): " + why);
  };
  if (base_width < 1) fail("base_width must be >= 1");
  switch (kind) {
    case NetKind::gnet:
    case NetKind::snet:
    case NetKind::hnet_inverse:
      if (in_channels != carrier || out_channels != carrier)
        fail("must map carrier channels to carrier channels");
      if (depth < 1) fail("depth must be >= 1");
      break;
    case NetKind::hnet:
      if (in_channels != carrier + std::max(mark, carrier) &&
          in_channels != carrier + mark)
        fail("input must be carrier + watermark channels");
      if (out_channels != carrier) fail("output must be carrier channels");
      if (depth < 1) fail("depth must be >= 1");
      break;
    case NetKind::enet:
      if (in_channels != carrier || out_channels != mark)
        fail("must map carrier channels to watermark channels");
      if (depth < 3) fail("depth must be >= 3");
      break;
    case NetKind::disc:
      if (in_channels != carrier || out_channels != 1)
        fail("must map carrier channels to one score");
      if (depth < 2) fail("depth must be >= 2");
      break;
  }
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  collect(out);
  return out;
}

std::vector<const Param*> Network::params() const {
  std::vector<Param*> tmp;
  const_cast<Network*>(this)->collect(tmp);
  return {tmp.begin(), tmp.end()};
}

void Network::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

std::string Network::parameter_hash() const {
  Sha256 h;
  for (const Param* p : params()) {
    h.update(p->name);
    h.update(std::as_bytes(std::span(p->value)));
  }
  return h.hex_digest();
}

void Network::init_all(std::vector<Conv2d*> convs, std::vector<Upsample2x*> ups) {
  std::mt19937_64 rng(spec_.seed);
  // Layers initialise in declaration order so a seed fixes every weight.
  std::vector<Param*> order;
  collect(order);
  for (Param* p : order) {
    for (Conv2d* c : convs)
      if (&c->weight == p) c->init(rng);
    for (Upsample2x* u : ups)
      if (&u->weight == p) u->init(rng);
  }
}

namespace {

constexpr char kMagic[8] = {'W', 'M', 'L', 'B', 'W', 'T', 'S', '1'};

// Encoder-decoder with additive skips; the output is added to the leading
// carrier channels of the input.
class EncoderDecoder final : public Network {
 public:
  explicit EncoderDecoder(const NetworkSpec& s) : Network(s) {
    const int w = s.base_width;
    int c = w;
    inc_ = Conv2d("inc", s.in_channels, w, 3, 1, 1);
    widths_.push_back(c);
    for (int d = 0; d < s.depth; ++d) {
      const int nc = std::min(c * 2, 4 * w);
      down_.emplace_back("down" + std::to_string(d), c, nc, 2, 2, 0);
      dconv_.emplace_back("dconv" + std::to_string(d), nc, nc, 3, 1, 1);
      c = nc;
      widths_.push_back(c);
    }
    for (int d = 0; d < s.depth; ++d) {
      const int pc = widths_[widths_.size() - 2 - d];
      up_.emplace_back("up" + std::to_string(d), c, pc);
      uconv_.emplace_back("uconv" + std::to_string(d), pc, pc, 3, 1, 1);
      c = pc;
    }
    out_ = Conv2d("out", c, s.out_channels, 1, 1, 0);
    std::vector<Conv2d*> convs{&inc_, &out_};
    for (auto& l : down_) convs.push_back(&l);
    for (auto& l : dconv_) convs.push_back(&l);
    for (auto& l : uconv_) convs.push_back(&l);
    std::vector<Upsample2x*> ups;
    for (auto& l : up_) ups.push_back(&l);
    init_all(convs, ups);
  }

  // Tape layout: x, h0, then per level (down_out, dconv_out), then per up
  // level (up_out, uconv_out). Activations are post-ReLU.
  Tensor forward(const Tensor& x, Tape* tape) const override {
    const int depth = spec_.depth;
    const int scale = 1 << depth;
    if (x.h % scale != 0 || x.w % scale != 0) {
      throw std::invalid_argument("EncoderDecoder: spatial size " +
                                  x.shape_str() + " not divisible by " +
                                  std::to_string(scale));
    }
    std::vector<Tensor> local;
    std::vector<Tensor>& acts = tape ? tape->acts : local;
    acts.clear();
    acts.push_back(x);
    Tensor h = inc_.forward(x);
    relu_inplace(h);
    acts.push_back(h);
    std::vector<std::size_t> skips{1};
    for (int d = 0; d < depth; ++d) {
      Tensor t = down_[d].forward(acts.back());
      relu_inplace(t);
      acts.push_back(std::move(t));
      Tensor u = dconv_[d].forward(acts.back());
      relu_inplace(u);
      acts.push_back(std::move(u));
      skips.push_back(acts.size() - 1);
    }
    for (int d = 0; d < depth; ++d) {
      Tensor t = up_[d].forward(acts.back());
      relu_inplace(t);
      add_inplace(t, acts[skips[skips.size() - 2 - d]]);
      acts.push_back(std::move(t));
      Tensor u = uconv_[d].forward(acts.back());
      relu_inplace(u);
      acts.push_back(std::move(u));
    }
    Tensor y = out_.forward(acts.back());
    for (int i = 0; i < y.n; ++i) {
      const float* src = x.sample_ptr(i);
      float* dst = y.sample_ptr(i);
      for (std::size_t k = 0; k < y.sample(); ++k) dst[k] += src[k];
    }
    if (!tape) acts.clear();
    return y;
  }

  Tensor backward(const Tape& tape, const Tensor& grad_out) override {
    const auto& a = tape.acts;
    const std::size_t depth = static_cast<std::size_t>(spec_.depth);
    auto skip = [&](std::size_t level) -> const Tensor& {
      return level == 0 ? a[1] : a[1 + 2 * level];
    };
    std::vector<Tensor> skip_grad(depth);
    Tensor g = out_.backward(a.back(), grad_out);
    for (std::size_t d = depth; d-- > 0;) {
      const std::size_t merged = 2 + 2 * depth + 2 * d;
      relu_backward_inplace(g, a[merged + 1]);
      g = uconv_[d].backward(a[merged], g);
      const std::size_t level = depth - 1 - d;
      skip_grad[level] = g;
      Tensor up_act = a[merged];
      const Tensor& s = skip(level);
      for (std::size_t i = 0; i < up_act.v.size(); ++i) up_act.v[i] -= s.v[i];
      relu_backward_inplace(g, up_act);
      g = up_[d].backward(a[merged - 1], g);
    }
    for (std::size_t d = depth; d-- > 0;) {
      if (d + 1 < depth) add_inplace(g, skip_grad[d + 1]);
      relu_backward_inplace(g, a[3 + 2 * d]);
      g = dconv_[d].backward(a[2 + 2 * d], g);
      relu_backward_inplace(g, a[2 + 2 * d]);
      g = down_[d].backward(a[1 + 2 * d], g);
    }
    add_inplace(g, skip_grad[0]);
    relu_backward_inplace(g, a[1]);
    Tensor gx = inc_.backward(a[0], g);
    for (int i = 0; i < gx.n; ++i) {
      const float* src = grad_out.sample_ptr(i);
      float* dst = gx.sample_ptr(i);
      for (std::size_t k = 0; k < grad_out.sample(); ++k) dst[k] += src[k];
    }
    return gx;
  }

 protected:
  void collect(std::vector<Param*>& out) override {
    auto add = [&](auto& l) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    };
    add(inc_);
    for (std::size_t d = 0; d < down_.size(); ++d) {
      add(down_[d]);
      add(dconv_[d]);
    }
    for (std::size_t d = 0; d < up_.size(); ++d) {
      add(up_[d]);
      add(uconv_[d]);
    }
    add(out_);
  }

 private:
  Conv2d inc_;
  std::vector<Conv2d> down_, dconv_, uconv_;
  std::vector<Upsample2x> up_;
  Conv2d out_;
  std::vector<int> widths_;
};

// Plain convolution stack for watermark extraction: 3x3 conv, a 2x2
// stride-2 conv, (depth - 3) 3x3 convs at half resolution, and a 2x
// upsampling head with sigmoid output.
class ExtractorStack final : public Network {
 public:
  explicit ExtractorStack(const NetworkSpec& s) : Network(s) {
    const int w = s.base_width;
    first_ = Conv2d("conv0", s.in_channels, w, 3, 1, 1);
    down_ = Conv2d("down", w, 2 * w, 2, 2, 0);
    for (int i = 0; i < s.depth - 3; ++i)
      mid_.emplace_back("mid" + std::to_string(i), 2 * w, 2 * w, 3, 1, 1);
    head_ = Upsample2x("head", 2 * w, s.out_channels);
    std::vector<Conv2d*> convs{&first_, &down_};
    for (auto& m : mid_) convs.push_back(&m);
    init_all(convs, {&head_});
  }

  Tensor forward(const Tensor& x, Tape* tape) const override {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
      throw std::invalid_argument("ExtractorStack: odd spatial size " +
                                  x.shape_str());
    }
    std::vector<Tensor> local;
    std::vector<Tensor>& acts = tape ? tape->acts : local;
    acts.clear();
    acts.push_back(x);
    Tensor h = first_.forward(x);
    relu_inplace(h);
    acts.push_back(std::move(h));
    h = down_.forward(acts.back());
    relu_inplace(h);
    acts.push_back(std::move(h));
    for (const auto& m : mid_) {
      h = m.forward(acts.back());
      relu_inplace(h);
      acts.push_back(std::move(h));
    }
    Tensor y = head_.forward(acts.back());
    sigmoid_inplace(y);
    if (tape) {
      acts.push_back(y);
    } else {
      acts.clear();
    }
    return y;
  }

  Tensor backward(const Tape& tape, const Tensor& grad_out) override {
    const auto& a = tape.acts;
    Tensor g = grad_out;
    sigmoid_backward_inplace(g, a.back());
    std::size_t idx = a.size() - 2;
    g = head_.backward(a[idx], g);
    for (std::size_t m = mid_.size(); m-- > 0;) {
      relu_backward_inplace(g, a[idx]);
      g = mid_[m].backward(a[idx - 1], g);
      --idx;
    }
    relu_backward_inplace(g, a[2]);
    g = down_.backward(a[1], g);
    relu_backward_inplace(g, a[1]);
    return first_.backward(a[0], g);
  }

 protected:
  void collect(std::vector<Param*>& out) override {
    auto add = [&](auto& l) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    };
    add(first_);
    add(down_);
    for (auto& m : mid_) add(m);
    add(head_);
  }

 private:
  Conv2d first_, down_;
  std::vector<Conv2d> mid_;
  Upsample2x head_;
};

constexpr float kLeak = 0.2f;

// Patch discriminator: (depth - 1) 4x4 stride-2 convs with leaky ReLU and a
// 3x3 scoring conv; per-sample score is the mean patch logit (N x 1 x 1 x 1).
class PatchDiscriminator final : public Network {
 public:
  explicit PatchDiscriminator(const NetworkSpec& s) : Network(s) {
    int c = s.in_channels;
    int nc = s.base_width;
    for (int i = 0; i < s.depth - 1; ++i) {
      convs_.emplace_back("conv" + std::to_string(i), c, nc, 4, 2, 1);
      c = nc;
      nc = std::min(nc * 2, 4 * s.base_width);
    }
    score_ = Conv2d("score", c, 1, 3, 1, 1);
    std::vector<Conv2d*> all;
    for (auto& l : convs_) all.push_back(&l);
    all.push_back(&score_);
    init_all(all, {});
  }

  Tensor forward(const Tensor& x, Tape* tape) const override {
    std::vector<Tensor> local;
    std::vector<Tensor>& acts = tape ? tape->acts : local;
    acts.clear();
    acts.push_back(x);
    for (const auto& l : convs_) {
      Tensor h = l.forward(acts.back());
      leaky_relu_inplace(h, kLeak);
      acts.push_back(std::move(h));
    }
    Tensor map = score_.forward(acts.back());
    Tensor y(map.n, 1, 1, 1);
    const float inv = 1.0f / static_cast<float>(map.plane());
    for (int i = 0; i < map.n; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < map.plane(); ++k) acc += map.sample_ptr(i)[k];
      y.v[i] = static_cast<float>(acc) * inv;
    }
    if (tape) {
      // Record the map shape for backward.
      acts.push_back(Tensor(map.n, map.c, map.h, map.w));
    } else {
      acts.clear();
    }
    return y;
  }

  Tensor backward(const Tape& tape, const Tensor& grad_out) override {
    const auto& a = tape.acts;
    const Tensor& shape = a.back();
    Tensor g(shape.n, shape.c, shape.h, shape.w);
    const float inv = 1.0f / static_cast<float>(shape.plane());
    for (int i = 0; i < g.n; ++i)
      std::fill_n(g.sample_ptr(i), g.sample(), grad_out.v[i] * inv);
    std::size_t idx = a.size() - 2;
    g = score_.backward(a[idx], g);
    for (std::size_t l = convs_.size(); l-- > 0;) {
      leaky_relu_backward_inplace(g, a[idx], kLeak);
      g = convs_[l].backward(a[idx - 1], g);
      --idx;
    }
    return g;
  }

 protected:
  void collect(std::vector<Param*>& out) override {
    for (auto& l : convs_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&score_.weight);
    out.push_back(&score_.bias);
  }

 private:
  std::vector<Conv2d> convs_;
  Conv2d score_;
};

}  // namespace

std::unique_ptr<Network> Network::create(const NetworkSpec& spec) {
  if (spec.base_width < 1) {
    throw std::invalid_argument("NetworkSpec: base_width must be >= 1");
  }
  switch (spec.kind) {
    case NetKind::gnet:
    case NetKind::hnet:
    case NetKind::snet:
    case NetKind::hnet_inverse:
      if (spec.depth < 1) throw std::invalid_argument("NetworkSpec: depth < 1");
      return std::make_unique<EncoderDecoder>(spec);
    case NetKind::enet:
      if (spec.depth < 3) throw std::invalid_argument("NetworkSpec: depth < 3");
      return std::make_unique<ExtractorStack>(spec);
    case NetKind::disc:
      if (spec.depth < 2) throw std::invalid_argument("NetworkSpec: depth < 2");
      return std::make_unique<PatchDiscriminator>(spec);
  }
  throw std::invalid_argument("NetworkSpec: unknown kind");
}

void Network::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weights: " + file.string());
  out.write(kMagic, sizeof kMagic);
  const auto ps = params();
  const std::uint32_t count = static_cast<std::uint32_t>(ps.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const Param* p : ps) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(p->name.size());
    const std::uint64_t n = p->value.size();
    out.write(reinterpret_cast<const char*>(&name_len), sizeof name_len);
    out.write(p->name.data(), name_len);
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!out) throw std::runtime_error("short write: " + file.string());
}

void Network::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read weights: " + file.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("corrupt weight blob (bad magic): " + file.string());
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  auto ps = params();
  if (!in || count != ps.size()) {
    throw std::runtime_error("weight blob does not match network layout: " +
                             file.string());
  }
  for (Param* p : ps) {
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!in || name != p->name || n != p->value.size()) {
      throw std::runtime_error("weight blob mismatch at " + p->name + ": " +
                               file.string());
    }
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw std::runtime_error("truncated weight blob: " + file.string());
    for (float v : p->value) {
      if (!std::isfinite(v))
        throw std::runtime_error("non-finite weight in " + file.string());
    }
  }
}

Adam::Adam(std::vector<Param*> params, float lr, float beta1, float beta2,
           float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  for (Param* p : params_) {
    m_.emplace_back(p->value.size(), 0.0f);
    v_.emplace_back(p->value.size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  const float step_size = static_cast<float>(lr_ / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g * g;
      p.value[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + eps_);
    }
  }
}

}  // namespace wmlab::nn
