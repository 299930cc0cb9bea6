#include "wmlab/victim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "wmlab/imageio.hpp"
#include "wmlab/nn/convert.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;
using nn::Network;
using nn::NetworkSpec;
using nn::Tape;
using nn::Tensor;

void TrainingConfig::validate() const {
  auto bad = [](const std::string& why) {
    throw std::invalid_argument("TrainingConfig: " + why);
  };
  if (!(beta1 > 0.0) || !(beta2 > 0.0)) bad("beta1 and beta2 must be > 0");
  if (!(beta3 >= 0.0)) bad("beta3 must be >= 0");
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 2) bad("batch_size must be >= 2");
  if (!(learning_rate > 0.0) || !(disc_learning_rate > 0.0)) {
    bad("learning rates must be > 0");
  }
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    bad("lr_schedule must be constant or cosine");
  }
}

void to_json(json& j, const TrainingConfig& c) {
  j = json{{"beta1", c.beta1},
           {"beta2", c.beta2},
           {"beta3", c.beta3},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"disc_learning_rate", c.disc_learning_rate},
           {"lr_schedule", c.lr_schedule},
           {"null_sample_source", c.null_sample_source},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainingConfig& c) {
  TrainingConfig d;
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.beta3 = j.value("beta3", d.beta3);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.disc_learning_rate = j.value("disc_learning_rate", d.disc_learning_rate);
  c.lr_schedule = j.value("lr_schedule", d.lr_schedule);
  c.null_sample_source = j.value("null_sample_source", d.null_sample_source);
  c.seed = j.value("seed", d.seed);
}

namespace nn {

void to_json(json& j, const NetworkSpec& s) {
  j = json{{"kind", std::string(to_string(s.kind))},
           {"in_channels", s.in_channels},
           {"out_channels", s.out_channels},
           {"base_width", s.base_width},
           {"depth", s.depth},
           {"seed", s.seed}};
}

void from_json(const json& j, NetworkSpec& s) {
  s.kind = net_kind_from_string(j.at("kind").get<std::string>());
  s.in_channels = j.at("in_channels");
  s.out_channels = j.at("out_channels");
  s.base_width = j.at("base_width");
  s.depth = j.at("depth");
  s.seed = j.at("seed");
}

}  // namespace nn

namespace {

// d/dy mean((y - t)^2), written into `grad`; returns the loss.
double mse_grad(const Tensor& y, const Tensor& t, Tensor& grad, double weight) {
  nn::require_same(y, t, "mse");
  grad = Tensor(y.n, y.c, y.h, y.w);
  const double n = static_cast<double>(y.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    const double d = double(y.v[i]) - t.v[i];
    acc += d * d;
    grad.v[i] = static_cast<float>(weight * 2.0 * d / n);
  }
  return acc / n;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Mean over the batch of softplus(sign * logit); gradient scaled by `weight`.
double softplus_loss(const Tensor& logits, double sign, Tensor& grad, double weight) {
  grad = Tensor(logits.n, 1, 1, 1);
  double acc = 0.0;
  for (int i = 0; i < logits.n; ++i) {
    const double z = sign * logits.v[i];
    acc += softplus(z);
    grad.v[i] = static_cast<float>(weight * sign * sigm(z) / logits.n);
  }
  return acc / logits.n;
}

std::vector<const ImageTensor*> gather(const std::vector<ImageTensor>& src,
                                       const std::vector<std::size_t>& order,
                                       std::size_t first, std::size_t count) {
  std::vector<const ImageTensor*> out;
  out.reserve(count);
  for (std::size_t i = first; i < first + count; ++i) out.push_back(&src[order[i]]);
  return out;
}

void check_finite(double v, const std::string& what, const json& manifest) {
  if (!std::isfinite(v)) {
    throw TrainingDiverged(what + ": loss became non-finite", manifest);
  }
}

Tensor mark_tensor(const Watermark& delta, int n, int channels) {
  Tensor one = nn::to_tensor(delta.image());
  if (one.c != channels) one = nn::repeat_channels(one, channels);
  Tensor out(n, one.c, one.h, one.w);
  for (int i = 0; i < n; ++i) std::copy_n(one.v.begin(), one.sample(), out.sample_ptr(i));
  return out;
}

}  // namespace

FitResult fit_image_map(const std::vector<ImageTensor>& inputs,
                        const std::vector<ImageTensor>& targets,
                        const NetworkSpec& spec, const TrainingConfig& config,
                        const EpochLog& log) {
  config.validate();
  if (inputs.empty()) throw std::invalid_argument("fit: empty dataset");
  if (inputs.size() != targets.size()) {
    throw std::invalid_argument("fit: inputs and targets differ in count");
  }
  FitResult r;
  r.net = Network::create(spec);
  r.manifest = {{"spec", spec}, {"config", config}, {"samples", inputs.size()}};
  nn::Adam opt(r.net->params(), static_cast<float>(config.learning_rate));
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  json curve = json::array();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t per_epoch = (order.size() + bs - 1) / bs;
  const double total_steps = static_cast<double>(per_epoch) * config.epochs;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++step) {
      if (config.lr_schedule == "cosine") {
        opt.set_learning_rate(static_cast<float>(
            config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps))));
      }
      const std::size_t n = std::min(bs, order.size() - start);
      Tensor x = nn::to_tensor(gather(inputs, order, start, n));
      Tensor t = nn::to_tensor(gather(targets, order, start, n));
      Tape tape;
      Tensor y = r.net->forward(x, &tape);
      Tensor g;
      const double loss = mse_grad(y, t, g, 1.0);
      check_finite(loss, std::string(nn::to_string(spec.kind)), r.manifest);
      opt.zero_grad();
      r.net->backward(tape, g);
      opt.step();
      sum += loss;
      ++batches;
    }
    const json row = {{"epoch", epoch}, {"mse", sum / batches}};
    curve.push_back(row);
    if (log) log(std::string(nn::to_string(spec.kind)), epoch, row);
  }
  r.manifest["loss_curve"] = curve;
  r.manifest["parameter_hash"] = r.net->parameter_hash();
  return r;
}

FitResult train_gnet(const PairSet& data, const NetworkSpec& spec,
                     const TrainingConfig& config, const EpochLog& log) {
  if (spec.kind != nn::NetKind::gnet) {
    throw std::invalid_argument("train_gnet: spec kind must be gnet");
  }
  if (data.size() == 0) throw std::invalid_argument("train_gnet: empty dataset");
  const bool all_constant = std::all_of(data.b.begin(), data.b.end(), [](const ImageTensor& t) {
    const auto d = t.data();
    return std::all_of(d.begin(), d.end(), [&](double v) { return v == d[0]; });
  });
  if (all_constant) {
    throw std::invalid_argument("train_gnet: zero-variance targets (constant images)");
  }
  return fit_image_map(data.a, data.b, spec, config, log);
}

namespace {

Tensor hnet_input(const Network& hnet, const Tensor& b, const Watermark& delta) {
  const int mark_c = hnet.spec().in_channels - b.c;
  if (delta.image().height() != b.h || delta.image().width() != b.w) {
    throw ShapeError("embed: watermark " + delta.image().shape().str() +
                     " vs carrier " + std::to_string(b.h) + "x" + std::to_string(b.w));
  }
  return nn::concat_channels(b, mark_tensor(delta, b.n, mark_c));
}

}  // namespace

ImageTensor embed(const Network& hnet, const ImageTensor& b, const Watermark& delta) {
  return embed_all(hnet, {b}, delta).front();
}

std::vector<ImageTensor> embed_all(const Network& hnet, const std::vector<ImageTensor>& b,
                                   const Watermark& delta) {
  std::vector<ImageTensor> out;
  out.reserve(b.size());
  for (std::size_t start = 0; start < b.size(); start += 32) {
    std::vector<const ImageTensor*> part;
    for (std::size_t i = start; i < std::min(b.size(), start + 32); ++i) {
      if (b[i].channels() != hnet.spec().out_channels) {
        throw ShapeError("embed: carrier " + b[i].shape().str() + " has wrong channel count");
      }
      part.push_back(&b[i]);
    }
    Tensor y = hnet.forward(hnet_input(hnet, nn::to_tensor(part), delta));
    for (int i = 0; i < y.n; ++i) out.push_back(nn::to_image(y, i));
  }
  return out;
}

ImageTensor extract(const Network& enet, const ImageTensor& img) {
  return extract_all(enet, {img}).front();
}

std::vector<ImageTensor> extract_all(const Network& enet,
                                     const std::vector<ImageTensor>& imgs) {
  for (const auto& i : imgs) {
    if (i.channels() != enet.spec().in_channels) {
      throw ShapeError("extract: input " + i.shape().str() + " has wrong channel count");
    }
  }
  return nn::map_images(enet, imgs);
}

Shape VictimBundle::carrier_shape() const {
  const Shape m = delta.image().shape();
  return {m.height, m.width, gnet->spec().in_channels};
}

namespace {

constexpr const char* kNetNames[] = {"gnet", "hnet", "enet", "disc"};

json bundle_manifest(const VictimBundle& b) {
  json j;
  const Network* nets[] = {b.gnet.get(), b.hnet.get(), b.enet.get(), b.disc.get()};
  for (int i = 0; i < 4; ++i) {
    j["networks"][kNetNames[i]] = {{"spec", nets[i]->spec()},
                                   {"file", std::string(kNetNames[i]) + ".bin"},
                                   {"parameter_hash", nets[i]->parameter_hash()},
                                   {"parameter_count", nets[i]->parameter_count()}};
  }
  const auto png = encode_png(b.delta.image());
  j["watermark"] = {{"file", "watermark.png"},
                    {"sha256", sha256_hex(std::as_bytes(std::span(png)))}};
  j["config"] = b.config;
  j["training"] = b.manifest;
  return j;
}

}  // namespace

void VictimBundle::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const Network* nets[] = {gnet.get(), hnet.get(), enet.get(), disc.get()};
  for (int i = 0; i < 4; ++i) nets[i]->save(dir / (std::string(kNetNames[i]) + ".bin"));
  write_png(dir / "watermark.png", delta.image());
  write_file(dir / "manifest.json", bundle_manifest(*this).dump(2) + "\n");
}

std::string VictimBundle::manifest_hash() const {
  return sha256_hex(bundle_manifest(*this).dump(2) + "\n");
}

VictimBundle VictimBundle::load(const std::filesystem::path& dir) {
  const json m = json::parse(read_file(dir / "manifest.json"));
  VictimBundle b;
  std::unique_ptr<Network>* slots[] = {&b.gnet, &b.hnet, &b.enet, &b.disc};
  for (int i = 0; i < 4; ++i) {
    const json& n = m.at("networks").at(kNetNames[i]);
    *slots[i] = Network::create(n.at("spec").get<NetworkSpec>());
    (*slots[i])->load(dir / n.at("file").get<std::string>());
    if ((*slots[i])->parameter_hash() != n.at("parameter_hash").get<std::string>()) {
      throw std::runtime_error("bundle " + dir.string() + ": " + kNetNames[i] +
                               " weights do not match manifest");
    }
  }
  b.delta = Watermark::from_image(read_png(dir / m.at("watermark").at("file").get<std::string>()));
  b.config = m.at("config").get<TrainingConfig>();
  b.manifest = m.at("training");
  return b;
}

VictimBundle joint_train(std::unique_ptr<Network> gnet,
                         const std::vector<ImageTensor>& processed,
                         const std::vector<ImageTensor>& textures,
                         const Watermark& delta, const TrainingConfig& config,
                         const NetworkSpec& hnet_spec, const NetworkSpec& enet_spec,
                         const NetworkSpec& disc_spec, const EpochLog& log) {
  config.validate();
  if (delta.is_null()) throw std::invalid_argument("joint_train: watermark is null");
  if (processed.empty()) throw std::invalid_argument("joint_train: empty dataset");
  if (textures.empty()) {
    throw std::invalid_argument("joint_train: null set needs out-of-domain textures");
  }
  if (!gnet) throw std::invalid_argument("joint_train: missing gnet");
  hnet_spec.validate(gnet->spec().out_channels, delta.image().channels());
  enet_spec.validate(gnet->spec().out_channels, delta.image().channels());
  disc_spec.validate(gnet->spec().out_channels, delta.image().channels());
  const std::string gnet_hash = gnet->parameter_hash();

  VictimBundle v;
  v.gnet = std::move(gnet);
  v.hnet = Network::create(hnet_spec);
  v.enet = Network::create(enet_spec);
  v.disc = Network::create(disc_spec);
  v.delta = delta;
  v.config = config;
  v.manifest = {{"gnet_parameter_hash_before", gnet_hash}, {"samples", processed.size()}};

  std::vector<nn::Param*> gen_params = v.hnet->params();
  for (nn::Param* p : v.enet->params()) gen_params.push_back(p);
  nn::Adam opt(gen_params, static_cast<float>(config.learning_rate));
  nn::Adam dopt(v.disc->params(), static_cast<float>(config.disc_learning_rate));
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(processed.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const int mark_c = hnet_spec.in_channels - hnet_spec.out_channels;
  json curve = json::array();
  int pinned_epochs = 0;
  bool collapse_warned = false;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sf = 0, sm = 0, sa = 0, sd = 0, correct = 0, judged = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const int n = static_cast<int>(std::min(bs, order.size() - start));
      if (n < 2) continue;
      Tensor b = nn::to_tensor(gather(processed, order, start, n));
      Tensor w_mark = mark_tensor(delta, n, delta.image().channels());
      Tensor ones(n, w_mark.c, w_mark.h, w_mark.w, 1.0f);

      // Null set: half processed images, half out-of-domain textures.
      std::vector<const ImageTensor*> null_imgs;
      for (int i = 0; i < n / 2; ++i) null_imgs.push_back(&processed[order[start + i]]);
      std::uniform_int_distribution<std::size_t> pick(0, textures.size() - 1);
      for (int i = n / 2; i < n; ++i) null_imgs.push_back(&textures[pick(rng)]);
      Tensor e_in = nn::to_tensor(null_imgs);

      Tape th;
      Tensor bp = v.hnet->forward(nn::concat_channels(b, mark_tensor(delta, n, mark_c)), &th);
      Tensor res(bp.n, bp.c, bp.h, bp.w);
      for (std::size_t i = 0; i < res.v.size(); ++i) res.v[i] = 0.5f + 0.5f * (bp.v[i] - b.v[i]);

      opt.zero_grad();
      Tensor g_bp;
      const double lf = mse_grad(bp, b, g_bp, config.beta1);

      double lm = 0.0;
      Tensor g;
      {
        Tape te;
        Tensor out = v.enet->forward(bp, &te);
        lm += mse_grad(out, w_mark, g, config.beta2);
        nn::add_inplace(g_bp, v.enet->backward(te, g));
      }
      {
        Tape te;
        Tensor out = v.enet->forward(e_in, &te);
        lm += mse_grad(out, ones, g, config.beta2);
        v.enet->backward(te, g);
      }
      {
        Tape te;
        Tensor out = v.enet->forward(res, &te);
        lm += mse_grad(out, w_mark, g, config.beta2);
        Tensor gr = v.enet->backward(te, g);
        for (std::size_t i = 0; i < gr.v.size(); ++i) g_bp.v[i] += 0.5f * gr.v[i];
      }
      double la = 0.0;
      if (config.beta3 > 0.0) {
        Tape td;
        Tensor logit = v.disc->forward(bp, &td);
        la = softplus_loss(logit, -1.0, g, config.beta3);
        nn::add_inplace(g_bp, v.disc->backward(td, g));
      }
      v.hnet->backward(th, g_bp);
      const double total = config.beta1 * lf + config.beta2 * lm + config.beta3 * la;
      check_finite(total, "joint_train", json{{"config", config}, {"epoch", epoch}});
      opt.step();

      if (config.beta3 > 0.0) {
        dopt.zero_grad();
        double ld = 0.0;
        for (const auto& [img, sign] : {std::pair{&b, -1.0}, std::pair{&bp, 1.0}}) {
          Tape td;
          Tensor logit = v.disc->forward(*img, &td);
          ld += softplus_loss(logit, sign, g, 1.0);
          v.disc->backward(td, g);
          for (float z : logit.v) correct += (sign < 0 ? z > 0 : z < 0) ? 1 : 0;
          judged += logit.n;
        }
        check_finite(ld, "joint_train discriminator", json{{"config", config}, {"epoch", epoch}});
        dopt.step();
        sd += ld;
      }
      sf += lf;
      sm += lm;
      sa += la;
      ++batches;
    }
    const double acc = judged > 0 ? correct / judged : 0.0;
    pinned_epochs = acc >= 1.0 ? pinned_epochs + 1 : 0;
    if (pinned_epochs >= 3) collapse_warned = true;
    const json row = {{"epoch", epoch},
                      {"fidelity", sf / batches},
                      {"mark", sm / batches},
                      {"adv", sa / batches},
                      {"disc", sd / batches},
                      {"disc_accuracy", acc}};
    curve.push_back(row);
    if (log) log("joint", epoch, row);
  }
  const std::string after = v.gnet->parameter_hash();
  if (after != gnet_hash) throw std::logic_error("joint_train: GNet parameters changed");
  v.manifest["gnet_parameter_hash_after"] = after;
  v.manifest["loss_curve"] = curve;
  if (collapse_warned) {
    v.manifest["warnings"] = json::array(
        {"adversarial collapse: discriminator accuracy pinned at 1.0 for 3 consecutive epochs"});
  }
  return v;
}

}  // namespace wmlab
