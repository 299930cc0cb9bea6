#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "wmlab/nn/layers.hpp"
#include "wmlab/nn/tensor.hpp"

namespace wmlab::nn {

enum class NetKind { gnet, hnet, enet, disc, snet, hnet_inverse };

std::string_view to_string(NetKind k);
NetKind net_kind_from_string(std::string_view s);

struct NetworkSpec {
  NetKind kind = NetKind::gnet;
  int in_channels = 3;
  int out_channels = 3;
  int base_width = 16;
  int depth = 3;
  std::uint64_t seed = 0;

  /// Checks the channel contract of the kind; throws std::invalid_argument.
  void validate(int carrier_channels = 3, int mark_channels = 1) const;
  bool operator==(const NetworkSpec&) const = default;
};

/// Activations recorded by a training forward pass.
struct Tape {
  std::vector<Tensor> acts;
};

/// A trainable image network with hand-written backward pass.
///
/// `forward` is const and thread-safe when called without a tape; training
/// (backward, optimiser steps) must be driven by a single writer.
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(spec) {}
  virtual ~Network() = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  static std::unique_ptr<Network> create(const NetworkSpec& spec);

  virtual Tensor forward(const Tensor& x, Tape* tape = nullptr) const = 0;
  /// Gradient w.r.t. the input; parameter gradients are accumulated.
  virtual Tensor backward(const Tape& tape, const Tensor& grad_out) = 0;

  const NetworkSpec& spec() const { return spec_; }
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  void zero_grad();
  std::size_t parameter_count() const;

  /// Hex SHA-256 over every parameter value, in declaration order.
  std::string parameter_hash() const;

  void save(const std::filesystem::path& file) const;
  void load(const std::filesystem::path& file);

 protected:
  virtual void collect(std::vector<Param*>& out) = 0;
  void init_all(std::vector<Conv2d*> convs, std::vector<Upsample2x*> ups);

  NetworkSpec spec_;
};

/// Hand-rolled Adam.
class Adam {
 public:
  Adam(std::vector<Param*> params, float lr, float beta1 = 0.9f,
       float beta2 = 0.999f, float eps = 1e-8f);
  void step();
  void zero_grad();
  float learning_rate() const { return lr_; }
  void set_learning_rate(float lr) { lr_ = lr; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  float lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
};

}  // namespace wmlab::nn
