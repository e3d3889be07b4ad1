#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tasl/nn/ops.hpp"

namespace tasl::nn {

/// Deterministic parameter initializer. Each parameter draws from its own
/// stream keyed by its registered name, so adding a module does not shift
/// the values of the others.
class Init {
 public:
  explicit Init(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t seed() const { return seed_; }
  std::vector<double> uniform(const std::string& key, std::size_t n, double bound) const;

 private:
  std::uint64_t seed_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  /// Learnable tensors, depth-first in registration order.
  std::vector<NamedTensor> parameters(const std::string& prefix = "") const;
  /// Non-learnable state (batch-norm running statistics).
  std::vector<NamedTensor> buffers(const std::string& prefix = "") const;

  void set_training(bool on);
  bool training() const { return training_; }

 protected:
  Tensor& add_param(const std::string& name, Tensor t);
  Tensor& add_buffer(const std::string& name, Tensor t);
  template <typename M>
  M& add_module(const std::string& name, std::unique_ptr<M> m) {
    M& ref = *m;
    children_.emplace_back(name, std::move(m));
    return ref;
  }

 private:
  void collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const;

  bool training_ = true;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

class Linear : public Module {
 public:
  Linear(int in, int out, bool bias, const Init& init, const std::string& key);
  Tensor operator()(const Tensor& x) const { return linear(x, *w_, b_ ? *b_ : Tensor()); }
  Tensor& weight() { return *w_; }
  Tensor* bias() { return b_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_, out_;
  Tensor* w_;
  Tensor* b_ = nullptr;
};

class LayerNorm : public Module {
 public:
  LayerNorm(int channels);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, *gamma_, *beta_); }

 private:
  Tensor* gamma_;
  Tensor* beta_;
};

class BatchNorm : public Module {
 public:
  BatchNorm(int channels, double momentum = 0.1);
  Tensor operator()(const Tensor& x) const;
  Tensor& gamma() { return *gamma_; }
  Tensor& beta() { return *beta_; }
  Tensor& running_mean() { return *mean_; }
  Tensor& running_var() { return *var_; }

 private:
  double momentum_;
  Tensor* gamma_;
  Tensor* beta_;
  Tensor* mean_;
  Tensor* var_;
};

class Conv3d : public Module {
 public:
  Conv3d(int cin, int cout, std::array<int, 3> kernel, std::array<int, 3> stride, std::array<int, 3> pad, bool bias,
         const Init& init, const std::string& key);
  Tensor operator()(const Tensor& x) const { return conv3d(x, *w_, b_ ? *b_ : Tensor(), stride_, pad_); }
  Tensor& weight() { return *w_; }
  Tensor* bias() { return b_; }

 private:
  std::array<int, 3> stride_, pad_;
  Tensor* w_;
  Tensor* b_ = nullptr;
};

class CausalConv1d : public Module {
 public:
  CausalConv1d(int cin, int cout, int kernel, int dilation, const Init& init, const std::string& key);
  Tensor operator()(const Tensor& x) const { return causal_conv1d(x, *w_, *b_, dilation_); }
  Tensor& weight() { return *w_; }
  Tensor& bias() { return *b_; }
  int dilation() const { return dilation_; }

 private:
  int dilation_;
  Tensor* w_;
  Tensor* b_;
};

double global_grad_norm(const std::vector<NamedTensor>& params);

}  // namespace tasl::nn
