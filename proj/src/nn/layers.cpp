#include "tasl/nn/layers.hpp"

#include <cmath>

#include "../rng.hpp"

namespace tasl::nn {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<double> Init::uniform(const std::string& key, std::size_t n, double bound) const {
  if (meta_mode()) return {};
  detail::FastRng rng(detail::mix_seed(seed_, fnv1a(key)));
  std::vector<double> v(n);
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return v;
}

std::vector<NamedTensor> Module::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  collect(prefix, true, out);
  return out;
}

std::vector<NamedTensor> Module::buffers(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  collect(prefix, false, out);
  return out;
}

void Module::collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const {
  for (const auto& [name, t] : params ? params_ : buffers_) out.push_back({prefix + name, *t});
  for (const auto& [name, m] : children_) m->collect(prefix + name + ".", params, out);
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, m] : children_) m->set_training(on);
}

Tensor& Module::add_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, std::make_unique<Tensor>(std::move(t)));
  return *params_.back().second;
}

Tensor& Module::add_buffer(const std::string& name, Tensor t) {
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(t)));
  return *buffers_.back().second;
}

namespace {

Tensor param_tensor(const Shape& shape, std::vector<double> values) {
  if (meta_mode()) return Tensor::zeros(shape);
  return Tensor::from(shape, std::move(values));
}

}  // namespace

Linear::Linear(int in, int out, bool bias, const Init& init, const std::string& key) : in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  const auto n = static_cast<std::size_t>(in) * out;
  w_ = &add_param("weight", param_tensor({in, out}, init.uniform(key + ".weight", n, bound)));
  if (bias) b_ = &add_param("bias", param_tensor({out}, init.uniform(key + ".bias", out, bound)));
}

LayerNorm::LayerNorm(int channels) {
  gamma_ = &add_param("weight", Tensor::full({channels}, 1.0));
  beta_ = &add_param("bias", Tensor::zeros({channels}));
}

BatchNorm::BatchNorm(int channels, double momentum) : momentum_(momentum) {
  gamma_ = &add_param("weight", Tensor::full({channels}, 1.0));
  beta_ = &add_param("bias", Tensor::zeros({channels}));
  mean_ = &add_buffer("running_mean", Tensor::zeros({channels}));
  var_ = &add_buffer("running_var", Tensor::full({channels}, 1.0));
}

Tensor BatchNorm::operator()(const Tensor& x) const {
  return batch_norm(x, *gamma_, *beta_, mean_->values(), var_->values(), training(), momentum_);
}

Conv3d::Conv3d(int cin, int cout, std::array<int, 3> kernel, std::array<int, 3> stride, std::array<int, 3> pad,
               bool bias, const Init& init, const std::string& key)
    : stride_(stride), pad_(pad) {
  const int fan_in = kernel[0] * kernel[1] * kernel[2] * cin;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  const auto n = static_cast<std::size_t>(fan_in) * cout;
  w_ = &add_param("weight",
                  param_tensor({kernel[0], kernel[1], kernel[2], cin, cout}, init.uniform(key + ".weight", n, bound)));
  if (bias) b_ = &add_param("bias", param_tensor({cout}, init.uniform(key + ".bias", cout, bound)));
}

CausalConv1d::CausalConv1d(int cin, int cout, int kernel, int dilation, const Init& init, const std::string& key)
    : dilation_(dilation) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel * cin));
  const auto n = static_cast<std::size_t>(kernel) * cin * cout;
  w_ = &add_param("weight", param_tensor({kernel, cin, cout}, init.uniform(key + ".weight", n, bound)));
  b_ = &add_param("bias", param_tensor({cout}, init.uniform(key + ".bias", cout, bound)));
}

double global_grad_norm(const std::vector<NamedTensor>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

}  // namespace tasl::nn
