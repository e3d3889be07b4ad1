#pragma once

#include <memory>
#include <vector>

#include "tasl/eedetect.hpp"
#include "tasl/nn/layers.hpp"

namespace tasl::etic {

struct EticConfig {
  int tic_count = 6;
  int length = 32;
  int kernel = 3;
  std::vector<int> dilations{1, 2, 4};  // one block per entry
  int channels = 25;
  int heads = 3;
  int attention_channels = 27;  // q/k/v width; must split evenly over heads
  int feature_dim = 512;
  bool causal_attention = false;
};

/// Multi-head self-attention over time for x[B, T, C]. The attended values
/// are concatenated with the input and mixed back to C channels.
class TicAttention : public nn::Module {
 public:
  TicAttention(int channels, int attention_channels, int heads, bool causal, const nn::Init& init,
               const std::string& key);
  /// If `weights` is given it receives the attention map [B * heads, T, T].
  nn::Tensor operator()(const nn::Tensor& x, nn::Tensor* weights = nullptr) const;

  nn::Linear& query() { return *q_; }
  nn::Linear& key() { return *k_; }
  nn::Linear& value() { return *v_; }
  nn::Linear& mix() { return *out_; }

 private:
  int heads_, attention_channels_;
  bool causal_;
  nn::Linear* q_;
  nn::Linear* k_;
  nn::Linear* v_;
  nn::Linear* out_;
};

struct EticTrace {
  std::vector<nn::Tensor> conv;       // per block, after the activation
  std::vector<nn::Tensor> attention;  // per block, attention maps
  std::vector<nn::Tensor> blocks;     // per block output
};

class TicBlock : public nn::Module {
 public:
  TicBlock(int in_channels, const EticConfig& cfg, int dilation, const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x, EticTrace* trace = nullptr) const;

  nn::CausalConv1d& conv() { return *conv_; }
  TicAttention& attention() { return *attn_; }

 private:
  nn::CausalConv1d* conv_;
  TicAttention* attn_;
  nn::Linear* residual_ = nullptr;  // only when the width changes
};

class EticNet : public nn::Module {
 public:
  EticNet(const EticConfig& cfg, const nn::Init& init, const std::string& key = "etic");

  /// tics[B, tic_count, length] in 8-bit intensity units -> [B, feature_dim].
  nn::Tensor operator()(const nn::Tensor& tics, EticTrace* trace = nullptr) const;
  const EticConfig& config() const { return cfg_; }

 private:
  EticConfig cfg_;
  std::vector<TicBlock*> blocks_;
  nn::Linear* head_;
};

/// Row-major [tic_count, F] values of an earliest-enhanced set.
std::vector<double> tic_matrix(const detect::EarliestEnhancedSet& set, int tic_count = 6, int length = 32);

}  // namespace tasl::etic
