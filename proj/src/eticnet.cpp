#include "tasl/eticnet.hpp"

#include <limits>

#include "tasl/error.hpp"

namespace tasl::etic {

using nn::Tensor;

TicAttention::TicAttention(int channels, int attention_channels, int heads, bool causal, const nn::Init& init,
                           const std::string& key)
    : heads_(heads), attention_channels_(attention_channels), causal_(causal) {
  if (heads < 1 || attention_channels % heads != 0) {
    throw ParameterError("attention width " + std::to_string(attention_channels) + " does not split over " +
                         std::to_string(heads) + " heads");
  }
  q_ = &add_module("q", std::make_unique<nn::Linear>(channels, attention_channels, true, init, key + ".q"));
  k_ = &add_module("k", std::make_unique<nn::Linear>(channels, attention_channels, true, init, key + ".k"));
  v_ = &add_module("v", std::make_unique<nn::Linear>(channels, attention_channels, true, init, key + ".v"));
  out_ = &add_module("out",
                     std::make_unique<nn::Linear>(channels + attention_channels, channels, true, init, key + ".out"));
}

Tensor TicAttention::operator()(const Tensor& x, Tensor* weights) const {
  const int b = x.dim(0), t = x.dim(1);
  const int hd = attention_channels_ / heads_;
  auto split = [&](const Tensor& y) {
    return nn::reshape(nn::permute(nn::reshape(y, {b, t, heads_, hd}), {0, 2, 1, 3}), {b * heads_, t, hd});
  };
  const auto q = split((*q_)(x));
  const auto k = split((*k_)(x));
  const auto v = split((*v_)(x));
  const auto scores = nn::bmm(q, k, false, true);
  Tensor attn;
  if (causal_) {
    std::vector<double> mask(static_cast<std::size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i) {
      for (int j = i + 1; j < t; ++j) mask[static_cast<std::size_t>(i) * t + j] = -std::numeric_limits<double>::infinity();
    }
    attn = nn::masked_softmax_last(scores, mask, 1, 1);
  } else {
    attn = nn::softmax_last(scores);
  }
  if (weights) *weights = attn;
  auto ctx = nn::bmm(attn, v);
  ctx = nn::reshape(nn::permute(nn::reshape(ctx, {b, heads_, t, hd}), {0, 2, 1, 3}), {b, t, attention_channels_});
  return (*out_)(nn::concat_last({x, ctx}));
}

TicBlock::TicBlock(int in_channels, const EticConfig& cfg, int dilation, const nn::Init& init, const std::string& key) {
  conv_ = &add_module("conv", std::make_unique<nn::CausalConv1d>(in_channels, cfg.channels, cfg.kernel, dilation, init,
                                                                  key + ".conv"));
  attn_ = &add_module("attn", std::make_unique<TicAttention>(cfg.channels, cfg.attention_channels, cfg.heads,
                                                             cfg.causal_attention, init, key + ".attn"));
  if (in_channels != cfg.channels) {
    residual_ = &add_module("residual",
                            std::make_unique<nn::Linear>(in_channels, cfg.channels, false, init, key + ".residual"));
  }
}

Tensor TicBlock::operator()(const Tensor& x, EticTrace* trace) const {
  const auto h = nn::relu((*conv_)(x));
  Tensor weights;
  const auto a = (*attn_)(h, trace ? &weights : nullptr);
  const auto out = nn::add(a, residual_ ? (*residual_)(x) : x);
  if (trace) {
    trace->conv.push_back(h);
    trace->attention.push_back(weights);
    trace->blocks.push_back(out);
  }
  return out;
}

EticNet::EticNet(const EticConfig& cfg, const nn::Init& init, const std::string& key) : cfg_(cfg) {
  if (cfg.dilations.empty()) throw ParameterError("ETIC needs at least one block");
  int in = cfg.tic_count;
  for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
    const auto name = "block" + std::to_string(i);
    blocks_.push_back(
        &add_module(name, std::make_unique<TicBlock>(in, cfg, cfg.dilations[i], init, key + "." + name)));
    in = cfg.channels;
  }
  head_ = &add_module("head", std::make_unique<nn::Linear>(cfg.channels, cfg.feature_dim, true, init, key + ".head"));
}

Tensor EticNet::operator()(const Tensor& tics, EticTrace* trace) const {
  if (tics.rank() != 3 || tics.dim(1) != cfg_.tic_count || tics.dim(2) < 1) {
    throw ShapeError("ETIC expects [B, " + std::to_string(cfg_.tic_count) + ", T] TICs, got " +
                     nn::shape_string(tics.shape()));
  }
  if (tics.dim(2) != cfg_.length) {
    throw ShapeError("ETIC expects TICs of length " + std::to_string(cfg_.length) + ", got " +
                     std::to_string(tics.dim(2)));
  }
  auto x = nn::permute(nn::scale(tics, 1.0 / 255.0), {0, 2, 1});
  for (const auto* block : blocks_) x = (*block)(x, trace);
  return (*head_)(nn::mean_axis(x, 1));
}

std::vector<double> tic_matrix(const detect::EarliestEnhancedSet& set, int tic_count, int length) {
  if (static_cast<int>(set.entries.size()) != tic_count) {
    throw ShapeError("expected " + std::to_string(tic_count) + " TICs, got " + std::to_string(set.entries.size()));
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(tic_count) * length);
  for (const auto& e : set.entries) {
    if (static_cast<int>(e.tic.size()) != length) {
      throw ShapeError("TIC length " + std::to_string(e.tic.size()) + " != " + std::to_string(length));
    }
    out.insert(out.end(), e.tic.begin(), e.tic.end());
  }
  return out;
}

}  // namespace tasl::etic
