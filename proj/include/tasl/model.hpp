#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tasl/cmtnet.hpp"
#include "tasl/config.hpp"
#include "tasl/eticnet.hpp"

namespace tasl {

struct ModelConfig {
  etic::EticConfig etic;
  cmt::CmtConfig cmt = cmt::CmtConfig::full();
  int clinical_dim = 0;
  std::uint64_t init_seed = 0;

  static ModelConfig micro();
  /// Reads `model.*` keys; missing keys keep the values of `base`.
  static ModelConfig from_flat(const FlatConfig& flat, const ModelConfig& base);
  void to_flat(FlatConfig& flat) const;
  static std::vector<std::string> flat_keys();
};

/// The two-branch network: TIC branch, video branch and the fusing classifier.
class TaslNet : public nn::Module {
 public:
  explicit TaslNet(const ModelConfig& cfg);

  struct Output {
    nn::Tensor z_tic;   // [B, 512]
    nn::Tensor z_bus;   // [B, 512]
    nn::Tensor logits;  // [B]
  };
  /// tics[B, 6, F] in intensity units, video[B, F, H, W, 3] in [0, 1],
  /// clinical[B, clinical_dim] or undefined.
  Output operator()(const nn::Tensor& tics, const nn::Tensor& video, const nn::Tensor& clinical = {}) const;

  const ModelConfig& config() const { return cfg_; }
  etic::EticNet& etic() { return *etic_; }
  cmt::CmtNet& cmt() { return *cmt_; }
  cmt::Classifier& classifier() { return *cls_; }

  std::vector<nn::NamedTensor> etic_parameters() const { return etic_->parameters("etic"); }
  std::vector<nn::NamedTensor> cmt_parameters() const { return cmt_->parameters("cmt"); }

 private:
  ModelConfig cfg_;
  etic::EticNet* etic_;
  cmt::CmtNet* cmt_;
  cmt::Classifier* cls_;
};

}  // namespace tasl
