#include "tasl/model.hpp"

#include "tasl/error.hpp"

namespace tasl {

namespace {

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

ModelConfig ModelConfig::micro() {
  ModelConfig m;
  m.cmt = cmt::CmtConfig::micro();
  return m;
}

std::vector<std::string> ModelConfig::flat_keys() {
  return {"model.scale",         "model.frames",           "model.video_size",       "model.window",
          "model.table1_temporal", "model.etic_dilations", "model.etic_channels",    "model.etic_causal_attention",
          "model.clinical_dim",  "model.init_seed"};
}

ModelConfig ModelConfig::from_flat(const FlatConfig& flat, const ModelConfig& base) {
  ModelConfig m = base;
  if (const auto scale = flat.raw("model.scale")) {
    if (*scale == "micro") m.cmt = cmt::CmtConfig::micro();
    else if (*scale == "full") m.cmt = cmt::CmtConfig::full();
    else throw ConfigError("model.scale must be 'full' or 'micro', got '" + *scale + "'");
  }
  m.etic.length = m.cmt.frames = flat.get("model.frames", m.cmt.frames);
  const int side = flat.get("model.video_size", m.cmt.height);
  m.cmt.height = side;
  m.cmt.width = 2 * side;
  const auto w = flat.get("model.window", std::vector<int>{m.cmt.window[0], m.cmt.window[1], m.cmt.window[2]});
  if (w.size() != 3) throw ConfigError("model.window needs three entries (t, h, w)");
  m.cmt.window = {w[0], w[1], w[2]};
  m.cmt.table1_temporal = flat.get("model.table1_temporal", m.cmt.table1_temporal);
  m.etic.dilations = flat.get("model.etic_dilations", m.etic.dilations);
  m.etic.channels = flat.get("model.etic_channels", m.etic.channels);
  m.etic.causal_attention = flat.get("model.etic_causal_attention", m.etic.causal_attention);
  m.clinical_dim = flat.get("model.clinical_dim", m.clinical_dim);
  m.init_seed = flat.get("model.init_seed", m.init_seed);
  m.cmt.validate();
  return m;
}

void ModelConfig::to_flat(FlatConfig& flat) const {
  const bool micro_layout = cmt.depths == cmt::CmtConfig::micro().depths &&
                            cmt.trans_channels == cmt::CmtConfig::micro().trans_channels;
  flat.set("model.scale", micro_layout ? "micro" : "full");
  flat.set("model.frames", std::to_string(cmt.frames));
  flat.set("model.video_size", std::to_string(cmt.height));
  flat.set("model.window", join({cmt.window[0], cmt.window[1], cmt.window[2]}));
  flat.set("model.table1_temporal", cmt.table1_temporal ? "true" : "false");
  flat.set("model.etic_dilations", join(etic.dilations));
  flat.set("model.etic_channels", std::to_string(etic.channels));
  flat.set("model.etic_causal_attention", etic.causal_attention ? "true" : "false");
  flat.set("model.clinical_dim", std::to_string(clinical_dim));
  flat.set("model.init_seed", std::to_string(init_seed));
}

TaslNet::TaslNet(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg.etic.feature_dim != cfg.cmt.feature_dim) {
    throw ParameterError("branch feature widths differ: " + std::to_string(cfg.etic.feature_dim) + " vs " +
                         std::to_string(cfg.cmt.feature_dim));
  }
  if (cfg.etic.length != cfg.cmt.frames) throw ParameterError("TIC length and video frame count differ");
  const nn::Init init(cfg.init_seed);
  etic_ = &add_module("etic", std::make_unique<etic::EticNet>(cfg.etic, init, "etic"));
  cmt_ = &add_module("cmt", std::make_unique<cmt::CmtNet>(cfg.cmt, init, "cmt"));
  cls_ = &add_module("cls", std::make_unique<cmt::Classifier>(cfg.etic.feature_dim, cfg.clinical_dim, init, "cls"));
}

TaslNet::Output TaslNet::operator()(const nn::Tensor& tics, const nn::Tensor& video, const nn::Tensor& clinical) const {
  Output out;
  out.z_tic = (*etic_)(tics);
  out.z_bus = (*cmt_)(video);
  out.logits = (*cls_)(out.z_tic, out.z_bus, clinical);
  return out;
}

}  // namespace tasl
