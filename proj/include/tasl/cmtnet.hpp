#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "tasl/nn/layers.hpp"

namespace tasl::cmt {

struct CmtConfig {
  int frames = 32;
  int height = 224;
  int width = 448;  // two modalities side by side
  int in_channels = 3;
  std::array<int, 3> stem_kernel{2, 4, 4};  // also the stem stride
  bool table1_temporal = false;             // extra temporal average pooling by 2 after the stem
  std::vector<int> depths{2, 2, 6, 2};
  std::vector<int> trans_channels{96, 192, 384, 768};
  std::vector<int> conv_mid{64, 128, 256, 256};
  std::vector<int> conv_out{128, 256, 512, 512};
  std::vector<int> heads{3, 6, 12, 24};
  std::array<int, 3> window{2, 7, 7};
  int mlp_ratio = 4;
  int feature_dim = 512;
  bool shift_mask = true;  // disable only for the shift-equivariance check

  static CmtConfig full();
  /// Desk-scale variant: 32 x 32 x 64 input, one layer per stage.
  static CmtConfig micro();
  void validate() const;
};

/// Shape log of one forward pass, in evaluation order.
struct CmtTrace {
  std::vector<std::pair<std::string, nn::Shape>> shapes;
  bool keep_tensors = false;  // also keep the feature maps, for visualization
  std::vector<nn::Tensor> tensors;
  void record(const std::string& name, const nn::Tensor& t) {
    shapes.emplace_back(name, t.shape());
    if (keep_tensors) tensors.push_back(t);
  }
  nn::Shape find(const std::string& name) const;
};

/// (3D) window multi-head self-attention for x[B, T, H, W, C]. The window is
/// clipped to the feature size; a shifted block rolls by half a window in
/// the dimensions that are not clipped and masks pairs that wrapped around.
class WindowAttention3d : public nn::Module {
 public:
  WindowAttention3d(int channels, int heads, std::array<int, 3> window, bool shifted, bool use_mask,
                    const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x, nn::Tensor* weights = nullptr) const;

  nn::Linear& proj() { return *proj_; }

 private:
  int channels_, heads_;
  std::array<int, 3> window_;
  bool shifted_, use_mask_;
  nn::Linear* q_;
  nn::Linear* k_;
  nn::Linear* v_;
  nn::Linear* proj_;
};

class Mlp : public nn::Module {
 public:
  Mlp(int channels, int ratio, const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x) const { return (*fc2_)(nn::gelu((*fc1_)(x))); }
  nn::Linear& fc2() { return *fc2_; }

 private:
  nn::Linear* fc1_;
  nn::Linear* fc2_;
};

/// conv -> batch norm, as used throughout the convolution branch.
class ConvBn : public nn::Module {
 public:
  ConvBn(int cin, int cout, int kernel, std::array<int, 3> stride, const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x) const { return (*bn_)((*conv_)(x)); }
  nn::Conv3d& conv() { return *conv_; }
  nn::BatchNorm& bn() { return *bn_; }

 private:
  nn::Conv3d* conv_;
  nn::BatchNorm* bn_;
};

/// One bottleneck unit: 1x1x1 -> 3x3x3 -> 1x1x1 with a residual add before
/// the last activation. `inject`, if defined, is added to the output of the
/// first 1x1x1 stage (the entry point of shared transformer features).
class BottleneckUnit : public nn::Module {
 public:
  BottleneckUnit(int channels, int mid, const nn::Init& init, const std::string& key);
  /// Returns the unit output; `tap` receives the 3x3x3 stage output.
  nn::Tensor operator()(const nn::Tensor& x, const nn::Tensor& inject = {}, nn::Tensor* tap = nullptr) const;

  ConvBn& reduce() { return *reduce_; }
  ConvBn& spatial() { return *spatial_; }
  ConvBn& expand() { return *expand_; }

 private:
  ConvBn* reduce_;
  ConvBn* spatial_;
  ConvBn* expand_;
};

/// Video convolution block: two bottleneck units.
class VideoConvBlock : public nn::Module {
 public:
  VideoConvBlock(int channels, int mid, const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x) const { return (*unit2_)((*unit1_)(x)); }
  BottleneckUnit& unit1() { return *unit1_; }
  BottleneckUnit& unit2() { return *unit2_; }

 private:
  BottleneckUnit* unit1_;
  BottleneckUnit* unit2_;
};

/// Video transformer half-block: x + attn(LN(x)), then + MLP(LN(.)).
class TransformerUnit : public nn::Module {
 public:
  TransformerUnit(int channels, int heads, std::array<int, 3> window, bool shifted, const CmtConfig& cfg,
                  const nn::Init& init, const std::string& key);
  /// `after_attention` receives the output of the attention line.
  nn::Tensor operator()(const nn::Tensor& x, nn::Tensor* after_attention = nullptr) const;
  WindowAttention3d& attention() { return *attn_; }
  Mlp& mlp() { return *mlp_; }

 private:
  nn::LayerNorm* norm1_;
  WindowAttention3d* attn_;
  nn::LayerNorm* norm2_;
  Mlp* mlp_;
};

class VideoTransformerBlock : public nn::Module {
 public:
  VideoTransformerBlock(int channels, int heads, std::array<int, 3> window, const CmtConfig& cfg, const nn::Init& init,
                        const std::string& key);
  nn::Tensor operator()(const nn::Tensor& x) const { return (*shifted_)((*regular_)(x)); }
  TransformerUnit& regular() { return *regular_; }
  TransformerUnit& shifted() { return *shifted_; }

 private:
  TransformerUnit* regular_;
  TransformerUnit* shifted_;
};

/// 1x1x1 projection carrying features from one branch into the other,
/// nearest-resampled onto the destination grid first.
class FeatureShare : public nn::Module {
 public:
  FeatureShare(int cin, int cout, const nn::Init& init, const std::string& key);
  nn::Tensor operator()(const nn::Tensor& src, const nn::Shape& dest_shape) const;
  nn::Conv3d& proj() { return *proj_; }

 private:
  nn::Conv3d* proj_;
};

/// Nearest-neighbour resampling of x[B, T, H, W, C] to (t, h, w).
nn::Tensor resample_nearest(const nn::Tensor& x, int t, int h, int w);

class PatchMerging : public nn::Module {
 public:
  PatchMerging(int channels, const nn::Init& init, const std::string& key);
  /// Concatenates 2x2 spatial neighbourhoods, normalizes, projects 4C -> 2C.
  /// Odd spatial sizes are zero-padded first.
  nn::Tensor operator()(const nn::Tensor& x) const;

 private:
  nn::LayerNorm* norm_;
  nn::Linear* reduce_;
};

/// One conv/transformer layer pair with bidirectional feature sharing.
class MutualLayer : public nn::Module {
 public:
  MutualLayer(int conv_channels, int conv_mid, int trans_channels, int heads, const CmtConfig& cfg,
              const nn::Init& init, const std::string& key);
  std::pair<nn::Tensor, nn::Tensor> operator()(const nn::Tensor& conv, const nn::Tensor& trans) const;

  VideoConvBlock& conv_block() { return *vcb_; }
  VideoTransformerBlock& trans_block() { return *vtb_; }
  FeatureShare& conv_to_trans() { return *c2t_; }
  FeatureShare& trans_to_conv() { return *t2c_; }

 private:
  VideoConvBlock* vcb_;
  VideoTransformerBlock* vtb_;
  FeatureShare* c2t_;
  FeatureShare* t2c_;
};

class CmtNet : public nn::Module {
 public:
  CmtNet(const CmtConfig& cfg, const nn::Init& init, const std::string& key = "cmt");

  /// video[B, frames, height, width, in_channels] scaled to [0, 1] -> [B, feature_dim].
  nn::Tensor operator()(const nn::Tensor& video, CmtTrace* trace = nullptr) const;
  const CmtConfig& config() const { return cfg_; }
  MutualLayer& layer(int stage, int index) { return *layers_[stage][index]; }
  nn::Conv3d& stem() { return *stem_; }

 private:
  CmtConfig cfg_;
  nn::Conv3d* stem_;
  nn::BatchNorm* stem_bn_;
  ConvBn* conv_entry_;
  std::vector<ConvBn*> conv_down_;      // stage transitions of the conv branch
  std::vector<PatchMerging*> merge_;    // stage transitions of the trans branch
  std::vector<std::vector<MutualLayer*>> layers_;
  nn::Linear* conv_head_;
  nn::LayerNorm* trans_norm_;
  nn::Linear* trans_head_;
};

/// Fully connected layer on (etic + cmt), optionally concatenated with a
/// clinical vector, to one logit.
class Classifier : public nn::Module {
 public:
  Classifier(int feature_dim, int clinical_dim, const nn::Init& init, const std::string& key = "cls");
  nn::Tensor operator()(const nn::Tensor& etic, const nn::Tensor& cmt, const nn::Tensor& clinical = {}) const;
  int clinical_dim() const { return clinical_dim_; }
  nn::Linear& fc() { return *fc_; }

 private:
  int clinical_dim_;
  nn::Linear* fc_;
};

}  // namespace tasl::cmt
