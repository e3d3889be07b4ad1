#include "tasl/cmtnet.hpp"

#include <algorithm>
#include <cmath>

#include "tasl/error.hpp"

namespace tasl::cmt {

using nn::Shape;
using nn::Tensor;

CmtConfig CmtConfig::full() { return CmtConfig{}; }

CmtConfig CmtConfig::micro() {
  CmtConfig c;
  c.frames = 32;
  c.height = 32;
  c.width = 64;
  c.depths = {1, 1, 1, 1};
  c.trans_channels = {8, 16, 32, 64};
  c.conv_mid = {8, 16, 32, 32};
  c.conv_out = {16, 32, 64, 64};
  c.heads = {2, 2, 4, 4};
  c.window = {2, 4, 4};
  return c;
}

void CmtConfig::validate() const {
  const std::size_t s = depths.size();
  if (s == 0 || trans_channels.size() != s || conv_mid.size() != s || conv_out.size() != s || heads.size() != s) {
    throw ParameterError("CMT stage lists must have equal, non-zero length");
  }
  for (std::size_t i = 0; i < s; ++i) {
    if (depths[i] < 1) throw ParameterError("stage depth must be >= 1");
    if (heads[i] < 1 || trans_channels[i] % heads[i] != 0) {
      throw ParameterError("stage " + std::to_string(i) + ": " + std::to_string(heads[i]) +
                           " heads do not divide " + std::to_string(trans_channels[i]) + " channels");
    }
    if (i > 0 && trans_channels[i] != 2 * trans_channels[i - 1]) {
      throw ParameterError("transformer width must double per stage");
    }
  }
  for (int d : window) {
    if (d < 1) throw ParameterError("window dims must be >= 1");
  }
  if (frames < 1 || height < 1 || width < 1 || in_channels < 1 || feature_dim < 1 || mlp_ratio < 1) {
    throw ParameterError("CMT dimensions must be positive");
  }
}

Shape CmtTrace::find(const std::string& name) const {
  for (const auto& [n, s] : shapes) {
    if (n == name) return s;
  }
  throw ParameterError("no traced tensor named " + name);
}

namespace {

struct WindowPlan {
  std::array<int, 3> size, win, shift, padded;
  int windows = 0;
  int tokens = 0;
};

WindowPlan plan_windows(const Tensor& x, std::array<int, 3> window, bool shifted) {
  WindowPlan p;
  p.windows = 1;
  p.tokens = 1;
  for (int d = 0; d < 3; ++d) {
    p.size[d] = x.dim(1 + d);
    p.win[d] = std::min(window[d], p.size[d]);
    p.shift[d] = shifted && p.size[d] > window[d] ? p.win[d] / 2 : 0;
    p.padded[d] = (p.size[d] + p.win[d] - 1) / p.win[d] * p.win[d];
    p.windows *= p.padded[d] / p.win[d];
    p.tokens *= p.win[d];
  }
  return p;
}

// Row of the (rolled, padded) token at window-partitioned position, for
// every window slot in batch-major order; -1 marks padding.
std::vector<int> window_rows(const WindowPlan& p, int batch) {
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(batch) * p.windows * p.tokens);
  const int nt = p.padded[0] / p.win[0], nh = p.padded[1] / p.win[1], nw = p.padded[2] / p.win[2];
  for (int b = 0; b < batch; ++b) {
    for (int wt = 0; wt < nt; ++wt)
      for (int wh = 0; wh < nh; ++wh)
        for (int ww = 0; ww < nw; ++ww)
          for (int a = 0; a < p.win[0]; ++a)
            for (int c = 0; c < p.win[1]; ++c)
              for (int e = 0; e < p.win[2]; ++e) {
                const int t = (wt * p.win[0] + a + p.shift[0]) % p.padded[0];
                const int h = (wh * p.win[1] + c + p.shift[1]) % p.padded[1];
                const int w = (ww * p.win[2] + e + p.shift[2]) % p.padded[2];
                if (t >= p.size[0] || h >= p.size[1] || w >= p.size[2]) {
                  rows.push_back(-1);
                } else {
                  rows.push_back(((b * p.size[0] + t) * p.size[1] + h) * p.size[2] + w);
                }
              }
  }
  return rows;
}

std::vector<double> shift_mask(const WindowPlan& p) {
  auto region = [&](int d, int c) {
    if (p.shift[d] == 0 || c < p.padded[d] - p.win[d]) return 0;
    return c < p.padded[d] - p.shift[d] ? 1 : 2;
  };
  const int nt = p.padded[0] / p.win[0], nh = p.padded[1] / p.win[1], nw = p.padded[2] / p.win[2];
  const auto n = static_cast<std::size_t>(p.tokens);
  std::vector<double> mask(static_cast<std::size_t>(p.windows) * n * n, 0.0);
  std::vector<int> label(n);
  std::size_t wi = 0;
  for (int wt = 0; wt < nt; ++wt)
    for (int wh = 0; wh < nh; ++wh)
      for (int ww = 0; ww < nw; ++ww, ++wi) {
        std::size_t i = 0;
        for (int a = 0; a < p.win[0]; ++a)
          for (int c = 0; c < p.win[1]; ++c)
            for (int e = 0; e < p.win[2]; ++e, ++i) {
              label[i] = region(0, wt * p.win[0] + a) * 9 + region(1, wh * p.win[1] + c) * 3 +
                         region(2, ww * p.win[2] + e);
            }
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t s = 0; s < n; ++s) mask[(wi * n + r) * n + s] = label[r] == label[s] ? 0.0 : -100.0;
      }
  return mask;
}

}  // namespace

WindowAttention3d::WindowAttention3d(int channels, int heads, std::array<int, 3> window, bool shifted, bool use_mask,
                                     const nn::Init& init, const std::string& key)
    : channels_(channels), heads_(heads), window_(window), shifted_(shifted), use_mask_(use_mask) {
  if (heads < 1 || channels % heads != 0) {
    throw ParameterError(std::to_string(heads) + " heads do not divide " + std::to_string(channels) + " channels");
  }
  q_ = &add_module("q", std::make_unique<nn::Linear>(channels, channels, true, init, key + ".q"));
  k_ = &add_module("k", std::make_unique<nn::Linear>(channels, channels, true, init, key + ".k"));
  v_ = &add_module("v", std::make_unique<nn::Linear>(channels, channels, true, init, key + ".v"));
  proj_ = &add_module("proj", std::make_unique<nn::Linear>(channels, channels, true, init, key + ".proj"));
}

Tensor WindowAttention3d::operator()(const Tensor& x, Tensor* weights) const {
  if (x.rank() != 5 || x.dim(4) != channels_) {
    throw ShapeError("window attention expects [B, T, H, W, " + std::to_string(channels_) + "], got " +
                     nn::shape_string(x.shape()));
  }
  const int b = x.dim(0);
  const auto plan = plan_windows(x, window_, shifted_);
  const int groups = b * plan.windows;
  const int n = plan.tokens;
  const int hd = channels_ / heads_;
  const auto rows = window_rows(plan, b);

  const auto xw = nn::gather_rows(x, rows, {groups, n, channels_});
  auto split = [&](const Tensor& y) {
    return nn::reshape(nn::permute(nn::reshape(y, {groups, n, heads_, hd}), {0, 2, 1, 3}), {groups * heads_, n, hd});
  };
  const auto q = split(nn::scale((*q_)(xw), 1.0 / std::sqrt(static_cast<double>(hd))));
  const auto k = split((*k_)(xw));
  const auto v = split((*v_)(xw));
  const auto scores = nn::bmm(q, k, false, true);
  const bool masked = use_mask_ && (plan.shift[0] || plan.shift[1] || plan.shift[2]);
  Tensor attn;
  if (masked && !nn::meta_mode()) {
    attn = nn::masked_softmax_last(scores, shift_mask(plan), plan.windows, heads_);
  } else {
    attn = nn::softmax_last(scores);
  }
  if (weights) *weights = attn;
  auto ctx = nn::bmm(attn, v);
  ctx = nn::reshape(nn::permute(nn::reshape(ctx, {groups, heads_, n, hd}), {0, 2, 1, 3}), {groups, n, channels_});
  ctx = (*proj_)(ctx);

  // Undo partition, padding and roll.
  std::vector<int> inverse(x.size() / static_cast<std::size_t>(channels_), -1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= 0) inverse[static_cast<std::size_t>(rows[i])] = static_cast<int>(i);
  }
  return nn::gather_rows(ctx, inverse, x.shape());
}

Mlp::Mlp(int channels, int ratio, const nn::Init& init, const std::string& key) {
  fc1_ = &add_module("fc1", std::make_unique<nn::Linear>(channels, channels * ratio, true, init, key + ".fc1"));
  fc2_ = &add_module("fc2", std::make_unique<nn::Linear>(channels * ratio, channels, true, init, key + ".fc2"));
}

ConvBn::ConvBn(int cin, int cout, int kernel, std::array<int, 3> stride, const nn::Init& init, const std::string& key) {
  const int pad = kernel / 2;
  conv_ = &add_module("conv", std::make_unique<nn::Conv3d>(cin, cout, std::array<int, 3>{kernel, kernel, kernel},
                                                           stride, std::array<int, 3>{pad, pad, pad}, false, init,
                                                           key + ".conv"));
  bn_ = &add_module("bn", std::make_unique<nn::BatchNorm>(cout));
}

BottleneckUnit::BottleneckUnit(int channels, int mid, const nn::Init& init, const std::string& key) {
  reduce_ = &add_module("reduce", std::make_unique<ConvBn>(channels, mid, 1, std::array<int, 3>{1, 1, 1}, init,
                                                           key + ".reduce"));
  spatial_ = &add_module("spatial", std::make_unique<ConvBn>(mid, mid, 3, std::array<int, 3>{1, 1, 1}, init,
                                                             key + ".spatial"));
  expand_ = &add_module("expand", std::make_unique<ConvBn>(mid, channels, 1, std::array<int, 3>{1, 1, 1}, init,
                                                           key + ".expand"));
}

Tensor BottleneckUnit::operator()(const Tensor& x, const Tensor& inject, Tensor* tap) const {
  auto h = nn::relu((*reduce_)(x));
  if (inject.defined()) h = nn::add(h, inject);
  const auto s = nn::relu((*spatial_)(h));
  if (tap) *tap = s;
  return nn::relu(nn::add((*expand_)(s), x));
}

VideoConvBlock::VideoConvBlock(int channels, int mid, const nn::Init& init, const std::string& key) {
  unit1_ = &add_module("unit1", std::make_unique<BottleneckUnit>(channels, mid, init, key + ".unit1"));
  unit2_ = &add_module("unit2", std::make_unique<BottleneckUnit>(channels, mid, init, key + ".unit2"));
}

TransformerUnit::TransformerUnit(int channels, int heads, std::array<int, 3> window, bool shifted,
                                 const CmtConfig& cfg, const nn::Init& init, const std::string& key) {
  norm1_ = &add_module("norm1", std::make_unique<nn::LayerNorm>(channels));
  attn_ = &add_module("attn", std::make_unique<WindowAttention3d>(channels, heads, window, shifted, cfg.shift_mask,
                                                                  init, key + ".attn"));
  norm2_ = &add_module("norm2", std::make_unique<nn::LayerNorm>(channels));
  mlp_ = &add_module("mlp", std::make_unique<Mlp>(channels, cfg.mlp_ratio, init, key + ".mlp"));
}

Tensor TransformerUnit::operator()(const Tensor& x, Tensor* after_attention) const {
  const auto a = nn::add(x, (*attn_)((*norm1_)(x)));
  if (after_attention) *after_attention = a;
  return nn::add(a, (*mlp_)((*norm2_)(a)));
}

VideoTransformerBlock::VideoTransformerBlock(int channels, int heads, std::array<int, 3> window, const CmtConfig& cfg,
                                             const nn::Init& init, const std::string& key) {
  regular_ = &add_module("wmsa", std::make_unique<TransformerUnit>(channels, heads, window, false, cfg, init,
                                                                   key + ".wmsa"));
  shifted_ = &add_module("swmsa", std::make_unique<TransformerUnit>(channels, heads, window, true, cfg, init,
                                                                    key + ".swmsa"));
}

Tensor resample_nearest(const Tensor& x, int t, int h, int w) {
  const int b = x.dim(0), st = x.dim(1), sh = x.dim(2), sw = x.dim(3), c = x.dim(4);
  if (st == t && sh == h && sw == w) return x;
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(b) * t * h * w);
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < h; ++j)
        for (int k = 0; k < w; ++k) {
          const int si = static_cast<int>(static_cast<long>(i) * st / t);
          const int sj = static_cast<int>(static_cast<long>(j) * sh / h);
          const int sk = static_cast<int>(static_cast<long>(k) * sw / w);
          rows.push_back(((bi * st + si) * sh + sj) * sw + sk);
        }
  return nn::gather_rows(x, rows, {b, t, h, w, c});
}

FeatureShare::FeatureShare(int cin, int cout, const nn::Init& init, const std::string& key) {
  proj_ = &add_module("proj", std::make_unique<nn::Conv3d>(cin, cout, std::array<int, 3>{1, 1, 1},
                                                           std::array<int, 3>{1, 1, 1}, std::array<int, 3>{0, 0, 0},
                                                           true, init, key + ".proj"));
}

Tensor FeatureShare::operator()(const Tensor& src, const Shape& dest_shape) const {
  if (dest_shape.size() != 5 || src.rank() != 5 || dest_shape[0] != src.dim(0)) {
    throw ShapeError("feature sharing between " + nn::shape_string(src.shape()) + " and " +
                     nn::shape_string(dest_shape));
  }
  return (*proj_)(resample_nearest(src, dest_shape[1], dest_shape[2], dest_shape[3]));
}

PatchMerging::PatchMerging(int channels, const nn::Init& init, const std::string& key) {
  norm_ = &add_module("norm", std::make_unique<nn::LayerNorm>(4 * channels));
  reduce_ = &add_module("reduce", std::make_unique<nn::Linear>(4 * channels, 2 * channels, false, init,
                                                               key + ".reduce"));
}

Tensor PatchMerging::operator()(const Tensor& x) const {
  const int b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
  const int h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  static constexpr int dh[4] = {0, 1, 0, 1};
  static constexpr int dw[4] = {0, 0, 1, 1};
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(b) * t * h2 * w2 * 4);
  for (int bi = 0; bi < b; ++bi)
    for (int ti = 0; ti < t; ++ti)
      for (int i = 0; i < h2; ++i)
        for (int j = 0; j < w2; ++j)
          for (int q = 0; q < 4; ++q) {
            const int y = 2 * i + dh[q], xx = 2 * j + dw[q];
            rows.push_back(y < h && xx < w ? ((bi * t + ti) * h + y) * w + xx : -1);
          }
  auto merged = nn::reshape(nn::gather_rows(x, rows, {b * t * h2 * w2 * 4, c}), {b, t, h2, w2, 4 * c});
  return (*reduce_)((*norm_)(merged));
}

MutualLayer::MutualLayer(int conv_channels, int conv_mid, int trans_channels, int heads, const CmtConfig& cfg,
                         const nn::Init& init, const std::string& key) {
  vcb_ = &add_module("vcb", std::make_unique<VideoConvBlock>(conv_channels, conv_mid, init, key + ".vcb"));
  vtb_ = &add_module("vtb", std::make_unique<VideoTransformerBlock>(trans_channels, heads, cfg.window, cfg, init,
                                                                    key + ".vtb"));
  c2t_ = &add_module("c2t", std::make_unique<FeatureShare>(conv_mid, trans_channels, init, key + ".c2t"));
  t2c_ = &add_module("t2c", std::make_unique<FeatureShare>(trans_channels, conv_mid, init, key + ".t2c"));
}

std::pair<Tensor, Tensor> MutualLayer::operator()(const Tensor& conv, const Tensor& trans) const {
  Tensor fc2;
  const auto fc3 = vcb_->unit1()(conv, {}, &fc2);
  const auto ft0 = nn::add(trans, (*c2t_)(fc2, trans.shape()));
  Tensor ft1;
  const auto ft2 = vtb_->regular()(ft0, &ft1);
  Shape mid_shape = fc3.shape();
  mid_shape.back() = fc2.dim(4);
  const auto fc6 = vcb_->unit2()(fc3, (*t2c_)(ft1, mid_shape));
  const auto ft4 = vtb_->shifted()(ft2);
  return {fc6, ft4};
}

CmtNet::CmtNet(const CmtConfig& cfg, const nn::Init& init, const std::string& key) : cfg_(cfg) {
  cfg.validate();
  const int c0 = cfg.trans_channels[0];
  stem_ = &add_module("stem", std::make_unique<nn::Conv3d>(cfg.in_channels, c0, cfg.stem_kernel, cfg.stem_kernel,
                                                           std::array<int, 3>{0, 0, 0}, false, init, key + ".stem"));
  stem_bn_ = &add_module("stem_bn", std::make_unique<nn::BatchNorm>(c0));
  conv_entry_ = &add_module("conv_entry", std::make_unique<ConvBn>(c0, cfg.conv_out[0], 1, std::array<int, 3>{1, 1, 1},
                                                                   init, key + ".conv_entry"));
  const std::size_t stages = cfg.depths.size();
  layers_.resize(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    const auto sname = "stage" + std::to_string(s + 1);
    if (s > 0) {
      conv_down_.push_back(&add_module(
          sname + ".conv_down", std::make_unique<ConvBn>(cfg.conv_out[s - 1], cfg.conv_out[s], 1,
                                                         std::array<int, 3>{1, 2, 2}, init, key + "." + sname + ".conv_down")));
      merge_.push_back(&add_module(sname + ".merge", std::make_unique<PatchMerging>(cfg.trans_channels[s - 1], init,
                                                                                    key + "." + sname + ".merge")));
    }
    for (int l = 0; l < cfg.depths[s]; ++l) {
      const auto lname = sname + ".layer" + std::to_string(l + 1);
      layers_[s].push_back(&add_module(lname, std::make_unique<MutualLayer>(cfg.conv_out[s], cfg.conv_mid[s],
                                                                            cfg.trans_channels[s], cfg.heads[s], cfg,
                                                                            init, key + "." + lname)));
    }
  }
  conv_head_ = &add_module("conv_head", std::make_unique<nn::Linear>(cfg.conv_out.back(), cfg.feature_dim, true, init,
                                                                     key + ".conv_head"));
  trans_norm_ = &add_module("trans_norm", std::make_unique<nn::LayerNorm>(cfg.trans_channels.back()));
  trans_head_ = &add_module("trans_head", std::make_unique<nn::Linear>(cfg.trans_channels.back(), cfg.feature_dim,
                                                                       true, init, key + ".trans_head"));
}

namespace {

Tensor global_pool(const Tensor& x) {
  const int b = x.dim(0), c = x.dim(4);
  return nn::mean_axis(nn::reshape(x, {b, static_cast<int>(x.size() / static_cast<std::size_t>(b * c)), c}), 1);
}

}  // namespace

Tensor CmtNet::operator()(const Tensor& video, CmtTrace* trace) const {
  const Shape expect{video.rank() == 5 ? video.dim(0) : 0, cfg_.frames, cfg_.height, cfg_.width, cfg_.in_channels};
  if (video.rank() != 5 || video.shape() != expect) {
    throw ShapeError("CMT expects " + nn::shape_string(expect) + " input, got " + nn::shape_string(video.shape()));
  }
  auto x = (*stem_bn_)((*stem_)(video));
  if (cfg_.table1_temporal) {
    const int b = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
    if (t % 2 != 0) throw ShapeError("temporal pooling needs an even frame count after the stem");
    x = nn::reshape(nn::mean_axis(nn::reshape(x, {b, t / 2, 2, h * w * c}), 2), {b, t / 2, h, w, c});
  }
  if (trace) trace->record("stem", x);
  auto trans = x;
  auto conv = nn::relu((*conv_entry_)(x));
  for (std::size_t s = 0; s < layers_.size(); ++s) {
    const auto sname = "stage" + std::to_string(s + 1);
    if (s > 0) {
      conv = nn::relu((*conv_down_[s - 1])(conv));
      trans = (*merge_[s - 1])(trans);
      if (trace) trace->record(sname + ".downsample", trans);
    }
    for (const auto* layer : layers_[s]) std::tie(conv, trans) = (*layer)(conv, trans);
    if (trace) {
      trace->record(sname + ".trans", trans);
      trace->record(sname + ".conv", conv);
    }
  }
  const auto conv_feat = (*conv_head_)(global_pool(conv));
  const auto trans_feat = (*trans_head_)(global_pool((*trans_norm_)(trans)));
  auto out = nn::add(conv_feat, trans_feat);
  if (trace) trace->record("feature", out);
  return out;
}

Classifier::Classifier(int feature_dim, int clinical_dim, const nn::Init& init, const std::string& key)
    : clinical_dim_(clinical_dim) {
  if (clinical_dim < 0) throw ParameterError("clinical width must be >= 0");
  fc_ = &add_module("fc", std::make_unique<nn::Linear>(feature_dim + clinical_dim, 1, true, init, key + ".fc"));
}

Tensor Classifier::operator()(const Tensor& etic, const Tensor& cmt, const Tensor& clinical) const {
  auto fused = nn::add(etic, cmt);
  if (clinical_dim_ > 0) {
    if (!clinical.defined() || clinical.rank() != 2 || clinical.dim(0) != fused.dim(0) ||
        clinical.dim(1) != clinical_dim_) {
      throw ShapeError("classifier expects a [B, " + std::to_string(clinical_dim_) + "] clinical vector");
    }
    fused = nn::concat_last({fused, clinical});
  } else if (clinical.defined() && clinical.size() > 0) {
    throw ShapeError("classifier was built without clinical inputs");
  }
  const int b = fused.dim(0);
  return nn::reshape((*fc_)(fused), {b});
}

}  // namespace tasl::cmt
