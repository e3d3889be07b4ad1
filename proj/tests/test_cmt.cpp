#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tasl/cmtnet.hpp"
#include "tasl/error.hpp"
#include "tasl/nn/ops.hpp"

using namespace tasl;
using namespace tasl::cmt;
using nn::Shape;
using nn::Tensor;

namespace {

Tensor probe(const Tensor& y, unsigned seed = 99) {
  auto w = oracle::random_tensor(y.shape(), seed, 1.0, false);
  return nn::sum_all(nn::mul(y, w));
}

Tensor random_video(const CmtConfig& c, int batch, unsigned seed) {
  auto v = oracle::random_tensor({batch, c.frames, c.height, c.width, c.in_channels}, seed, 0.5, false);
  for (auto& x : v.values()) x += 0.5;
  return v;
}

void zero(Tensor& t) {
  for (auto& v : t.values()) v = 0.0;
}
void zero(nn::Linear& l) {
  zero(l.weight());
  if (l.bias()) zero(*l.bias());
}
void zero(nn::Conv3d& c) {
  zero(c.weight());
  if (c.bias()) zero(*c.bias());
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
  CHECK(worst <= tol);
}

// Plain loops for one conv -> batch norm (inference) -> optional residual -> relu step.
struct Grid5 {
  int b, t, h, w, c;
  std::vector<double> v;
  double at(int bi, int ti, int hi, int wi, int ci) const {
    if (ti < 0 || ti >= t || hi < 0 || hi >= h || wi < 0 || wi >= w) return 0.0;
    return v[(((static_cast<std::size_t>(bi) * t + ti) * h + hi) * w + wi) * c + ci];
  }
};

Grid5 conv_bn_direct(const Grid5& x, ConvBn& layer, int k) {
  auto& w = layer.conv().weight().values();
  auto& bn = layer.bn();
  const int cout = layer.conv().weight().dim(4), p = k / 2;
  Grid5 y{x.b, x.t, x.h, x.w, cout, {}};
  for (int bi = 0; bi < x.b; ++bi)
    for (int t = 0; t < x.t; ++t)
      for (int h = 0; h < x.h; ++h)
        for (int ww = 0; ww < x.w; ++ww)
          for (int o = 0; o < cout; ++o) {
            double s = 0;
            for (int a = 0; a < k; ++a)
              for (int q = 0; q < k; ++q)
                for (int r = 0; r < k; ++r)
                  for (int ci = 0; ci < x.c; ++ci)
                    s += x.at(bi, t + a - p, h + q - p, ww + r - p, ci) *
                         w[((((a * k + q) * k + r) * x.c) + ci) * cout + o];
            const double m = bn.running_mean().values()[o], var = bn.running_var().values()[o];
            y.v.push_back((s - m) / std::sqrt(var + 1e-5) * bn.gamma().values()[o] + bn.beta().values()[o]);
          }
  return y;
}

Grid5 relu(Grid5 g, const Grid5* residual = nullptr) {
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = std::max(0.0, g.v[i] + (residual ? residual->v[i] : 0.0));
  return g;
}

void randomize_bn(nn::BatchNorm& bn, unsigned seed) {
  const auto n = bn.gamma().size();
  auto r = oracle::random_tensor({static_cast<int>(n)}, seed, 0.5, false);
  for (std::size_t i = 0; i < n; ++i) {
    bn.gamma().values()[i] = 1.0 + r.values()[i];
    bn.beta().values()[i] = 0.3 * r.values()[(i + 1) % n];
    bn.running_mean().values()[i] = 0.2 * r.values()[(i + 2) % n];
    bn.running_var().values()[i] = 0.5 + std::fabs(r.values()[(i + 3) % n]);
  }
}

CmtConfig tiny() {
  auto c = CmtConfig::micro();
  c.frames = 4;
  return c;
}

}  // namespace

TEST_CASE("stage shapes follow the architecture table") {
  nn::MetaGuard meta;
  for (bool table1 : {true, false}) {
    auto cfg = CmtConfig::full();
    cfg.table1_temporal = table1;
    CmtNet net(cfg, nn::Init(1));
    CmtTrace trace;
    const auto z = net(Tensor::zeros({1, 32, 224, 448, 3}), &trace);
    const int t = table1 ? 8 : 16;
    CHECK(trace.find("stem") == Shape{1, t, 56, 112, 96});
    CHECK(trace.find("stage1.trans") == Shape{1, t, 56, 112, 96});
    CHECK(trace.find("stage2.downsample") == Shape{1, t, 28, 56, 192});
    CHECK(trace.find("stage2.trans") == Shape{1, t, 28, 56, 192});
    CHECK(trace.find("stage3.trans") == Shape{1, t, 14, 28, 384});
    CHECK(trace.find("stage4.downsample") == Shape{1, t, 7, 14, 768});
    CHECK(trace.find("stage4.trans") == Shape{1, t, 7, 14, 768});
    CHECK(trace.find("stage1.conv") == Shape{1, t, 56, 112, 128});
    CHECK(trace.find("stage4.conv") == Shape{1, t, 7, 14, 512});
    CHECK(z.shape() == Shape{1, 512});
  }
}

TEST_CASE("full-size configuration layout") {
  const auto c = CmtConfig::full();
  CHECK(c.depths == std::vector<int>{2, 2, 6, 2});
  CHECK(c.trans_channels == std::vector<int>{96, 192, 384, 768});
  CHECK(c.heads == std::vector<int>{3, 6, 12, 24});
  CHECK(c.stem_kernel == std::array<int, 3>{2, 4, 4});
  CHECK(c.window == std::array<int, 3>{2, 7, 7});
  auto bad = c;
  bad.heads[1] = 5;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("sharing widths follow the architecture table") {
  CmtNet net(CmtConfig::full(), nn::Init(1));
  const int into_trans[] = {96, 192, 384, 768}, into_conv[] = {64, 128, 256, 256};
  for (int s = 0; s < 4; ++s) {
    auto& layer = net.layer(s, 0);
    CHECK(layer.conv_to_trans().proj().weight().dim(4) == into_trans[s]);
    CHECK(layer.trans_to_conv().proj().weight().dim(4) == into_conv[s]);
  }
}

TEST_CASE("stem of a zero video is zero before normalization") {
  auto cfg = CmtConfig::micro();
  CmtNet net(cfg, nn::Init(2));
  const auto y = net.stem()(Tensor::zeros({1, 32, 32, 64, 3}));
  CHECK(y.shape() == Shape{1, 16, 8, 16, 8});
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("inference output of a sample does not depend on the rest of the batch") {
  const auto cfg = tiny();
  CmtNet net(cfg, nn::Init(3));
  net.set_training(false);
  const auto v2 = random_video(cfg, 2, 4);
  const std::size_t per = v2.size() / 2;
  const auto v1 = Tensor::from({1, cfg.frames, cfg.height, cfg.width, 3},
                               std::vector<double>(v2.values().begin(), v2.values().begin() + per));
  const auto a = net(v1), b = net(v2);
  for (int i = 0; i < 512; ++i) CHECK(std::fabs(a.values()[i] - b.values()[i]) < 1e-12);
}

TEST_CASE("rejects the wrong input geometry") {
  CmtNet net(tiny(), nn::Init(3));
  CHECK_THROWS_AS(net(Tensor::zeros({1, 4, 32, 32, 3})), ShapeError);
  auto odd = tiny();
  odd.frames = 6;
  odd.table1_temporal = true;
  CmtNet pooled(odd, nn::Init(3));
  CHECK_THROWS_AS(pooled(Tensor::zeros({1, 6, 32, 64, 3})), ShapeError);
}

TEST_CASE("video convolution block matches a direct transcription") {
  nn::Init init(5);
  VideoConvBlock vcb(6, 3, init, "vcb");
  vcb.set_training(false);
  unsigned seed = 10;
  for (auto* u : {&vcb.unit1(), &vcb.unit2()})
    for (auto* cb : {&u->reduce(), &u->spatial(), &u->expand()}) randomize_bn(cb->bn(), seed++);
  auto x = oracle::random_tensor({1, 2, 4, 4, 6}, 6, 1.0, false);
  for (auto& v : x.values()) v = std::fabs(v);
  const auto y = vcb(x);
  CHECK(y.shape() == x.shape());

  Grid5 g{1, 2, 4, 4, 6, x.values()};
  for (auto* u : {&vcb.unit1(), &vcb.unit2()}) {
    const auto f1 = relu(conv_bn_direct(g, u->reduce(), 1));
    const auto f2 = relu(conv_bn_direct(f1, u->spatial(), 3));
    g = relu(conv_bn_direct(f2, u->expand(), 1), &g);
  }
  for (std::size_t i = 0; i < g.v.size(); ++i) CHECK(std::fabs(y.values()[i] - g.v[i]) < 1e-12);
}

TEST_CASE("video convolution block differentiates") {
  nn::Init init(6);
  VideoConvBlock vcb(8, 4, init, "vcb");
  auto x = oracle::random_tensor({2, 4, 4, 8}, 7);
  std::vector<Tensor> wrt{x};
  for (auto& p : vcb.parameters()) wrt.push_back(p.tensor);
  const auto rep = oracle::grad_check([&] { return probe(vcb(nn::reshape(x, {1, 2, 4, 4, 8}))); }, wrt, 8);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("zeroed final projections make the blocks the identity") {
  auto cfg = CmtConfig::micro();
  nn::Init init(7);
  TransformerUnit unit(8, 2, {2, 4, 4}, true, cfg, init, "u");
  zero(unit.attention().proj());
  zero(unit.mlp().fc2());
  const auto x = oracle::random_tensor({1, 4, 8, 8, 8}, 8, 1.0, false);
  check_close(unit(x), x, 0.0);

  VideoConvBlock vcb(6, 3, init, "vcb");
  vcb.set_training(false);
  zero(vcb.unit1().expand().conv());
  zero(vcb.unit2().expand().conv());
  auto xp = oracle::random_tensor({1, 2, 4, 4, 6}, 9, 1.0, false);
  for (auto& v : xp.values()) v = std::fabs(v);  // block inputs are post-activation
  check_close(vcb(xp), xp, 0.0);
}

TEST_CASE("window attention rows are distributions, shifted or not") {
  nn::Init init(8);
  for (bool shifted : {false, true}) {
    WindowAttention3d a(8, 2, {2, 4, 4}, shifted, true, init, "a");
    Tensor w;
    a(oracle::random_tensor({2, 4, 8, 12, 8}, 3, 1.0, false), &w);
    const int n = w.dim(2);
    for (std::size_t r = 0; r < w.size() / n; ++r) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += w.values()[r * n + j];
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
  CHECK_THROWS_AS(WindowAttention3d(9, 2, {2, 4, 4}, false, true, init, "b"), ParameterError);
}

TEST_CASE("unmasked shifted windows equal regular windows on a rolled input") {
  nn::Init init(9);
  // same key, same weights
  WindowAttention3d regular(8, 2, {2, 4, 4}, false, false, init, "a");
  WindowAttention3d shifted(8, 2, {2, 4, 4}, true, false, init, "a");
  const int T = 4, H = 8, W = 8, C = 8;
  const int st = 1, sh = 2, sw = 2;
  const auto x = oracle::random_tensor({1, T, H, W, C}, 11, 1.0, false);
  std::vector<int> roll;
  for (int t = 0; t < T; ++t)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) roll.push_back((((t + st) % T) * H + (h + sh) % H) * W + (w + sw) % W);
  const auto rolled = nn::gather_rows(x, roll, x.shape());
  const auto a = shifted(x);
  const auto b = regular(rolled);
  // b at rolled position p corresponds to a at position roll[p]
  for (std::size_t p = 0; p < roll.size(); ++p)
    for (int c = 0; c < C; ++c) CHECK(std::fabs(b.values()[p * C + c] - a.values()[roll[p] * C + c]) < 1e-12);
}

TEST_CASE("shifted masks keep wrapped tokens apart") {
  nn::Init init(10);
  WindowAttention3d a(8, 2, {2, 4, 4}, true, true, init, "a");
  Tensor w;
  a(oracle::random_tensor({1, 4, 8, 8, 8}, 12, 1.0, false), &w);
  // the last window in every dim mixes wrapped and unwrapped tokens; some weights vanish
  int tiny_weights = 0;
  for (double v : w.values()) tiny_weights += v < 1e-30;
  CHECK(tiny_weights > 0);
}

TEST_CASE("window attention handles maps smaller than the window") {
  nn::Init init(11);
  WindowAttention3d a(8, 2, {2, 7, 7}, true, true, init, "a");
  auto x = oracle::random_tensor({1, 1, 3, 5, 8}, 13);
  CHECK(a(x).shape() == x.shape());
  const auto rep = oracle::grad_check([&] { return probe(a(x)); }, {x, a.proj().weight()}, 12);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("window attention differentiates through padding and masks") {
  nn::Init init(12);
  WindowAttention3d a(8, 2, {2, 4, 4}, true, true, init, "a");
  auto x = oracle::random_tensor({1, 3, 6, 10, 8}, 14);
  std::vector<Tensor> wrt{x};
  for (auto& p : a.parameters()) wrt.push_back(p.tensor);
  const auto rep = oracle::grad_check([&] { return probe(a(x)); }, wrt, 12);
  // the key bias shifts every score of a query equally, so its gradient is 0
  CHECK(rep.violations(1e-4, 1e-8) == 0);
}

TEST_CASE("patch merging shapes and constant maps") {
  nn::Init init(13);
  PatchMerging m(4, init, "m");
  CHECK(m(Tensor::zeros({1, 2, 6, 8, 4})).shape() == Shape{1, 2, 3, 4, 8});
  CHECK(m(Tensor::zeros({1, 2, 5, 7, 4})).shape() == Shape{1, 2, 3, 4, 8});
  std::vector<double> v;
  for (int i = 0; i < 2 * 6 * 8; ++i)
    for (double c : {0.3, -1.0, 2.0, 0.5}) v.push_back(c);
  const auto y = m(Tensor::from({1, 2, 6, 8, 4}, v));
  for (std::size_t p = 1; p < y.size() / 8; ++p)
    for (int c = 0; c < 8; ++c) CHECK(std::fabs(y.values()[p * 8 + c] - y.values()[c]) < 1e-12);
  {
    nn::MetaGuard meta;
    PatchMerging big(96, init, "big");
    CHECK(big(Tensor::zeros({1, 8, 56, 112, 96})).shape() == Shape{1, 8, 28, 56, 192});
    PatchMerging big3(384, init, "big3");
    CHECK(big3(Tensor::zeros({1, 8, 14, 28, 384})).shape() == Shape{1, 8, 7, 14, 768});
  }
}

TEST_CASE("zero sharing weights leave both branches unchanged") {
  const auto cfg = CmtConfig::micro();
  nn::Init init(14);
  MutualLayer layer(16, 8, 8, 2, cfg, init, "l");
  layer.set_training(false);
  zero(layer.conv_to_trans().proj());
  zero(layer.trans_to_conv().proj());
  auto conv = oracle::random_tensor({1, 2, 8, 8, 16}, 15, 1.0, false);
  for (auto& v : conv.values()) v = std::fabs(v);
  const auto trans = oracle::random_tensor({1, 2, 8, 8, 8}, 16, 1.0, false);
  const auto [c, t] = layer(conv, trans);
  check_close(c, layer.conv_block()(conv), 0.0);
  check_close(t, layer.trans_block()(trans), 0.0);
}

TEST_CASE("sharing path differentiates, across mismatched grids too") {
  const auto cfg = CmtConfig::micro();
  nn::Init init(15);
  MutualLayer layer(16, 8, 8, 2, cfg, init, "l");
  auto conv = oracle::random_tensor({1, 2, 4, 4, 16}, 17);
  auto trans = oracle::random_tensor({1, 2, 4, 4, 8}, 18);
  std::vector<Tensor> wrt{conv, trans};
  for (auto& p : layer.conv_to_trans().parameters()) wrt.push_back(p.tensor);
  for (auto& p : layer.trans_to_conv().parameters()) wrt.push_back(p.tensor);
  auto f = [&] {
    auto [c, t] = layer(conv, trans);
    return nn::add(probe(c, 1), probe(t, 2));
  };
  const auto rep = oracle::grad_check(f, wrt, 16);
  CHECK(rep.max_rel_error < 1e-3);

  FeatureShare share(4, 6, init, "s");
  auto src = oracle::random_tensor({1, 2, 3, 5, 4}, 19);
  const Shape dest{1, 2, 6, 10, 6};
  CHECK(share(src, dest).shape() == dest);
  const auto rep2 = oracle::grad_check([&] { return probe(share(src, dest)); }, {src, share.proj().weight()}, 16);
  CHECK(rep2.max_rel_error < 1e-6);
  CHECK_THROWS_AS(share(src, Shape{2, 2, 6, 10, 6}), ShapeError);
}

TEST_CASE("nearest resampling picks source cells") {
  const auto x = Tensor::from({1, 1, 2, 2, 1}, {1, 2, 3, 4});
  const auto y = resample_nearest(x, 1, 4, 4);
  CHECK(y.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("micro model end to end gradients") {
  const auto cfg = tiny();
  CmtNet net(cfg, nn::Init(16));
  // Fresh batch norms (zero shift and mean) put whole dead regions exactly on
  // the rectifier kink; move the evaluation point off it.
  unsigned seed = 100;
  for (auto& b : net.buffers()) {
    const auto r = oracle::random_tensor(b.tensor.shape(), seed++, 0.3, false);
    const bool var = b.name.find("var") != std::string::npos;
    for (std::size_t i = 0; i < b.tensor.size(); ++i) b.tensor.values()[i] = var ? 0.6 + std::fabs(r.values()[i]) : r.values()[i];
  }
  for (auto& p : net.parameters())
    if (p.name.find("bn.bias") != std::string::npos || p.name.find("stem_bn.bias") != std::string::npos)
      p.tensor.values() = oracle::random_tensor(p.tensor.shape(), seed++, 0.3, false).values();

  auto video = random_video(cfg, 2, 20);
  video.set_requires_grad(true);
  std::vector<Tensor> wrt{video};
  for (auto& p : net.parameters()) wrt.push_back(p.tensor);
  auto f = [&] { return probe(net(video)); };

  net.set_training(false);
  const auto eval = oracle::grad_check(f, wrt, 3, 1e-5);
  CHECK(eval.checked > 200);
  CHECK(eval.violations(1e-3, 1e-7) == 0);

  // Batch statistics couple every activation, so a weight step crosses many
  // kinks at once; a smaller step keeps the difference quotient local.
  net.set_training(true);
  const auto train = oracle::grad_check(f, wrt, 3, 1e-7);
  // Biases feeding a batch norm have zero gradient there; at this step the
  // quotient carries about 1e-6 of rounding noise.
  CHECK(train.violations(1e-3, 2e-6) == 0);
}

TEST_CASE("inference is bit-identical for a fixed seed") {
  const auto cfg = tiny();
  CmtNet a(cfg, nn::Init(21)), b(cfg, nn::Init(21));
  a.set_training(false);
  b.set_training(false);
  const auto v = random_video(cfg, 1, 22);
  CHECK(a(v).values() == b(v).values());
  CHECK(a(v).values() == a(v).values());
}

TEST_CASE("classifier fuses by sum") {
  nn::Init init(23);
  Classifier cls(512, 0, init);
  const auto e = oracle::random_tensor({3, 512}, 24, 1.0, false);
  const auto c = oracle::random_tensor({3, 512}, 25, 1.0, false);
  const auto l1 = cls(e, c), l2 = cls(c, e);
  CHECK(l1.shape() == Shape{3});
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(l1.values()[i] - l2.values()[i]) < 1e-12);

  // linear in the fused feature
  const auto s = nn::add(e, c);
  const auto l3 = cls(nn::scale(s, 2.0), Tensor::zeros({3, 512}));
  const auto l0 = cls(Tensor::zeros({3, 512}), Tensor::zeros({3, 512}));
  for (int i = 0; i < 3; ++i)
    CHECK(std::fabs((l3.values()[i] - l0.values()[i]) - 2.0 * (l1.values()[i] - l0.values()[i])) < 1e-12);

  zero(cls.fc());
  const auto l4 = cls(e, c);
  for (double v : l4.values()) CHECK(v == 0.0);
}

TEST_CASE("classifier clinical width is checked") {
  nn::Init init(26);
  Classifier with(512, 4, init);
  const auto e = Tensor::zeros({2, 512});
  CHECK(with(e, e, Tensor::zeros({2, 4})).shape() == Shape{2});
  CHECK_THROWS_AS(with(e, e, Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(with(e, e), ShapeError);
  Classifier without(512, 0, init);
  CHECK_THROWS_AS(without(e, e, Tensor::zeros({2, 4})), ShapeError);
}
