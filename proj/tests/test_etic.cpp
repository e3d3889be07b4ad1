#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tasl/error.hpp"
#include "tasl/eticnet.hpp"

using namespace tasl;
using namespace tasl::etic;
using nn::Tensor;

namespace {

Tensor probe(const Tensor& y, unsigned seed = 99) {
  auto w = oracle::random_tensor(y.shape(), seed, 1.0, false);
  return nn::sum_all(nn::mul(y, w));
}

Tensor random_tics(int b, int n, int t, unsigned seed) {
  auto x = oracle::random_tensor({b, n, t}, seed, 127.0, false);
  for (auto& v : x.values()) v += 128.0;
  return x;
}

void zero(nn::Linear& l) {
  for (auto& v : l.weight().values()) v = 0.0;
  if (l.bias())
    for (auto& v : l.bias()->values()) v = 0.0;
}

// Attention written with loops: per head, softmax(q k^T) v, then the
// concatenation with the input is mixed back by the output layer.
std::vector<double> attention_direct(TicAttention& a, const Tensor& x, int heads) {
  const int b = x.dim(0), t = x.dim(1), c = x.dim(2);
  const int ac = a.query().out_features(), hd = ac / heads;
  auto lin = [&](nn::Linear& l, int bi, int ti) {
    std::vector<double> out(l.out_features());
    for (int o = 0; o < l.out_features(); ++o) {
      double s = l.bias() ? l.bias()->values()[o] : 0.0;
      for (int i = 0; i < l.in_features(); ++i)
        s += x.values()[(static_cast<std::size_t>(bi) * t + ti) * c + i] * l.weight().values()[i * l.out_features() + o];
      out[o] = s;
    }
    return out;
  };
  std::vector<double> result;
  for (int bi = 0; bi < b; ++bi) {
    std::vector<std::vector<double>> q(t), k(t), v(t);
    for (int ti = 0; ti < t; ++ti) {
      q[ti] = lin(a.query(), bi, ti);
      k[ti] = lin(a.key(), bi, ti);
      v[ti] = lin(a.value(), bi, ti);
    }
    for (int ti = 0; ti < t; ++ti) {
      std::vector<double> cat(x.values().begin() + (static_cast<std::size_t>(bi) * t + ti) * c,
                              x.values().begin() + (static_cast<std::size_t>(bi) * t + ti + 1) * c);
      cat.resize(c + ac, 0.0);
      for (int h = 0; h < heads; ++h) {
        std::vector<double> s(t);
        double mx = -1e300, z = 0;
        for (int tj = 0; tj < t; ++tj) {
          for (int d = 0; d < hd; ++d) s[tj] += q[ti][h * hd + d] * k[tj][h * hd + d];
          mx = std::max(mx, s[tj]);
        }
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (int tj = 0; tj < t; ++tj)
          for (int d = 0; d < hd; ++d) cat[c + h * hd + d] += s[tj] / z * v[tj][h * hd + d];
      }
      auto& m = a.mix();
      for (int o = 0; o < m.out_features(); ++o) {
        double s = m.bias()->values()[o];
        for (int i = 0; i < c + ac; ++i) s += cat[i] * m.weight().values()[i * m.out_features() + o];
        result.push_back(s);
      }
    }
  }
  return result;
}

}  // namespace

TEST_CASE("default configuration") {
  EticConfig c;
  CHECK(c.kernel == 3);
  CHECK(c.dilations == std::vector<int>{1, 2, 4});
  CHECK(c.channels == 25);
  CHECK(c.heads == 3);
  CHECK(c.feature_dim == 512);
  CHECK(c.attention_channels % c.heads == 0);
}

TEST_CASE("attention matches a loop implementation") {
  nn::Init init(3);
  TicAttention a(5, 6, 3, false, init, "a");
  const auto x = oracle::random_tensor({2, 7, 5}, 4, 1.0, false);
  const auto y = a(x);
  CHECK(y.shape() == nn::Shape{2, 7, 5});
  const auto want = attention_direct(a, x, 3);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::fabs(y.values()[i] - want[i]) < 1e-12);
}

TEST_CASE("attention rows are distributions") {
  nn::Init init(5);
  EticNet net(EticConfig{}, init);
  EticTrace trace;
  net(random_tics(2, 6, 32, 8), &trace);
  REQUIRE(trace.attention.size() == 3);
  for (const auto& w : trace.attention) {
    CHECK(w.shape() == nn::Shape{2 * 3, 32, 32});
    for (std::size_t r = 0; r < w.size() / 32; ++r) {
      double s = 0;
      for (int j = 0; j < 32; ++j) {
        CHECK(w.values()[r * 32 + j] >= 0.0);
        s += w.values()[r * 32 + j];
      }
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("zero queries and keys give uniform attention") {
  nn::Init init(6);
  TicAttention a(4, 6, 3, false, init, "a");
  zero(a.query());
  zero(a.key());
  Tensor w;
  a(oracle::random_tensor({1, 5, 4}, 2, 1.0, false), &w);
  for (double v : w.values()) CHECK(std::fabs(v - 0.2) < 1e-15);
}

TEST_CASE("a single time step attends to itself") {
  nn::Init init(7);
  TicAttention a(4, 6, 3, false, init, "a");
  const auto x = oracle::random_tensor({1, 1, 4}, 3, 1.0, false);
  Tensor w;
  const auto y = a(x, &w);
  for (double v : w.values()) CHECK(v == 1.0);
  // with a single step the context is the value projection itself
  const auto v = a.value()(x);
  const auto expect = a.mix()(nn::concat_last({x, v}));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::fabs(y.values()[i] - expect.values()[i]) < 1e-14);
}

TEST_CASE("head count must divide the attention width") {
  nn::Init init(1);
  CHECK_THROWS_AS(TicAttention(25, 26, 3, false, init, "a"), ParameterError);
  EticConfig c;
  c.attention_channels = 25;
  CHECK_THROWS_AS(EticNet(c, init), ParameterError);
}

TEST_CASE("output is 512 wide and finite") {
  nn::Init init(2);
  EticNet net(EticConfig{}, init);
  const auto z = net(random_tics(3, 6, 32, 1));
  CHECK(z.shape() == nn::Shape{3, 512});
  for (double v : z.values()) CHECK(std::isfinite(v));
  const auto flat = net(Tensor::zeros({1, 6, 32}));
  CHECK(flat.shape() == nn::Shape{1, 512});
}

TEST_CASE("wrong TIC count or length is rejected") {
  nn::Init init(2);
  EticNet net(EticConfig{}, init);
  CHECK_THROWS_AS(net(Tensor::zeros({1, 5, 32})), ShapeError);
  CHECK_THROWS_AS(net(Tensor::zeros({1, 6, 31})), ShapeError);
  detect::EarliestEnhancedSet s;
  s.entries.resize(5);
  CHECK_THROWS_AS(tic_matrix(s), ShapeError);
  s.entries.resize(6);
  for (auto& e : s.entries) e.tic.assign(32, 1.0);
  CHECK(tic_matrix(s).size() == 6 * 32);
  s.entries[3].tic.pop_back();
  CHECK_THROWS_AS(tic_matrix(s), ShapeError);
}

TEST_CASE("the convolution path is causal") {
  nn::Init init(9);
  EticNet net(EticConfig{}, init);
  auto x = random_tics(1, 6, 32, 4);
  EticTrace a, b;
  net(x, &a);
  for (int n = 0; n < 6; ++n) x.values()[n * 32 + 31] += 50.0;
  net(x, &b);
  const int c = 25;
  // the first block sees the raw input only through its causal convolution
  for (int t = 0; t < 31; ++t)
    for (int k = 0; k < c; ++k) CHECK(a.conv[0].values()[t * c + k] == b.conv[0].values()[t * c + k]);
  bool changed = false;
  for (int k = 0; k < c; ++k) changed = changed || a.conv[0].values()[31 * c + k] != b.conv[0].values()[31 * c + k];
  CHECK(changed);
}

TEST_CASE("with causal attention every activation is causal") {
  nn::Init init(10);
  EticConfig cfg;
  cfg.causal_attention = true;
  EticNet net(cfg, init);
  for (int probe_t : {31, 20, 5}) {
    auto x = random_tics(1, 6, 32, 4);
    EticTrace a, b;
    net(x, &a);
    for (int n = 0; n < 6; ++n) x.values()[n * 32 + probe_t] += 50.0;
    net(x, &b);
    for (std::size_t blk = 0; blk < 3; ++blk) {
      for (int t = 0; t < probe_t; ++t) {
        for (int k = 0; k < 25; ++k) {
          CHECK(a.conv[blk].values()[t * 25 + k] == b.conv[blk].values()[t * 25 + k]);
          CHECK(a.blocks[blk].values()[t * 25 + k] == b.blocks[blk].values()[t * 25 + k]);
        }
      }
    }
  }
}

TEST_CASE("analytic gradients match finite differences on a toy input") {
  nn::Init init(12);
  EticConfig cfg;
  cfg.length = 8;
  EticNet net(cfg, init);
  auto x = random_tics(1, 6, 8, 13);
  x.set_requires_grad(true);
  std::vector<Tensor> wrt{x};
  for (auto& p : net.parameters()) wrt.push_back(p.tensor);
  const auto rep = oracle::grad_check([&] { return probe(net(x)); }, wrt, 12, 1e-4);
  CHECK(rep.checked > 100);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("initialization is deterministic per seed") {
  EticNet a(EticConfig{}, nn::Init(4)), b(EticConfig{}, nn::Init(4)), c(EticConfig{}, nn::Init(5));
  const auto x = random_tics(1, 6, 32, 2);
  CHECK(a(x).values() == b(x).values());
  CHECK(a(x).values() != c(x).values());
}
