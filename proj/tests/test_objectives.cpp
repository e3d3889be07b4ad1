#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <map>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "tasl/error.hpp"
#include "tasl/nn/ops.hpp"
#include "tasl/objectives.hpp"

using namespace tasl;
using namespace tasl::obj;
using tasl::nn::Tensor;

TEST_CASE("mmd of identical features is zero") {
  std::vector<double> a(512);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::sin(0.1 * i);
  CHECK(mmd_loss(a, a) == 0.0);
}

TEST_CASE("mmd of ones against zeros is one") {
  std::vector<double> ones(512, 1.0), zeros(512, 0.0);
  CHECK(mmd_loss(ones, zeros) == doctest::Approx(1.0).epsilon(1e-15));
  auto t = mmd_loss(Tensor::from({1, 512}, ones), Tensor::from({1, 512}, zeros));
  CHECK(t.item() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("mmd is permutation invariant and matches the direct formula") {
  std::mt19937 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(512), b(512);
  for (auto& v : a) v = n(rng);
  for (auto& v : b) v = n(rng) + 0.3;
  const double base = mmd_loss(a, b);
  CHECK(base == doctest::Approx(oracle::mmd_direct(a, b)).epsilon(1e-12));
  std::shuffle(a.begin(), a.end(), rng);
  CHECK(mmd_loss(a, b) == doctest::Approx(base).epsilon(1e-12));
  CHECK(base >= 0.0);
}

TEST_CASE("mmd batch version averages per-sample values") {
  auto a = oracle::random_tensor({3, 16}, 1, 1.0, false);
  auto b = oracle::random_tensor({3, 16}, 2, 1.0, false);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> ra(a.values().begin() + 16 * i, a.values().begin() + 16 * (i + 1));
    std::vector<double> rb(b.values().begin() + 16 * i, b.values().begin() + 16 * (i + 1));
    expect += oracle::mmd_direct(ra, rb) / 3.0;
  }
  CHECK(mmd_loss(a, b).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mmd rejects length mismatch") {
  std::vector<double> a(512), b(511);
  CHECK_THROWS_AS(mmd_loss(a, b), ShapeError);
  CHECK_THROWS_AS(mmd_loss(Tensor::zeros({2, 512}), Tensor::zeros({2, 256})), ShapeError);
}

TEST_CASE("focal loss closed-form value") {
  CHECK(focal_loss(0.0, 1, 0.2, 4.0) == doctest::Approx(0.2 * std::pow(0.5, 4) * std::log(2.0)).epsilon(1e-14));
  CHECK(focal_loss(0.0, 1, 0.2, 4.0) == doctest::Approx(0.008664).epsilon(1e-4));
}

TEST_CASE("focal loss with gamma 0 and alpha 0.5 is half the cross-entropy") {
  for (double z : {-3.0, -0.4, 0.0, 1.2, 5.0}) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    CHECK(focal_loss(z, 1, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(p)).epsilon(1e-12));
    CHECK(focal_loss(z, 0, 0.5, 0.0) == doctest::Approx(-0.5 * std::log(1.0 - p)).epsilon(1e-12));
  }
}

TEST_CASE("focal loss vanishes as p_t approaches one and stays finite for extreme logits") {
  CHECK(focal_loss(40.0, 1, 0.2, 4.0) < 1e-30);
  CHECK(focal_loss(-40.0, 0, 0.2, 4.0) < 1e-30);
  CHECK(std::isfinite(focal_loss(-800.0, 1, 0.2, 4.0)));
  CHECK(focal_loss(-800.0, 1, 0.2, 4.0) == doctest::Approx(0.2 * 800.0).epsilon(1e-9));
}

TEST_CASE("focal loss matches the unstabilized definition and is non-negative") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  for (int i = 0; i < 200; ++i) {
    const double z = u(rng);
    for (int y : {0, 1}) {
      const double v = focal_loss(z, y, 0.2, 4.0);
      CHECK(v >= 0.0);
      CHECK(v == doctest::Approx(oracle::focal_direct(z, y, 0.2, 4.0)).epsilon(1e-10));
    }
  }
}

TEST_CASE("focal loss gradient matches central differences within 1e-6") {
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  const double h = 1e-6;
  for (int i = 0; i < 200; ++i) {
    const double z = u(rng);
    for (int y : {0, 1}) {
      for (double gamma : {0.0, 2.0, 4.0}) {
        const double num = (focal_loss(z + h, y, 0.2, gamma) - focal_loss(z - h, y, 0.2, gamma)) / (2 * h);
        CHECK(std::fabs(num - focal_loss_grad(z, y, 0.2, gamma)) < 1e-6);
      }
    }
  }
}

TEST_CASE("batched focal loss is the mean and backpropagates") {
  auto logits = Tensor::from({3}, {0.3, -1.2, 2.0}, true);
  const std::vector<int> labels{1, 0, 0};
  auto l = focal_loss(logits, labels, 0.2, 4.0);
  const double expect = (focal_loss(0.3, 1, 0.2, 4) + focal_loss(-1.2, 0, 0.2, 4) + focal_loss(2.0, 0, 0.2, 4)) / 3;
  CHECK(l.item() == doctest::Approx(expect).epsilon(1e-14));
  l.backward();
  CHECK(logits.grad()[2] == doctest::Approx(focal_loss_grad(2.0, 0, 0.2, 4) / 3).epsilon(1e-14));
  CHECK_THROWS_AS(focal_loss(Tensor::zeros({2}), {1}, 0.2, 4.0), ShapeError);
}

TEST_CASE("total loss combines the two terms") {
  CHECK(total_loss(1.0, 0.5, 0.83) == doctest::Approx(1.33).epsilon(1e-15));
  CHECK(total_loss(7.0, 0.25, 0.0) == 0.25);
  auto t = total_loss(Tensor::scalar(1.0), Tensor::scalar(0.5), 0.83);
  CHECK(t.item() == doctest::Approx(1.33).epsilon(1e-15));
  // monotone in each component
  for (double m = 0; m < 2; m += 0.25) {
    CHECK(total_loss(m + 0.1, 0.3, 0.83) >= total_loss(m, 0.3, 0.83));
    CHECK(total_loss(m, 0.4, 0.83) >= total_loss(m, 0.3, 0.83));
  }
}

TEST_CASE("loss config validation") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.gamma = -0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("AUC worked example and corner cases") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y{0, 0, 1, 1};
  CHECK(auc_trapezoid(s, y) == doctest::Approx(oracle::auc_pair_count(s, y)).epsilon(1e-15));
  CHECK(auc_trapezoid(s, y) == 0.75);
  CHECK(auc_trapezoid(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(auc_trapezoid(std::vector<double>(6, 0.5), std::vector<int>{0, 1, 0, 1, 1, 0}) == 0.5);
  CHECK_THROWS_AS(auc_trapezoid(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
}

TEST_CASE("trapezoidal AUC equals pair counting on random score sets with ties") {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 40);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 12) / 11.0;  // coarse grid forces ties
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(std::fabs(auc_trapezoid(s, y) - oracle::auc_pair_count(s, y)) < 1e-12);
  }
}

TEST_CASE("metric identities hold for stored counts") {
  const std::vector<double> s{0.9, 0.2, 0.6, 0.4, 0.7, 0.1, 0.55};
  const std::vector<int> y{1, 0, 1, 1, 0, 0, 1};
  const auto r = compute_metrics(s, y, 0.5);
  CHECK(r.tp == 3);
  CHECK(r.fn == 1);
  CHECK(r.fp == 1);
  CHECK(r.tn == 2);
  CHECK(r.acc == static_cast<double>(r.tp + r.tn) / (r.tp + r.tn + r.fp + r.fn));
  CHECK(r.sens == static_cast<double>(r.tp) / (r.tp + r.fn));
  CHECK(r.spec == static_cast<double>(r.tn) / (r.tn + r.fp));
  const auto back = MetricsReport::from_json(r.to_json());
  CHECK(back.auc == r.auc);
  CHECK(back.tp == r.tp);
}

TEST_CASE("single-class labels leave AUC undefined but keep the rates") {
  const std::vector<double> s{0.9, 0.2};
  const std::vector<int> y{1, 1};
  CHECK_THROWS_AS(compute_metrics(s, y), MetricError);
  const auto r = confusion_metrics(s, y);
  CHECK(std::isnan(r.auc));
  CHECK(r.sens == 0.5);
  CHECK(std::isnan(r.spec));
  CHECK(r.to_json()["Spec"].is_null());
}

TEST_CASE("aggregate averages fold metrics") {
  MetricsReport a, b;
  a.acc = 0.8;
  b.acc = 0.7;
  a.auc = 0.9;
  b.auc = 1.0;
  const auto m = aggregate({a, b});
  CHECK(std::fabs(m.acc - 0.75) < 1e-12);
  CHECK(std::fabs(m.auc - 0.95) < 1e-12);
  CHECK(m.folds.size() == 2);
}

namespace {

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("c" + std::to_string(1000 + i));
  return ids;
}

// Disjoint cover, sizes within one, per-class counts within one.
void check_stratified(const std::vector<std::vector<std::string>>& folds, const std::vector<std::string>& ids,
                      const std::vector<int>& labels) {
  std::set<std::string> seen;
  std::size_t lo = ids.size(), hi = 0;
  std::map<int, std::pair<int, int>> per_class;  // min, max
  for (const auto& f : folds) {
    lo = std::min(lo, f.size());
    hi = std::max(hi, f.size());
    std::map<int, int> counts;
    for (const auto& id : f) {
      CHECK(seen.insert(id).second);
      const auto at = std::find(ids.begin(), ids.end(), id) - ids.begin();
      counts[labels[at]]++;
    }
    for (int c : {0, 1}) {
      auto& [mn, mx] = per_class.try_emplace(c, 1 << 30, 0).first->second;
      mn = std::min(mn, counts[c]);
      mx = std::max(mx, counts[c]);
    }
  }
  CHECK(seen.size() == ids.size());
  CHECK(hi - lo <= 1);
  for (const auto& [c, mm] : per_class) CHECK(mm.second - mm.first <= 1);
}

}  // namespace

TEST_CASE("kfold examples") {
  auto ids = make_ids(10);
  std::vector<int> labels(10, 0);
  auto folds = kfold_split(ids, labels, 5, 1);
  CHECK(folds.size() == 5);
  for (const auto& f : folds) CHECK(f.size() == 2);

  ids = make_ids(20);
  labels.assign(20, 0);
  std::fill(labels.begin(), labels.begin() + 10, 1);
  folds = kfold_split(ids, labels, 5, 1);
  for (const auto& f : folds) {
    int pos = 0;
    for (const auto& id : f) pos += labels[std::find(ids.begin(), ids.end(), id) - ids.begin()];
    CHECK(pos == 2);
    CHECK(f.size() == 4);
  }
  CHECK_THROWS_AS(kfold_split(make_ids(3), {0, 1, 0}, 5, 0), ParameterError);
}

TEST_CASE("kfold is a stratified partition for many inputs and ignores input order") {
  std::mt19937 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 5);
    const int n = k + static_cast<int>(rng() % 40);
    auto ids = make_ids(n);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    const auto folds = kfold_split(ids, labels, k, trial);
    check_stratified(folds, ids, labels);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> ids2;
    std::vector<int> labels2;
    for (auto p : perm) {
      ids2.push_back(ids[p]);
      labels2.push_back(labels[p]);
    }
    CHECK(kfold_split(ids2, labels2, k, trial) == folds);
  }
}
