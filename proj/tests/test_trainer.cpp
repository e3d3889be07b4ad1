#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "tasl/error.hpp"
#include "tasl/trainer.hpp"

using namespace tasl;
namespace fs = std::filesystem;

namespace {

constexpr int kFrames = 8;
constexpr int kSide = 32;

TrainConfig small_config(int epochs) {
  auto c = TrainConfig::micro();
  c.epochs = epochs;
  c.model.cmt.frames = kFrames;
  c.model.etic.length = kFrames;
  c.seed = 5;
  return c;
}

// Malignant cases: earlier, steeper TICs and a brighter clip.
PreparedCase fake_case(const std::string& id, int label, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0.0, 4.0);
  PreparedCase p;
  p.id = id;
  p.label = label;
  p.frames = kFrames;
  p.side = kSide;
  for (int k = 0; k < 6; ++k)
    for (int t = 0; t < kFrames; ++t) p.tics.push_back(std::clamp(30.0 + (label ? 14.0 : 4.0) * t + n(rng), 0.0, 255.0));
  for (int t = 0; t < kFrames; ++t)
    for (int y = 0; y < kSide; ++y)
      for (int x = 0; x < 2 * kSide; ++x) p.video.push_back(std::clamp(80.0 + (label ? 6.0 : 1.0) * t + n(rng), 0.0, 255.0));
  p.clinical = {static_cast<double>(label), 0.5, 0.0, 1.0};
  return p;
}

std::vector<PreparedCase> fake_set(int n, unsigned seed) {
  std::vector<PreparedCase> out;
  for (int i = 0; i < n; ++i) out.push_back(fake_case("case_" + std::to_string(100 + i), i % 2, seed + i));
  return out;
}

std::vector<double> probe_logits(TaslNet& model, const std::vector<PreparedCase>& cases) {
  std::vector<const PreparedCase*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  const auto b = make_batch(ptrs, false, 0);
  nn::NoGradGuard ng;
  return model(b.tics, b.video).logits.values();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tasl_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  const int spe = 20;
  CHECK(lr_at(0, c, spe) == 0.0);
  CHECK(lr_at(50, c, spe) == doctest::Approx(2e-3).epsilon(1e-12));  // 2.5 epochs of 20 steps
  CHECK(std::fabs(lr_at(100L * spe, c, spe)) < 1e-12);
  CHECK(lr_at(100L * spe - 1, c, spe) < 1e-8);
  CHECK(lr_at(25, c, spe) == doctest::Approx(1e-3).epsilon(1e-12));
  for (long s = 1; s < 50; ++s) CHECK(lr_at(s, c, spe) > lr_at(s - 1, c, spe));
  for (long s = 51; s <= 2000; ++s) CHECK(lr_at(s, c, spe) <= lr_at(s - 1, c, spe));
  const double mid = 50 + (2000 - 50) / 2.0;
  CHECK(lr_at(static_cast<long>(mid), c, spe) == doctest::Approx(1e-3).epsilon(1e-9));
  CHECK_THROWS_AS(lr_at(-1, c, spe), ParameterError);
  CHECK(steps_per_epoch(40, 2) == 20);
  CHECK(steps_per_epoch(41, 2) == 21);
}

TEST_CASE("default hyperparameters") {
  TrainConfig c;
  CHECK(c.epochs == 100);
  CHECK(c.batch_size == 2);
  CHECK(c.lr == 2e-3);
  CHECK(c.weight_decay == 0.05);
  CHECK(c.warmup_epochs == 2.5);
  CHECK(c.loss.lambda == 0.83);
  CHECK(c.loss.alpha == 0.2);
  CHECK(c.loss.gamma == 4.0);
  CHECK_NOTHROW(c.validate());
  c.warmup_epochs = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("momentum update with weight decay") {
  auto w = nn::Tensor::from({2}, {1.0, -2.0}, true);
  Sgd opt({{"w", w}}, 0.9, 0.1);
  w.grad() = {0.5, 0.0};
  opt.step(0.1);
  // v = g + wd w = (0.6, -0.2)
  CHECK(w.values()[0] == doctest::Approx(1.0 - 0.06));
  CHECK(w.values()[1] == doctest::Approx(-2.0 + 0.02));
  const double w0 = w.values()[0];
  w.grad() = {0.5, 0.0};
  opt.step(0.1);
  CHECK(w.values()[0] == doctest::Approx(w0 - 0.1 * (0.9 * 0.6 + 0.5 + 0.1 * w0)));
}

TEST_CASE("clipping rescales to the global norm") {
  auto a = nn::Tensor::from({2}, {0, 0}, true);
  auto b = nn::Tensor::from({1}, {0}, true);
  Sgd opt({{"a", a}, {"b", b}}, 0.9, 0.0);
  a.grad() = {3.0, 0.0};
  b.grad() = {4.0};
  CHECK(opt.clip(1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(opt.clip(10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("zero learning rate leaves the parameters unchanged") {
  auto cfg = small_config(3);
  cfg.lr = 0.0;
  const auto data = fake_set(4, 1);
  const auto r = train(cfg, data, {});
  auto fresh_cfg = cfg.model;
  fresh_cfg.init_seed = cfg.seed;
  TaslNet fresh(fresh_cfg);
  const auto init = fresh.parameters();
  REQUIRE(init.size() == r.last.params.size());
  for (std::size_t i = 0; i < init.size(); ++i) CHECK(r.last.params[i].values == init[i].tensor.values());
}

TEST_CASE("batches stack cases in network layout") {
  const auto data = fake_set(3, 2);
  const auto b = make_batch({&data[0], &data[2]}, true, 4);
  CHECK(b.tics.shape() == nn::Shape{2, 6, kFrames});
  CHECK(b.video.shape() == nn::Shape{2, kFrames, kSide, 2 * kSide, 3});
  CHECK(b.clinical.shape() == nn::Shape{2, 4});
  CHECK(b.labels == std::vector<int>{0, 0});
  CHECK(b.video.values()[0] == doctest::Approx(data[0].video[0] / 255.0));
  CHECK(b.video.values()[1] == b.video.values()[0]);
  CHECK(b.tics.values()[6 * kFrames] == data[2].tics[0]);
}

TEST_CASE("both branches receive gradient from the total loss") {
  auto cfg = small_config(1);
  cfg.warmup_epochs = 0.5;
  auto mcfg = cfg.model;
  TaslNet model(mcfg);
  const auto data = fake_set(2, 3);
  const auto b = make_batch({&data[0], &data[1]}, false, 0);
  const auto out = model(b.tics, b.video);
  auto loss = obj::total_loss(obj::mmd_loss(out.z_tic, out.z_bus),
                              obj::focal_loss(out.logits, b.labels, 0.2, 4.0), 0.83);
  loss.backward();
  CHECK(nn::global_grad_norm(model.etic_parameters()) > 0.0);
  CHECK(nn::global_grad_norm(model.cmt_parameters()) > 0.0);

  const auto r = train(cfg, fake_set(4, 4), {});
  CHECK(r.history[0]["grad_norm_etic_min"].get<double>() > 0.0);
  CHECK(r.history[0]["grad_norm_cmt_min"].get<double>() > 0.0);
}

TEST_CASE("identical seeds give identical runs") {
  const auto cfg = small_config(3);
  const auto tr = fake_set(6, 5), va = fake_set(4, 50);
  const auto a = train(cfg, tr, va);
  const auto b = train(cfg, tr, va);
  CHECK(a.history.dump() == b.history.dump());
  for (std::size_t i = 0; i < a.last.params.size(); ++i) CHECK(a.last.params[i].values == b.last.params[i].values);
  auto other = cfg;
  other.seed = 6;
  CHECK(train(other, tr, va).history.dump() != a.history.dump());
}

TEST_CASE("checkpoint round trip is bit-identical") {
  const auto cfg = small_config(3);
  const auto tr = fake_set(4, 7), va = fake_set(2, 70);
  const auto r = train(cfg, tr, va);
  const auto dir = scratch("ckpt");
  save_checkpoint(dir / "c.tarc", r.best);
  const auto back = load_checkpoint(dir / "c.tarc");
  CHECK(back.epoch == r.best.epoch);
  CHECK(back.history.dump() == r.best.history.dump());
  CHECK(back.config.to_flat().render() == r.best.config.to_flat().render());
  REQUIRE(back.params.size() == r.best.params.size());
  for (std::size_t i = 0; i < back.params.size(); ++i) {
    CHECK(back.params[i].name == r.best.params[i].name);
    CHECK(back.params[i].values == r.best.params[i].values);
  }
  for (std::size_t i = 0; i < back.velocity.size(); ++i) CHECK(back.velocity[i].values == r.best.velocity[i].values);
  auto m1 = build_model(r.best);
  auto m2 = build_model(back);
  CHECK(probe_logits(*m1, va) == probe_logits(*m2, va));

  fs::resize_file(dir / "c.tarc", fs::file_size(dir / "c.tarc") / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "c.tarc"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("restore rejects a checkpoint of another architecture") {
  const auto r = train(small_config(3), fake_set(2, 9), {});
  auto other = small_config(3).model;
  other.etic.channels = 13;
  TaslNet model(other);
  CHECK_THROWS_AS(restore(model, r.best), FormatError);
}

TEST_CASE("bad inputs stop training") {
  const auto cfg = small_config(3);
  CHECK_THROWS_AS(train(cfg, {}, {}), DataError);
  auto data = fake_set(2, 11);
  data[0].tics[3] = std::nan("");
  CHECK_THROWS_AS(train(cfg, data, {}), DivergenceError);
}

TEST_CASE("four cases are memorized within 200 steps") {
  auto cfg = small_config(100);  // 2 steps per epoch
  cfg.seed = 3;
  const auto data = fake_set(4, 13);
  const auto r = train(cfg, data, {});
  const double first = r.history.front()["train_loss"].get<double>();
  const double last = r.history.back()["train_loss"].get<double>();
  MESSAGE("initial loss " << first << ", after 200 steps " << last);
  CHECK(last < 0.1 * first);
}

TEST_CASE("cross validation reports one entry per fold") {
  auto cfg = small_config(3);
  auto data = fake_set(10, 17);
  const auto cv = run_cv(cfg, data, 5);
  CHECK(cv.folds.size() == 5);
  CHECK(cv.checkpoints.size() == 5);
  REQUIRE(cv.report.folds.size() == 5);
  double acc = 0;
  for (const auto& f : cv.report.folds) acc += f.acc;
  CHECK(std::fabs(cv.report.acc - acc / 5) < 1e-12);

  std::reverse(data.begin(), data.end());
  const auto again = run_cv(cfg, data, 5);
  CHECK(again.folds == cv.folds);
  CHECK(again.report.to_json().dump() == cv.report.to_json().dump());
}

TEST_CASE("flat config parsing") {
  const auto flat = FlatConfig::parse(
      "# run\n"
      "train.epochs = 7\n"
      "train.lr = 0.01   # faster\n"
      "loss.lambda=0\n"
      "model.scale = micro\n"
      "model.frames = 16\n"
      "seed = 42\n");
  const auto c = TrainConfig::from_flat(flat);
  CHECK(c.epochs == 7);
  CHECK(c.lr == 0.01);
  CHECK(c.loss.lambda == 0.0);
  CHECK(c.seed == 42);
  CHECK(c.model.cmt.frames == 16);
  CHECK(c.model.etic.length == 16);
  CHECK(c.model.cmt.height == 32);
  CHECK(c.batch_size == 2);

  const auto again = TrainConfig::from_flat(c.to_flat());
  CHECK(again.to_flat().render() == c.to_flat().render());

  CHECK_THROWS_AS(TrainConfig::from_flat(FlatConfig::parse("train.epoch = 3\n")), ConfigError);
  CHECK_THROWS_AS(FlatConfig::parse("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(FlatConfig::parse("just text\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_flat(FlatConfig::parse("train.epochs = many\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_flat(FlatConfig::parse("model.scale = huge\n")), ConfigError);
}

TEST_CASE("seed from the environment") {
  ::setenv("TASL_SEED", "123", 1);
  CHECK(env_seed() == std::optional<std::uint64_t>{123});
  ::setenv("TASL_SEED", "abc", 1);
  CHECK_THROWS_AS(env_seed(), ConfigError);
  ::unsetenv("TASL_SEED");
  CHECK(!env_seed().has_value());
}
