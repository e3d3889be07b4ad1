#include "tasl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "rng.hpp"
#include "tasl/error.hpp"
#include "tasl/nn/ops.hpp"

namespace tasl {

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> train_keys() {
  std::vector<std::string> keys{"train.epochs",        "train.batch_size",  "train.lr",          "train.weight_decay",
                                "train.momentum",      "train.warmup_epochs", "train.clip_norm", "train.use_clinical",
                                "loss.lambda",         "loss.alpha",        "loss.gamma",        "seed",
                                "cv.folds",            "eval.threshold",    "prep.window",       "prep.order",
                                "prep.grad_threshold", "prep.patch_size",   "prep.tau_wall",     "prep.tau_nwall",
                                "prep.wall_fraction",  "prep.rising_half_window"};
  for (const auto& k : ModelConfig::flat_keys()) keys.push_back(k);
  return keys;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double norm_of(const std::vector<nn::NamedTensor>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

// Keeps the frame count and resize target of preprocessing in step with the model.
void sync_prep(TrainConfig& c) {
  c.prep.select.frames = c.model.cmt.frames;
  c.prep.video_size = c.model.cmt.height;
  c.prep.detect.seed = c.seed;
}

std::vector<ArchiveArray> to_arrays(const std::vector<nn::NamedTensor>& ts) {
  std::vector<ArchiveArray> out;
  for (const auto& t : ts) {
    out.push_back({t.name, std::vector<std::int64_t>(t.tensor.shape().begin(), t.tensor.shape().end()),
                   t.tensor.values()});
  }
  return out;
}

void copy_into(const std::vector<nn::NamedTensor>& dst, const std::vector<ArchiveArray>& src, const char* what) {
  if (dst.size() != src.size()) {
    throw FormatError(std::string("checkpoint holds ") + std::to_string(src.size()) + " " + what + ", model has " +
                      std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto t = dst[i].tensor;
    if (src[i].name != dst[i].name || src[i].values.size() != t.size()) {
      throw FormatError(std::string("checkpoint ") + what + " '" + src[i].name + "' does not match model '" +
                        dst[i].name + "'");
    }
    t.values() = src[i].values;
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(warmup_epochs >= 0.0 && warmup_epochs < epochs)) throw ConfigError("warm-up must be shorter than training");
  if (folds < 2) throw ConfigError("cross-validation needs at least two folds");
  loss.validate();
  model.cmt.validate();
}

TrainConfig TrainConfig::micro() {
  TrainConfig c;
  c.epochs = 30;
  c.model = ModelConfig::micro();
  sync_prep(c);
  return c;
}

TrainConfig TrainConfig::from_flat(const FlatConfig& flat, const TrainConfig& base) {
  if (const auto bad = flat.unknown_keys(train_keys()); !bad.empty()) {
    throw ConfigError("unknown config key '" + bad.front() + "'");
  }
  TrainConfig c = base;
  c.epochs = flat.get("train.epochs", c.epochs);
  c.batch_size = flat.get("train.batch_size", c.batch_size);
  c.lr = flat.get("train.lr", c.lr);
  c.weight_decay = flat.get("train.weight_decay", c.weight_decay);
  c.momentum = flat.get("train.momentum", c.momentum);
  c.warmup_epochs = flat.get("train.warmup_epochs", c.warmup_epochs);
  c.clip_norm = flat.get("train.clip_norm", c.clip_norm);
  c.use_clinical = flat.get("train.use_clinical", c.use_clinical);
  c.loss.lambda = flat.get("loss.lambda", c.loss.lambda);
  c.loss.alpha = flat.get("loss.alpha", c.loss.alpha);
  c.loss.gamma = flat.get("loss.gamma", c.loss.gamma);
  c.seed = flat.get("seed", c.seed);
  c.folds = flat.get("cv.folds", c.folds);
  c.threshold = flat.get("eval.threshold", c.threshold);
  auto& s = c.prep.select;
  auto& d = c.prep.detect;
  s.window = d.sg_window = flat.get("prep.window", s.window);
  s.order = d.sg_order = flat.get("prep.order", s.order);
  s.grad_threshold = d.grad_threshold = flat.get("prep.grad_threshold", s.grad_threshold);
  d.patch_size = flat.get("prep.patch_size", d.patch_size);
  d.tau_wall = flat.get("prep.tau_wall", d.tau_wall);
  d.tau_nwall = flat.get("prep.tau_nwall", d.tau_nwall);
  d.wall_fraction = flat.get("prep.wall_fraction", d.wall_fraction);
  d.rising_half_window = flat.get("prep.rising_half_window", d.rising_half_window);
  c.model = ModelConfig::from_flat(flat, c.model);
  if (c.use_clinical && c.model.clinical_dim == 0) c.model.clinical_dim = 4;
  if (!c.use_clinical) c.model.clinical_dim = 0;
  c.model.init_seed = c.seed;
  sync_prep(c);
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_flat(const FlatConfig& flat) { return from_flat(flat, TrainConfig{}); }

FlatConfig TrainConfig::to_flat() const {
  FlatConfig f;
  f.set("train.epochs", std::to_string(epochs));
  f.set("train.batch_size", std::to_string(batch_size));
  f.set("train.lr", num(lr));
  f.set("train.weight_decay", num(weight_decay));
  f.set("train.momentum", num(momentum));
  f.set("train.warmup_epochs", num(warmup_epochs));
  f.set("train.clip_norm", num(clip_norm));
  f.set("train.use_clinical", use_clinical ? "true" : "false");
  f.set("loss.lambda", num(loss.lambda));
  f.set("loss.alpha", num(loss.alpha));
  f.set("loss.gamma", num(loss.gamma));
  f.set("seed", std::to_string(seed));
  f.set("cv.folds", std::to_string(folds));
  f.set("eval.threshold", num(threshold));
  f.set("prep.window", std::to_string(prep.select.window));
  f.set("prep.order", std::to_string(prep.select.order));
  f.set("prep.grad_threshold", num(prep.select.grad_threshold));
  f.set("prep.patch_size", std::to_string(prep.detect.patch_size));
  f.set("prep.tau_wall", num(prep.detect.tau_wall));
  f.set("prep.tau_nwall", num(prep.detect.tau_nwall));
  f.set("prep.wall_fraction", num(prep.detect.wall_fraction));
  f.set("prep.rising_half_window", std::to_string(prep.detect.rising_half_window));
  model.to_flat(f);
  return f;
}

int steps_per_epoch(int train_cases, int batch_size) { return (train_cases + batch_size - 1) / batch_size; }

double lr_at(long step, const TrainConfig& c, int spe) {
  if (step < 0) throw ParameterError("step must be >= 0");
  const double total = static_cast<double>(c.epochs) * spe;
  const double warm = c.warmup_epochs * spe;
  const double s = static_cast<double>(step);
  if (s < warm) return c.lr * s / warm;
  if (s >= total) return 0.0;
  const double progress = (s - warm) / (total - warm);
  return c.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Sgd::Sgd(std::vector<nn::NamedTensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.size(), 0.0);
}

void Sgd::zero_grad() {
  for (auto& p : params_) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

double Sgd::clip(double max_norm) {
  const double norm = norm_of(params_);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params_) {
      auto t = p.tensor;
      for (double& g : t.grad()) g *= s;
    }
  }
  return norm;
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto t = params_[i].tensor;
    auto& w = t.values();
    const auto& g = t.grad();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = (g.empty() ? 0.0 : g[j]) + weight_decay_ * w[j];
      v[j] = momentum_ * v[j] + gj;
      w[j] -= lr * v[j];
    }
  }
}

Checkpoint capture(const TaslNet& model, const Sgd* optimizer, const TrainConfig& config, int epoch) {
  Checkpoint c;
  c.config = config;
  c.epoch = epoch;
  c.params = to_arrays(model.parameters());
  c.buffers = to_arrays(model.buffers());
  if (optimizer) {
    for (std::size_t i = 0; i < optimizer->params().size(); ++i) {
      const auto& p = optimizer->params()[i];
      c.velocity.push_back({p.name, std::vector<std::int64_t>(p.tensor.shape().begin(), p.tensor.shape().end()),
                            optimizer->velocity()[i]});
    }
  }
  return c;
}

void restore(TaslNet& model, const Checkpoint& ckpt) {
  copy_into(model.parameters(), ckpt.params, "parameters");
  copy_into(model.buffers(), ckpt.buffers, "buffers");
}

std::unique_ptr<TaslNet> build_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<TaslNet>(ckpt.config.model);
  restore(*model, ckpt);
  model->set_training(false);
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Archive a;
  a.meta = {{"kind", "checkpoint"},
            {"config", ckpt.config.to_flat().render()},
            {"epoch", ckpt.epoch},
            {"val_auc", std::isfinite(ckpt.val_auc) ? nlohmann::json(ckpt.val_auc) : nlohmann::json(nullptr)},
            {"history", ckpt.history},
            {"counts", {ckpt.params.size(), ckpt.buffers.size(), ckpt.velocity.size()}}};
  auto add = [&](const char* prefix, const std::vector<ArchiveArray>& src) {
    for (const auto& s : src) a.arrays.push_back({std::string(prefix) + s.name, s.shape, s.values});
  };
  add("param:", ckpt.params);
  add("buffer:", ckpt.buffers);
  add("velocity:", ckpt.velocity);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_archive(path, a);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path.string());
  const auto a = read_archive(path);
  if (a.meta.value("kind", "") != "checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  Checkpoint c;
  c.config = TrainConfig::from_flat(FlatConfig::parse(a.meta.at("config").get<std::string>()));
  c.epoch = a.meta.at("epoch");
  c.val_auc = a.meta.at("val_auc").is_null() ? kNaN : a.meta.at("val_auc").get<double>();
  c.history = a.meta.at("history");
  for (const auto& arr : a.arrays) {
    const auto colon = arr.name.find(':');
    const auto kind = arr.name.substr(0, colon);
    ArchiveArray stripped{arr.name.substr(colon + 1), arr.shape, arr.values};
    if (kind == "param") c.params.push_back(std::move(stripped));
    else if (kind == "buffer") c.buffers.push_back(std::move(stripped));
    else if (kind == "velocity") c.velocity.push_back(std::move(stripped));
    else throw FormatError("unexpected checkpoint array '" + arr.name + "'");
  }
  return c;
}

Batch make_batch(const std::vector<const PreparedCase*>& cases, bool use_clinical, int clinical_dim) {
  if (cases.empty()) throw DataError("empty batch");
  const auto& first = *cases.front();
  const int b = static_cast<int>(cases.size());
  const int f = first.frames, s = first.side;
  const int n_tic = static_cast<int>(first.tics.size()) / std::max(1, f);
  Batch batch;
  std::vector<double> tics, video, clinical;
  tics.reserve(first.tics.size() * b);
  video.reserve(first.video.size() * 3 * b);
  for (const auto* c : cases) {
    if (c->frames != f || c->side != s || c->tics.size() != first.tics.size()) {
      throw ShapeError("case " + c->id + " was prepared with a different geometry");
    }
    tics.insert(tics.end(), c->tics.begin(), c->tics.end());
    for (double v : c->video) video.insert(video.end(), 3, v / 255.0);
    if (use_clinical) {
      if (static_cast<int>(c->clinical.size()) != clinical_dim) {
        throw DataError("case " + c->id + " has " + std::to_string(c->clinical.size()) + " clinical values, expected " +
                        std::to_string(clinical_dim));
      }
      clinical.insert(clinical.end(), c->clinical.begin(), c->clinical.end());
    }
    batch.labels.push_back(c->label);
  }
  batch.tics = nn::Tensor::from({b, n_tic, f}, std::move(tics));
  batch.video = nn::Tensor::from({b, f, s, 2 * s, 3}, std::move(video));
  if (use_clinical) batch.clinical = nn::Tensor::from({b, clinical_dim}, std::move(clinical));
  return batch;
}

Evaluation evaluate(TaslNet& model, const std::vector<PreparedCase>& cases, const TrainConfig& config) {
  nn::NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  Evaluation ev;
  double loss = 0.0, mmd = 0.0, fl = 0.0;
  for (std::size_t i = 0; i < cases.size(); i += static_cast<std::size_t>(config.batch_size)) {
    std::vector<const PreparedCase*> group;
    for (std::size_t j = i; j < std::min(cases.size(), i + config.batch_size); ++j) group.push_back(&cases[j]);
    const auto batch = make_batch(group, config.use_clinical, config.model.clinical_dim);
    const auto out = model(batch.tics, batch.video, batch.clinical);
    const double m = obj::mmd_loss(out.z_tic, out.z_bus).item();
    const double f = obj::focal_loss(out.logits, batch.labels, config.loss.alpha, config.loss.gamma).item();
    const double w = static_cast<double>(group.size());
    mmd += m * w;
    fl += f * w;
    loss += obj::total_loss(m, f, config.loss.lambda) * w;
    for (std::size_t j = 0; j < group.size(); ++j) {
      ev.scores.push_back(obj::sigmoid(out.logits.values()[j]));
      ev.labels.push_back(batch.labels[j]);
      ev.ids.push_back(group[j]->id);
    }
  }
  if (!cases.empty()) {
    const double n = static_cast<double>(cases.size());
    ev.loss = loss / n;
    ev.mmd = mmd / n;
    ev.focal = fl / n;
  }
  model.set_training(was_training);
  return ev;
}

TrainResult train(const TrainConfig& config_in, const std::vector<PreparedCase>& train_cases,
                  const std::vector<PreparedCase>& val_cases, const EpochCallback& on_epoch) {
  if (train_cases.empty()) throw DataError("training set is empty");
  TrainConfig config = config_in;
  config.model.init_seed = config.seed;
  config.validate();

  TaslNet model(config.model);
  model.set_training(true);
  Sgd opt(model.parameters(), config.momentum, config.weight_decay);
  const auto etic_params = model.etic_parameters();
  const auto cmt_params = model.cmt_parameters();
  const int spe = steps_per_epoch(static_cast<int>(train_cases.size()), config.batch_size);

  TrainResult result;
  double best_auc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  bool have_best = false;
  long step = 0;
  std::vector<std::size_t> order(train_cases.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    detail::FastRng rng(detail::mix_seed(config.seed, static_cast<std::uint64_t>(epoch), 0x7261696e));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);

    double sum_loss = 0.0, sum_mmd = 0.0, sum_fl = 0.0;
    double sum_etic = 0.0, sum_cmt = 0.0, min_etic = kNaN, min_cmt = kNaN;
    for (int b = 0; b < spe; ++b, ++step) {
      std::vector<const PreparedCase*> group;
      for (int j = b * config.batch_size; j < std::min<int>(order.size(), (b + 1) * config.batch_size); ++j) {
        group.push_back(&train_cases[order[j]]);
      }
      const auto batch = make_batch(group, config.use_clinical, config.model.clinical_dim);
      opt.zero_grad();
      const auto out = model(batch.tics, batch.video, batch.clinical);
      const auto mmd = obj::mmd_loss(out.z_tic, out.z_bus);
      const auto fl = obj::focal_loss(out.logits, batch.labels, config.loss.alpha, config.loss.gamma);
      auto loss = obj::total_loss(mmd, fl, config.loss.lambda);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                              " (mmd " + std::to_string(mmd.item()) + ", focal " + std::to_string(fl.item()) + ")");
      }
      loss.backward();
      const double ge = norm_of(etic_params), gc = norm_of(cmt_params);
      sum_etic += ge;
      sum_cmt += gc;
      min_etic = std::isnan(min_etic) ? ge : std::min(min_etic, ge);
      min_cmt = std::isnan(min_cmt) ? gc : std::min(min_cmt, gc);
      opt.clip(config.clip_norm);
      opt.step(lr_at(step, config, spe));
      sum_loss += lv;
      sum_mmd += mmd.item();
      sum_fl += fl.item();
    }

    nlohmann::json rec{{"epoch", epoch + 1},
                       {"lr", lr_at(step, config, spe)},
                       {"train_loss", sum_loss / spe},
                       {"train_mmd", sum_mmd / spe},
                       {"train_focal", sum_fl / spe},
                       {"grad_norm_etic", sum_etic / spe},
                       {"grad_norm_cmt", sum_cmt / spe},
                       {"grad_norm_etic_min", min_etic},
                       {"grad_norm_cmt_min", min_cmt}};
    double val_auc = kNaN, val_loss = kNaN;
    if (!val_cases.empty()) {
      const auto ev = evaluate(model, val_cases, config);
      val_loss = ev.loss;
      rec["val_loss"] = ev.loss;
      const auto pos = std::count(ev.labels.begin(), ev.labels.end(), 1);
      if (pos > 0 && pos < static_cast<long>(ev.labels.size())) {
        const auto m = obj::compute_metrics(ev.scores, ev.labels, config.threshold);
        val_auc = m.auc;
        rec["val_auc"] = m.auc;
        rec["val_acc"] = m.acc;
      }
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    // NaN AUC (no validation set, or one class) compares as -1 and falls back to the loss
    const double a = std::isnan(val_auc) ? -1.0 : val_auc;
    const double l = std::isnan(val_loss) ? sum_loss / spe : val_loss;
    if (!have_best || a > best_auc || (a == best_auc && l < best_loss)) {
      have_best = true;
      best_auc = a;
      best_loss = l;
      result.best = capture(model, &opt, config, epoch + 1);
      result.best.val_auc = val_auc;
    }
  }
  result.last = capture(model, &opt, config, config.epochs);
  result.last.val_auc = result.history.back().value("val_auc", kNaN);
  result.best.history = result.history;
  result.last.history = result.history;
  return result;
}

CvResult run_cv(const TrainConfig& config, const std::vector<PreparedCase>& cases, int k,
                const EpochCallback& on_epoch) {
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& c : cases) {
    ids.push_back(c.id);
    labels.push_back(c.label);
  }
  CvResult cv;
  cv.folds = obj::kfold_split(ids, labels, k, config.seed);
  std::vector<obj::MetricsReport> reports;
  for (int f = 0; f < k; ++f) {
    const auto& held = cv.folds[static_cast<std::size_t>(f)];
    std::vector<PreparedCase> tr, va;
    for (const auto& c : cases) {
      (std::find(held.begin(), held.end(), c.id) != held.end() ? va : tr).push_back(c);
    }
    // fixed order so the result does not depend on how the caller listed the cases
    auto by_id = [](const PreparedCase& a, const PreparedCase& b) { return a.id < b.id; };
    std::sort(tr.begin(), tr.end(), by_id);
    std::sort(va.begin(), va.end(), by_id);
    auto fold_cb = [&](const nlohmann::json& rec) {
      if (!on_epoch) return;
      auto r = rec;
      r["fold"] = f;
      on_epoch(r);
    };
    auto res = train(config, tr, va, fold_cb);
    auto model = build_model(res.best);
    const auto ev = evaluate(*model, va, config);
    reports.push_back(obj::compute_metrics(ev.scores, ev.labels, config.threshold));
    cv.checkpoints.push_back(std::move(res.best));
  }
  cv.report = obj::aggregate(reports);
  return cv;
}

}  // namespace tasl
