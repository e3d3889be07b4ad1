#include "tasl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "rng.hpp"
#include "tasl/error.hpp"
#include "tasl/nn/ops.hpp"

namespace tasl::obj {

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

// log(1 + exp(x)) without overflow
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw MetricError("scores and labels differ in length (" + std::to_string(scores.size()) + " vs " +
                      std::to_string(labels.size()) + ")");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw MetricError("labels must be 0 or 1, got " + std::to_string(y));
  }
}

double json_real(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }
nlohmann::json real_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("focal alpha must lie in (0, 1]");
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

nn::Tensor mmd_loss(const nn::Tensor& z_tic, const nn::Tensor& z_bus) {
  if (z_tic.rank() != 2 || z_tic.shape() != z_bus.shape()) {
    throw ShapeError("mmd_loss: feature shapes " + nn::shape_string(z_tic.shape()) + " and " +
                     nn::shape_string(z_bus.shape()));
  }
  const auto d = nn::sub(nn::mean_axis(z_tic, 1), nn::mean_axis(z_bus, 1));
  return nn::mean_all(nn::mul(d, d));
}

double mmd_loss(std::span<const double> z_tic, std::span<const double> z_bus) {
  if (z_tic.size() != z_bus.size() || z_tic.empty()) {
    throw ShapeError("mmd_loss: feature lengths " + std::to_string(z_tic.size()) + " and " +
                     std::to_string(z_bus.size()));
  }
  const double n = static_cast<double>(z_tic.size());
  const double d = std::accumulate(z_tic.begin(), z_tic.end(), 0.0) / n -
                   std::accumulate(z_bus.begin(), z_bus.end(), 0.0) / n;
  return d * d;
}

// With s = logit for positives and -logit for negatives, q = 1 - p_t = sigmoid(-s)
// and -log p_t = softplus(-s).
double focal_loss(double logit, int label, double alpha, double gamma) {
  const double s = label == 1 ? logit : -logit;
  const double a = label == 1 ? alpha : 1.0 - alpha;
  const double q = sigmoid(-s);
  return a * std::pow(q, gamma) * softplus(-s);
}

double focal_loss_grad(double logit, int label, double alpha, double gamma) {
  const double s = label == 1 ? logit : -logit;
  const double a = label == 1 ? alpha : 1.0 - alpha;
  const double q = sigmoid(-s);
  const double ds = -a * std::pow(q, gamma) * (gamma * (1.0 - q) * softplus(-s) + q);
  return label == 1 ? ds : -ds;
}

nn::Tensor focal_loss(const nn::Tensor& logits, const std::vector<int>& labels, double alpha, double gamma) {
  if (logits.rank() != 1 || logits.dim(0) != static_cast<int>(labels.size()) || labels.empty()) {
    throw ShapeError("focal_loss: logits " + nn::shape_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const double n = static_cast<double>(labels.size());
  auto out = nn::make_result({1}, {logits}, [labels, alpha, gamma, n](nn::Node& self) {
    auto& x = *self.inputs[0];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      x.grad[i] += self.grad[0] * focal_loss_grad(x.data[i], labels[i], alpha, gamma) / n;
    }
  });
  if (nn::meta_mode()) return out;
  double sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = logits.values()[i];
    if (!std::isfinite(z)) throw DivergenceError("focal_loss: non-finite logit");
    sum += focal_loss(z, labels[i], alpha, gamma);
  }
  out.values()[0] = sum / n;
  return out;
}

nn::Tensor total_loss(const nn::Tensor& mmd, const nn::Tensor& fl, double lambda) {
  return nn::add(nn::scale(mmd, lambda), fl);
}

double total_loss(double mmd, double fl, double lambda) { return lambda * mmd + fl; }

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  const auto neg = static_cast<std::ptrdiff_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw MetricError("ROC undefined: labels contain a single class");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> roc{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  long tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (labels[order[i]] == 1) ++tp;
      else ++fp;
    }
    roc.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, s});
  }
  return roc;
}

double auc_trapezoid(std::span<const double> scores, std::span<const int> labels) {
  const auto roc = roc_curve(scores, labels);
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  const auto neg = static_cast<std::ptrdiff_t>(labels.size()) - pos;
  // Accumulate in counts so the trapezoids stay exact (half-integers).
  double twice_area = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    const double dfp = std::round((roc[i].fpr - roc[i - 1].fpr) * neg);
    const double tps = std::round(roc[i].tpr * pos) + std::round(roc[i - 1].tpr * pos);
    twice_area += dfp * tps;
  }
  return twice_area / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

MetricsReport confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_binary(scores, labels);
  if (scores.empty()) throw MetricError("no samples");
  MetricsReport r;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) (predicted ? r.tp : r.fn)++;
    else (predicted ? r.fp : r.tn)++;
  }
  r.auc = kNaN;
  r.acc = static_cast<double>(r.tp + r.tn) / (r.tp + r.tn + r.fp + r.fn);
  r.sens = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / (r.tp + r.fn) : kNaN;
  r.spec = r.tn + r.fp > 0 ? static_cast<double>(r.tn) / (r.tn + r.fp) : kNaN;
  return r;
}

MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  auto r = confusion_metrics(scores, labels, threshold);
  r.auc = auc_trapezoid(scores, labels);
  return r;
}

MetricsReport aggregate(const std::vector<MetricsReport>& folds) {
  if (folds.empty()) throw MetricError("no folds to aggregate");
  MetricsReport r;
  const double n = static_cast<double>(folds.size());
  for (const auto& f : folds) {
    r.auc += f.auc;
    r.acc += f.acc;
    r.sens += f.sens;
    r.spec += f.spec;
    r.tp += f.tp;
    r.tn += f.tn;
    r.fp += f.fp;
    r.fn += f.fn;
  }
  r.auc /= n;
  r.acc /= n;
  r.sens /= n;
  r.spec /= n;
  r.folds = folds;
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j{{"AUC", real_json(auc)}, {"ACC", real_json(acc)}, {"Sens", real_json(sens)},
                   {"Spec", real_json(spec)}, {"TP", tp}, {"TN", tn}, {"FP", fp}, {"FN", fn}};
  if (!folds.empty()) {
    j["folds"] = nlohmann::json::array();
    for (const auto& f : folds) j["folds"].push_back(f.to_json());
  }
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.auc = json_real(j.at("AUC"));
  r.acc = json_real(j.at("ACC"));
  r.sens = json_real(j.at("Sens"));
  r.spec = json_real(j.at("Spec"));
  r.tp = j.at("TP");
  r.tn = j.at("TN");
  r.fp = j.at("FP");
  r.fn = j.at("FN");
  if (j.contains("folds")) {
    for (const auto& f : j["folds"]) r.folds.push_back(from_json(f));
  }
  return r;
}

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& case_ids,
                                                  const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (case_ids.size() != labels.size()) throw ParameterError("kfold_split: ids and labels differ in length");
  if (k < 1) throw ParameterError("kfold_split: k must be >= 1");
  if (static_cast<int>(case_ids.size()) < k) {
    throw ParameterError("kfold_split: " + std::to_string(case_ids.size()) + " cases cannot fill " +
                         std::to_string(k) + " folds");
  }
  std::map<int, std::vector<std::string>> by_class;
  for (std::size_t i = 0; i < case_ids.size(); ++i) by_class[labels[i]].push_back(case_ids[i]);

  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  std::size_t next = 0;  // dealing continues across classes so fold sizes stay within one
  for (auto& [label, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ParameterError("kfold_split: duplicate case id");
    detail::FastRng rng(detail::mix_seed(seed, static_cast<std::uint64_t>(label), 0x6b666f6c64));
    for (std::size_t i = ids.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.next() % i);
      std::swap(ids[i - 1], ids[j]);
    }
    for (const auto& id : ids) folds[next++ % folds.size()].push_back(id);
  }
  return folds;
}

}  // namespace tasl::obj
