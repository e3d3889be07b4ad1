#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tasl/nn/tensor.hpp"

namespace tasl::obj {

struct LossConfig {
  double lambda = 0.83;  // MMD weight
  double alpha = 0.2;    // focal weight of the positive class
  double gamma = 4.0;

  void validate() const;
};

/// Squared difference between the feature means of the two branches, per
/// sample, averaged over the batch. z_tic and z_bus are [B, D].
nn::Tensor mmd_loss(const nn::Tensor& z_tic, const nn::Tensor& z_bus);
double mmd_loss(std::span<const double> z_tic, std::span<const double> z_bus);

/// Binary focal loss of one logit.
double focal_loss(double logit, int label, double alpha, double gamma);
/// d focal_loss / d logit.
double focal_loss_grad(double logit, int label, double alpha, double gamma);
/// Batch mean of the focal loss over logits[B].
nn::Tensor focal_loss(const nn::Tensor& logits, const std::vector<int>& labels, double alpha, double gamma);

nn::Tensor total_loss(const nn::Tensor& mmd, const nn::Tensor& fl, double lambda);
double total_loss(double mmd, double fl, double lambda);

double sigmoid(double z);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

/// Empirical ROC from the highest score down; tied scores form one step.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
/// Trapezoidal area under roc_curve. Throws MetricError for single-class labels.
double auc_trapezoid(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  double auc = 0.0;  // NaN when undefined
  double acc = 0.0;
  double sens = 0.0;  // NaN when there are no positives
  double spec = 0.0;  // NaN when there are no negatives
  int tp = 0, tn = 0, fp = 0, fn = 0;
  std::vector<MetricsReport> folds;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Thresholded confusion counts and the rates derived from them; AUC is left NaN.
MetricsReport confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

/// Throws MetricError on length mismatch or single-class labels.
MetricsReport compute_metrics(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

/// Arithmetic mean of the fold metrics, summed counts, folds kept.
MetricsReport aggregate(const std::vector<MetricsReport>& folds);

/// Stratified k-fold partition. Result does not depend on the input order.
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& case_ids,
                                                  const std::vector<int>& labels, int k, std::uint64_t seed);

}  // namespace tasl::obj
