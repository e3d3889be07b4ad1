#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tasl/archive.hpp"
#include "tasl/config.hpp"
#include "tasl/model.hpp"
#include "tasl/objectives.hpp"
#include "tasl/pipeline.hpp"

namespace tasl {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 2;
  double lr = 2e-3;
  double weight_decay = 0.05;
  double momentum = 0.9;
  double warmup_epochs = 2.5;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables clipping
  obj::LossConfig loss;
  std::uint64_t seed = 0;
  bool use_clinical = false;
  int folds = 5;
  double threshold = 0.5;
  ModelConfig model;
  PrepOptions prep;  // frames and video size follow the model

  void validate() const;
  /// Keys absent from `flat` keep the values of `base`; unknown keys are errors.
  static TrainConfig from_flat(const FlatConfig& flat, const TrainConfig& base);
  static TrainConfig from_flat(const FlatConfig& flat);
  FlatConfig to_flat() const;
  static TrainConfig micro();
};

int steps_per_epoch(int train_cases, int batch_size);

/// Linear warm-up from 0 to lr over warmup_epochs, then cosine decay that
/// reaches 0 at step epochs * steps_per_epoch.
double lr_at(long step, const TrainConfig& config, int steps_per_epoch);

/// SGD with momentum and L2 weight decay:
/// v = momentum * v + (g + wd * w); w -= lr * v.
class Sgd {
 public:
  Sgd(std::vector<nn::NamedTensor> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();
  /// Rescales gradients so their global norm is at most max_norm. Returns the norm before clipping.
  double clip(double max_norm);

  const std::vector<nn::NamedTensor>& params() const { return params_; }
  std::vector<std::vector<double>>& velocity() { return velocity_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<nn::NamedTensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_, weight_decay_;
};

struct Checkpoint {
  TrainConfig config;
  int epoch = 0;  // epochs completed
  double val_auc = 0.0;
  nlohmann::json history = nlohmann::json::array();
  std::vector<ArchiveArray> params;
  std::vector<ArchiveArray> buffers;
  std::vector<ArchiveArray> velocity;
};

Checkpoint capture(const TaslNet& model, const Sgd* optimizer, const TrainConfig& config, int epoch);
/// Copies weights and running statistics into `model`; shapes must match.
void restore(TaslNet& model, const Checkpoint& ckpt);
std::unique_ptr<TaslNet> build_model(const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Batch {
  nn::Tensor tics;      // [B, 6, F]
  nn::Tensor video;     // [B, F, S, 2S, 3] in [0, 1]
  nn::Tensor clinical;  // [B, d] or undefined
  std::vector<int> labels;
};

Batch make_batch(const std::vector<const PreparedCase*>& cases, bool use_clinical, int clinical_dim);

struct Evaluation {
  std::vector<double> scores;  // sigmoid of the logits
  std::vector<int> labels;
  std::vector<std::string> ids;
  double loss = 0.0;
  double mmd = 0.0;
  double focal = 0.0;
};

Evaluation evaluate(TaslNet& model, const std::vector<PreparedCase>& cases, const TrainConfig& config);

struct TrainResult {
  Checkpoint best;   // highest validation AUC (ties: lower validation loss)
  Checkpoint last;
  nlohmann::json history = nlohmann::json::array();
};

using EpochCallback = std::function<void(const nlohmann::json& record)>;

/// Joint training of both branches and the classifier on the total loss.
/// Throws DataError for an empty training set, DivergenceError on a non-finite loss.
TrainResult train(const TrainConfig& config, const std::vector<PreparedCase>& train_cases,
                  const std::vector<PreparedCase>& val_cases, const EpochCallback& on_epoch = {});

struct CvResult {
  obj::MetricsReport report;
  std::vector<std::vector<std::string>> folds;
  std::vector<Checkpoint> checkpoints;
};

CvResult run_cv(const TrainConfig& config, const std::vector<PreparedCase>& cases, int k,
                const EpochCallback& on_epoch = {});

}  // namespace tasl
