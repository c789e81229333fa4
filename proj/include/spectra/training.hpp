#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spectra/data.hpp"
#include "spectra/model.hpp"

namespace spectra {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision;  // per class
  std::vector<double> recall;     // per class
  std::vector<double> f1;         // per class
  double loss = 0.0;              // mean cross-entropy
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_accuracy = 0.0;
  double eval_macro_f1 = 0.0;
};

struct TrainResult {
  ModelParams model;
  std::vector<EpochRecord> history;
};

/// Mean over rows of -log(max(y_hat[label], 1e-12)).
double cross_entropy(const Tensor& probs, std::span<const int> labels);

/// Lowest index wins ties.
std::size_t argmax(std::span<const double> row);

/// Metrics from predicted and true labels over K classes. Classes that never
/// occur in either list get F1 = 0 and are left out of the macro average.
Metrics metrics_from_predictions(std::span<const int> predicted, std::span<const int> truth, std::size_t n_classes);

/// Eval-mode forward over the whole batch.
Metrics evaluate(const ModelParams& model, const WindowBatch& data);
Metrics evaluate_probs(const Tensor& probs, std::span<const int> labels);

/// Adam state: first and second moments, shaped like the parameters.
struct AdamState {
  ParamMap m;
  ParamMap v;
  std::size_t step = 0;
};

AdamState make_adam_state(const ModelParams& model);
/// One Adam update; returns the new parameter set.
ModelParams adam_step(const ModelParams& model, const ParamMap& grads, AdamState& state, const TrainConfig& tc);

/// Mini-batch training. History rows are evaluated on `eval` when given,
/// otherwise on the training data.
TrainResult train_epochs(const ModelParams& model, const WindowBatch& train, const TrainConfig& tc,
                         const std::optional<WindowBatch>& eval = std::nullopt);

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path);

}  // namespace spectra
