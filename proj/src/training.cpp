#include "spectra/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "spectra/errors.hpp"

namespace spectra {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train config: learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train config: beta1 and beta2 must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train config: eps must be > 0");
}

double cross_entropy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: probabilities " + shape_str(probs.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t K = probs.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(K) + ")");
    }
    total -= std::log(std::max(probs.at(i, static_cast<std::size_t>(labels[i])), 1e-12));
  }
  return total / static_cast<double>(labels.size());
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

Metrics metrics_from_predictions(std::span<const int> predicted, std::span<const int> truth, std::size_t n_classes) {
  if (predicted.size() != truth.size() || truth.empty()) {
    throw DataError("metrics: need equally sized, nonempty prediction and label lists");
  }
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]);
    const auto t = static_cast<std::size_t>(truth[i]);
    if (p >= n_classes || t >= n_classes) throw LabelError("metrics: class index out of range");
    if (p == t) {
      ++correct;
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  m.precision.resize(n_classes);
  m.recall.resize(n_classes);
  m.f1.resize(n_classes);
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double pd = static_cast<double>(tp[k] + fp[k]);
    const double rd = static_cast<double>(tp[k] + fn[k]);
    m.precision[k] = pd > 0 ? static_cast<double>(tp[k]) / pd : 0.0;
    m.recall[k] = rd > 0 ? static_cast<double>(tp[k]) / rd : 0.0;
    const double s = m.precision[k] + m.recall[k];
    m.f1[k] = s > 0 ? 2.0 * m.precision[k] * m.recall[k] / s : 0.0;
  }
  double f1_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (tp[k] + fp[k] + fn[k] == 0) continue;
    f1_sum += m.f1[k];
    ++present;
  }
  m.macro_f1 = f1_sum / static_cast<double>(present);
  return m;
}

Metrics evaluate_probs(const Tensor& probs, std::span<const int> labels) {
  const std::size_t K = probs.dim(1);
  std::vector<int> predicted(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    predicted[i] = static_cast<int>(argmax(std::span<const double>(probs.data() + i * K, K)));
  }
  Metrics m = metrics_from_predictions(predicted, labels, K);
  m.loss = cross_entropy(probs, labels);
  return m;
}

Metrics evaluate(const ModelParams& model, const WindowBatch& data) {
  if (data.size() == 0) throw DataError("evaluate: empty data");
  return evaluate_probs(forward(model, data.windows, false), data.labels);
}

AdamState make_adam_state(const ModelParams& model) {
  AdamState s;
  for (const auto& [name, t] : model.params) {
    s.m.emplace(name, Tensor(t.shape(), 0.0));
    s.v.emplace(name, Tensor(t.shape(), 0.0));
  }
  return s;
}

ModelParams adam_step(const ModelParams& model, const ParamMap& grads, AdamState& state, const TrainConfig& tc) {
  ModelParams next = model;
  ++state.step;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.step));
  for (auto& [name, param] : next.params) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw UsageError("adam_step: no gradient for '" + name + "'");
    const Tensor& g = git->second;
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
      v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
      param[i] -= tc.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tc.eps);
    }
  }
  return next;
}

TrainResult train_epochs(const ModelParams& model, const WindowBatch& train, const TrainConfig& tc,
                         const std::optional<WindowBatch>& eval) {
  tc.validate();
  if (train.size() == 0) throw DataError("train: empty training data");
  const WindowBatch& eval_set = eval ? *eval : train;
  if (eval_set.size() == 0) throw DataError("train: empty evaluation data");

  TrainResult result{model, {}};
  AdamState adam = make_adam_state(model);
  Rng shuffle_rng(tc.seed);
  Rng dropout_rng(tc.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    if (tc.shuffle) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const WindowBatch mb = train.subset(std::vector<std::size_t>(order.begin() + start, order.begin() + end));
      TrainPass pass = forward_backward(result.model, mb.windows, mb.labels, dropout_rng);
      if (!std::isfinite(pass.loss)) throw NumericError("train: loss became non-finite in epoch " + std::to_string(epoch));
      loss_sum += pass.loss * static_cast<double>(end - start);
      result.model = adam_step(result.model, pass.grads, adam, tc);
      result.model.buffers["sepconv.bn_running_mean"] = pass.running_mean;
      result.model.buffers["sepconv.bn_running_var"] = pass.running_var;
    }
    const Metrics m = evaluate(result.model, eval_set);
    result.history.push_back({epoch, loss_sum / static_cast<double>(train.size()), m.accuracy, m.macro_f1});
  }
  return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "epoch,train_loss,eval_acc,eval_macro_f1\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g\n", r.epoch, r.train_loss, r.eval_accuracy,
                  r.eval_macro_f1);
    out << buf;
  }
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace spectra
