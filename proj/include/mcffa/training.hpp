#pragma once

// Loss, optimizers, learning-rate schedule, early stopping, the epoch loop
// and k-fold cross-validation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mcffa/blocks.hpp"
#include "mcffa/data.hpp"
#include "mcffa/metrics.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

// Mean over the batch of -log(max(p[label], 1e-12)). probs is [N, C].
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs, const std::vector<int>& labels);

inline constexpr double kProbabilityFloor = 1e-12;

enum class OptimizerKind { kAdam, kSgd };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;  // SGD only
};

// Updates every trainable, non-buffer parameter from its gradient. A
// trainable parameter without a gradient is an error.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {});

  void step(const ParameterList& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Drops every gradient buffer so that unreached parameters are detectable.
void clear_gradients(const ParameterList& params);

struct ScheduleConfig {
  double init_lr = 1e-3;
  std::size_t step_every = 10;
  double step_factor = 0.5;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.1;
  double plateau_min_delta = 1e-4;
  double lr_floor = 1e-7;
  std::size_t early_stop_patience = 35;

  void validate() const;
};

// Number of plateau reductions triggered by a validation-loss history: a
// reduction fires once `patience` consecutive epochs fail to improve the best
// value by at least min_delta, after which the count of stale epochs restarts.
std::size_t plateau_events(const std::vector<double>& val_history, const ScheduleConfig& cfg);

// Learning rate for `epoch` (0-based) given the validation losses of the
// epochs before it:
//   init_lr * step_factor^floor(epoch / step_every) * plateau_factor^events,
// never below lr_floor.
double lr_schedule(std::size_t epoch, const std::vector<double>& val_history, const ScheduleConfig& cfg);

// True iff the first minimum of the history is more than `patience` epochs
// before its last entry.
bool early_stop(const std::vector<double>& val_history, std::size_t patience);

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentSpec augmentation;
  bool shuffle = true;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  // Restore the parameters of the lowest validation loss once training ends.
  bool restore_best = true;

  void validate() const;
};

// "paper": batch 16, lr 1e-3, 100 epochs. "micro": batch 8, lr 3e-3,
// 200 epochs, sized for the desk-scale model.
TrainConfig train_preset(const std::string& name);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;  // percent, running over the epoch in train mode
  double val_loss = 0;
  double val_acc = 0;  // percent
  double lr = 0;
};

// Values of every parameter and buffer, in parameters() order.
struct ParameterSnapshot {
  std::vector<std::string> names;
  std::vector<std::vector<float>> values;

  static ParameterSnapshot take(const ParameterList& params);
  void restore(const ParameterList& params) const;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  bool early_stopped = false;
  bool stopped_by_callback = false;
  ParameterSnapshot best;
  // Sorted sample indices that took part in a training step.
  std::vector<std::size_t> seen_indices;
};

// Called after each epoch; returning false ends training.
using EpochCallback = std::function<bool(const EpochRecord&, McffaModel&)>;

struct EvalResult {
  double loss = 0;
  double accuracy = 0;  // percent
  std::vector<int> predictions;
  std::vector<int> labels;
  std::vector<std::vector<float>> probabilities;
};

// Inference-mode pass over `indices` (all samples when empty).
EvalResult evaluate(McffaModel& model, const std::vector<Sample>& samples, const std::vector<std::size_t>& indices,
                    std::size_t batch_size = 32);

// Runs the epoch loop. A non-finite loss aborts with NumericError naming the
// epoch and batch. With max_epochs = 0 the model is left untouched.
TrainResult train(McffaModel& model, const std::vector<Sample>& samples, const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx, const TrainConfig& cfg, const EpochCallback& callback = {});

// epoch,train_loss,train_acc,val_loss,val_acc,lr with six decimals.
std::string epochs_csv(const std::vector<EpochRecord>& history);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> val_indices;
  MetricReport report;
  TrainResult training;
};

struct KfoldResult {
  std::vector<FoldResult> folds;
  // accuracy, precision, recall, f1 averaged over folds, hundredths of a percent.
  std::vector<std::int64_t> average_cents;
};

// Trains one fresh model per fold of a stratified split and evaluates it on
// the held-out fold. Folds run on `threads` workers (0 reads MCFFA_THREADS,
// defaulting to 1); results do not depend on the thread count.
KfoldResult kfold_run(const ModelConfig& model_cfg, const std::vector<Sample>& samples, const TrainConfig& cfg,
                      std::size_t k, std::size_t threads = 0);

// fold,accuracy,precision,recall,f1 rows then an "avg" row, two decimals.
std::string kfold_csv(const KfoldResult& result);

// Writes `content` through a temporary file renamed into place.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace mcffa
