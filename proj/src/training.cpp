#include "mcffa/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "mcffa/errors.hpp"
#include "mcffa/ops.hpp"
#include "mcffa/random.hpp"

namespace mcffa {

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw ShapeError("cross_entropy expects [N, C] probabilities, got " + to_string(probs.shape()));
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  if (n == 0) throw ShapeError("cross_entropy of an empty batch");
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto p = probs.data();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc -= std::log(std::max(static_cast<double>(p[i * c + static_cast<std::size_t>(labels[i])]), kProbabilityFloor));
  }
  auto backward = [labels, n, c](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    const double upstream = static_cast<double>(node.grad[0]) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t at = i * c + static_cast<std::size_t>(labels[i]);
      const double pv = static_cast<double>(in.data[at]);
      if (pv > kProbabilityFloor) g[at] += static_cast<T>(-upstream / pv);
    }
  };
  return make_result<T>("cross_entropy", {}, {static_cast<T>(acc / static_cast<double>(n))}, {probs}, backward);
}

template BasicTensor<float> cross_entropy(const BasicTensor<float>&, const std::vector<int>&);
template BasicTensor<double> cross_entropy(const BasicTensor<double>&, const std::vector<int>&);

// ---------------------------------------------------------------- optimizer

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "sgd"; }

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1) || !(cfg_.beta2 >= 0 && cfg_.beta2 < 1)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(cfg_.eps > 0)) throw ConfigError("Adam epsilon must be positive");
  if (!(cfg_.momentum >= 0 && cfg_.momentum < 1)) throw ConfigError("SGD momentum must lie in [0, 1)");
}

void Optimizer::step(const ParameterList& params, double lr) {
  if (!std::isfinite(lr) || lr < 0) throw ConfigError("learning rate must be finite and non-negative");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  if (m_.size() != params.size()) throw ConfigError("parameter list changed between optimizer steps");
  for (const auto& p : params) {
    if (p.trainable && !p.buffer && !p.tensor.has_grad()) {
      throw NumericError("missing gradient for trainable parameter " + p.name);
    }
  }
  ++t_;
  const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (!p.trainable || p.buffer) continue;
    Tensor t = p.tensor;
    auto w = t.mutable_data();
    const auto g = t.mutable_grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != w.size()) m.assign(w.size(), 0.0);
    if (cfg_.kind == OptimizerKind::kAdam && v.size() != w.size()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      double update;
      if (cfg_.kind == OptimizerKind::kAdam) {
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      } else {
        m[i] = cfg_.momentum * m[i] + gi;
        update = lr * m[i];
      }
      if (update != 0) w[i] = static_cast<float>(w[i] - update);
    }
  }
}

void clear_gradients(const ParameterList& params) {
  for (const auto& p : params) p.tensor.impl()->grad.clear();
}

// ----------------------------------------------------------------- schedule

void ScheduleConfig::validate() const {
  if (!(init_lr > 0) || !std::isfinite(init_lr)) throw ConfigError("initial learning rate must be positive");
  if (step_every == 0) throw ConfigError("step schedule period must be positive");
  if (!(step_factor > 0 && step_factor <= 1)) throw ConfigError("step factor must lie in (0, 1]");
  if (!(plateau_factor > 0 && plateau_factor <= 1)) throw ConfigError("plateau factor must lie in (0, 1]");
  if (plateau_patience == 0) throw ConfigError("plateau patience must be positive");
  if (!(plateau_min_delta >= 0)) throw ConfigError("plateau min_delta must be non-negative");
  if (!(lr_floor >= 0)) throw ConfigError("learning-rate floor must be non-negative");
}

std::size_t plateau_events(const std::vector<double>& val_history, const ScheduleConfig& cfg) {
  std::size_t events = 0, stale = 0;
  double best = std::numeric_limits<double>::infinity();
  for (double v : val_history) {
    if (v < best - cfg.plateau_min_delta) {
      best = v;
      stale = 0;
    } else if (++stale >= cfg.plateau_patience) {
      ++events;
      stale = 0;
    }
  }
  return events;
}

double lr_schedule(std::size_t epoch, const std::vector<double>& val_history, const ScheduleConfig& cfg) {
  cfg.validate();
  const std::size_t seen = std::min(epoch, val_history.size());
  const std::vector<double> prior(val_history.begin(), val_history.begin() + static_cast<std::ptrdiff_t>(seen));
  const double steps = static_cast<double>(epoch / cfg.step_every);
  const double lr = cfg.init_lr * std::pow(cfg.step_factor, steps) *
                    std::pow(cfg.plateau_factor, static_cast<double>(plateau_events(prior, cfg)));
  return std::max(lr, cfg.lr_floor);
}

bool early_stop(const std::vector<double>& val_history, std::size_t patience) {
  if (val_history.empty()) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_history.size(); ++i) {
    if (val_history[i] < val_history[best]) best = i;
  }
  return val_history.size() - 1 - best > patience;
}

// ------------------------------------------------------------ training loop

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  schedule.validate();
  if (augment) augmentation.validate();
  Optimizer check(optimizer);
}

TrainConfig train_preset(const std::string& name) {
  TrainConfig cfg;
  if (name == "paper") return cfg;
  if (name == "micro") {
    cfg.batch_size = 8;
    cfg.max_epochs = 200;
    cfg.schedule.init_lr = 3e-3;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected micro or paper)");
}

ParameterSnapshot ParameterSnapshot::take(const ParameterList& params) {
  ParameterSnapshot s;
  for (const auto& p : params) {
    s.names.push_back(p.name);
    s.values.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  }
  return s;
}

void ParameterSnapshot::restore(const ParameterList& params) const {
  if (params.size() != names.size()) throw ConfigError("snapshot does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].name != names[k] || params[k].tensor.numel() != values[k].size()) {
      throw ConfigError("snapshot entry " + names[k] + " does not match parameter " + params[k].name);
    }
    Tensor t = params[k].tensor;
    std::copy(values[k].begin(), values[k].end(), t.mutable_data().begin());
  }
}

namespace {

std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  const auto p = probs.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = p.subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

EvalResult evaluate(McffaModel& model, const std::vector<Sample>& samples, const std::vector<std::size_t>& indices,
                    std::size_t batch_size) {
  const auto subset = indices.empty() ? all_indices(samples.size()) : indices;
  if (subset.empty()) throw DataError("evaluation set is empty");
  NoGradGuard no_grad;
  BatchIterator it(samples, subset, batch_size, false, 0);
  it.start_epoch(0);
  EvalResult r;
  double loss_sum = 0;
  std::size_t correct = 0;
  Batch b;
  while (it.next(b)) {
    const Tensor probs = model.predict(b.images);
    const double loss = cross_entropy(probs, b.labels).item();
    if (!std::isfinite(loss)) throw NumericError("non-finite evaluation loss");
    loss_sum += loss * static_cast<double>(b.labels.size());
    const auto pred = argmax_rows(probs);
    const std::size_t c = probs.dim(1);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      correct += pred[i] == b.labels[i];
      r.predictions.push_back(pred[i]);
      r.labels.push_back(b.labels[i]);
      const auto row = probs.data().subspan(i * c, c);
      r.probabilities.emplace_back(row.begin(), row.end());
    }
  }
  const double n = static_cast<double>(r.labels.size());
  r.loss = loss_sum / n;
  r.accuracy = 100.0 * static_cast<double>(correct) / n;
  return r;
}

TrainResult train(McffaModel& model, const std::vector<Sample>& samples, const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx, const TrainConfig& cfg, const EpochCallback& callback) {
  cfg.validate();
  if (train_idx.empty()) throw DataError("training set is empty");
  if (val_idx.empty()) throw DataError("validation set is empty");
  const ParameterList params = model.parameters();
  TrainResult result;
  result.best = ParameterSnapshot::take(params);
  result.best_val_loss = std::numeric_limits<double>::infinity();
  if (cfg.max_epochs == 0) return result;

  Optimizer opt(cfg.optimizer);
  BatchIterator it(samples, train_idx, cfg.batch_size, cfg.shuffle, cfg.seed,
                   cfg.augment ? std::optional<AugmentSpec>(cfg.augmentation) : std::nullopt);
  std::vector<double> val_history;
  std::set<std::size_t> seen_ids;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, val_history, cfg.schedule);
    it.start_epoch(epoch);
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0, batch_no = 0;
    Batch b;
    while (it.next(b)) {
      Rng dropout_rng = make_rng(cfg.seed, "dropout", epoch, batch_no);
      clear_gradients(params);
      const Tensor probs = model.forward(b.images, Mode::kTrain, dropout_rng);
      const Tensor loss = cross_entropy(probs, b.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no));
      }
      loss.backward();
      opt.step(params, rec.lr);
      const auto pred = argmax_rows(probs);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
      loss_sum += lv * static_cast<double>(b.labels.size());
      seen += b.labels.size();
      seen_ids.insert(b.indices.begin(), b.indices.end());
      ++batch_no;
    }
    clear_gradients(params);
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
    const EvalResult val = evaluate(model, samples, val_idx, std::max<std::size_t>(cfg.batch_size, 32));
    rec.val_loss = val.loss;
    rec.val_acc = val.accuracy;
    result.history.push_back(rec);
    val_history.push_back(rec.val_loss);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.best = ParameterSnapshot::take(params);
    }
    if (callback && !callback(rec, model)) {
      result.stopped_by_callback = true;
      break;
    }
    if (early_stop(val_history, cfg.schedule.early_stop_patience)) {
      result.early_stopped = true;
      break;
    }
  }
  result.seen_indices.assign(seen_ids.begin(), seen_ids.end());
  if (cfg.restore_best) result.best.restore(params);
  return result;
}

std::string epochs_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_loss,val_acc,lr\n";
  char line[256];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss, r.train_acc, r.val_loss,
                  r.val_acc, r.lr);
    os << line;
  }
  return os.str();
}

// ------------------------------------------------------------------- k-fold

namespace {

std::size_t threads_from_env() {
  const char* env = std::getenv("MCFFA_THREADS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(env, &used);
    if (used != std::string(env).size() || v == 0) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("MCFFA_THREADS must be a positive integer, got '") + env + "'");
  }
}

}  // namespace

KfoldResult kfold_run(const ModelConfig& model_cfg, const std::vector<Sample>& samples, const TrainConfig& cfg,
                      std::size_t k, std::size_t threads) {
  if (k < 2) throw ConfigError("k-fold needs at least 2 folds");
  cfg.validate();
  model_cfg.validate();
  const auto labels = labels_of(samples);
  // Validates every class against k before any work starts.
  make_kfold(labels, k, 0, cfg.seed);
  if (threads == 0) threads = threads_from_env();
  threads = std::min(threads, k);

  KfoldResult result;
  result.folds.resize(k);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t f = next++; f < k; f = next++) {
      try {
        const SplitPlan plan = make_kfold(labels, k, f, cfg.seed);
        McffaModel model(model_cfg, derive_seed(cfg.seed, "fold.model", f));
        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = derive_seed(cfg.seed, "fold.train", f);
        const auto val_idx = plan.val_indices();
        FoldResult fr;
        fr.fold = f;
        fr.val_indices = val_idx;
        fr.training = train(model, samples, plan.train_indices(), val_idx, fold_cfg);
        const EvalResult ev = evaluate(model, samples, val_idx);
        fr.report = metrics(confusion(ev.predictions, ev.labels, model_cfg.classes));
        result.folds[f] = std::move(fr);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = k;
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<std::int64_t> per_fold;
    for (const auto& f : result.folds) per_fold.push_back(f.report.headline_cents()[m]);
    result.average_cents.push_back(mean_cents(per_fold));
  }
  return result;
}

std::string kfold_csv(const KfoldResult& result) {
  std::string s = "fold,accuracy,precision,recall,f1\n";
  for (const auto& f : result.folds) s += std::to_string(f.fold) + "," + headline_row(f.report.headline_cents()) + "\n";
  s += "avg," + headline_row(result.average_cents) + "\n";
  return s;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

}  // namespace mcffa
