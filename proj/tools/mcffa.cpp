#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mcffa/blocks.hpp"
#include "mcffa/checkpoint.hpp"
#include "mcffa/config.hpp"
#include "mcffa/data.hpp"
#include "mcffa/errors.hpp"
#include "mcffa/metrics.hpp"
#include "mcffa/ops.hpp"
#include "mcffa/random.hpp"
#include "mcffa/selfcheck.hpp"
#include "mcffa/training.hpp"

namespace fs = std::filesystem;
using namespace mcffa;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4, kCheckpoint = 5 };

constexpr const char* kMetaPrefix = "cfg.";

struct CommonFlags {
  std::string config_path;
  std::string preset, data_csv, image_dir, out;
  std::uint64_t seed = 0;
  std::size_t folds = 0, max_epochs = 0, batch_size = 0;
  double lr = 0;
  bool deterministic = false;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, CLI::Option*>> flagged;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Config file of 'key = value' lines");
    auto opt = [&](const char* flag, const char* key, auto& target, const char* help) {
      flagged.emplace_back(key, cmd->add_option(flag, target, help));
    };
    opt("--preset", "preset", preset, "micro or paper");
    opt("--data-csv", "data.csv", data_csv, "Label CSV");
    opt("--image-dir", "data.image_dir", image_dir, "Directory of <image_id>.ppm files");
    opt("--out", "out", out, "Output directory");
    opt("--seed", "seed", seed, "Master seed");
    opt("--folds", "kfold.folds", folds, "Number of cross-validation folds");
    opt("--max-epochs", "train.max_epochs", max_epochs, "Epoch budget");
    opt("--batch-size", "train.batch_size", batch_size, "Mini-batch size");
    opt("--lr", "train.lr", lr, "Initial learning rate");
    flagged.emplace_back("deterministic", cmd->add_flag("--deterministic", deterministic, "Single-threaded, reproducible run"));
    cmd->add_option("--set", sets, "Override a config key, e.g. --set model.se_ratio=8");
  }

  // Command-line layer: explicit flags first, then --set entries.
  ConfigMap layer() const {
    ConfigMap m;
    for (const auto& [key, option] : flagged) {
      if (option->count() == 0) continue;
      m[key] = key == "deterministic" ? std::string("true") : option->as<std::string>();
    }
    for (const auto& s : sets) {
      auto [k, v] = parse_assignment(s);
      m[k] = v;
    }
    return m;
  }

  // Layers, lowest precedence first: `base` (e.g. from a checkpoint), the
  // config file, then the command line.
  ConfigMap effective(const ConfigMap& base = {}, const std::string& base_name = "checkpoint") const {
    std::vector<std::pair<std::string, ConfigMap>> layers;
    if (!base.empty()) layers.emplace_back(base_name, base);
    if (!config_path.empty()) layers.emplace_back(config_path, read_config_file(config_path));
    layers.emplace_back("command line", layer());
    return layered_config(layers);
  }
};

void require_data(const RunConfig& run) {
  if (run.data_csv.empty()) throw ConfigError("missing --data-csv (or data.csv in the config file)");
  if (run.image_dir.empty()) throw ConfigError("missing --image-dir (or data.image_dir in the config file)");
}

std::vector<std::pair<std::string, std::string>> checkpoint_meta(const ConfigMap& cfg) {
  std::vector<std::pair<std::string, std::string>> meta;
  for (const auto& [k, v] : cfg) meta.emplace_back(kMetaPrefix + k, v);
  return meta;
}

ConfigMap config_from_checkpoint(const Checkpoint& ckpt) {
  ConfigMap m;
  const std::string prefix = kMetaPrefix;
  for (const auto& [k, v] : ckpt.metadata) {
    if (!k.starts_with(prefix)) continue;
    const std::string key = k.substr(prefix.size());
    // Paths describe the training run, not the one reading the checkpoint.
    if (key == "data.csv" || key == "data.image_dir" || key == "out") continue;
    m[key] = v;
  }
  return m;
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

void write_report(const fs::path& dir, const MetricReport& report) {
  write_text_atomic(dir / "report.csv", report_render(report, "csv"));
  write_text_atomic(dir / "confusion.csv", confusion_csv(report.matrix));
}

void print_warnings(const ModelConfig& model) {
  for (const auto& w : coverage_warnings(model)) std::cerr << "note: " << w << "\n";
}

// ------------------------------------------------------------------ commands

int cmd_train(const CommonFlags& flags) {
  const ConfigMap cfg = flags.effective();
  const RunConfig run = resolve_config(cfg);
  require_data(run);
  print_warnings(run.model);
  const auto samples = load_dataset(run.data_csv, run.image_dir, run.model.input_size);
  const SplitPlan split = make_holdout(labels_of(samples), run.train_fraction, run.seed);
  McffaModel model(run.model, derive_seed(run.seed, "model"));
  fs::create_directories(run.out_dir);
  write_text_atomic(run.out_dir / "effective.cfg", render_config(cfg));

  ParameterSnapshot last;
  auto on_epoch = [&](const EpochRecord& rec, McffaModel& m) {
    last = ParameterSnapshot::take(m.parameters());
    std::cerr << "epoch " << rec.epoch << " train_loss " << fmt("%.4f", rec.train_loss) << " val_loss "
              << fmt("%.4f", rec.val_loss) << " val_acc " << fmt("%.2f", rec.val_acc) << "\n";
    return true;
  };
  const TrainResult result =
      train(model, samples, split.train_indices(), split.val_indices(), run.train, on_epoch);
  write_text_atomic(run.out_dir / "epochs.csv", epochs_csv(result.history));

  const ParameterList params = model.parameters();
  auto meta = checkpoint_meta(cfg);
  auto with = [&](std::string kind, std::size_t epoch, double val_loss) {
    auto m = meta;
    m.emplace_back("kind", std::move(kind));
    m.emplace_back("epoch", std::to_string(epoch));
    m.emplace_back("val_loss", fmt("%.9g", val_loss));
    return m;
  };
  const std::size_t last_epoch = result.history.empty() ? 0 : result.history.back().epoch;
  const double last_loss = result.history.empty() ? 0.0 : result.history.back().val_loss;
  const ParameterSnapshot current = ParameterSnapshot::take(params);
  if (last.names.empty()) last = current;
  last.restore(params);
  save_checkpoint(checkpoint_from(params, with("last", last_epoch, last_loss)), run.out_dir / "last.mcff");
  if (!result.history.empty()) result.best.restore(params);
  save_checkpoint(checkpoint_from(params, with("best", result.best_epoch, result.history.empty() ? 0.0 : result.best_val_loss)),
                  run.out_dir / "best.mcff");
  current.restore(params);

  const EvalResult ev = evaluate(model, samples, split.val_indices());
  const MetricReport report = metrics(confusion(ev.predictions, ev.labels, run.model.classes));
  write_report(run.out_dir, report);
  std::cout << report_render(report, "text");
  return kOk;
}

struct LoadedModel {
  ConfigMap cfg;
  RunConfig run;
  McffaModel model;
};

LoadedModel load_model(const CommonFlags& flags, const std::string& ckpt_path) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ConfigMap cfg = flags.effective(config_from_checkpoint(ckpt), ckpt_path);
  RunConfig run = resolve_config(cfg);
  McffaModel model(run.model, derive_seed(run.seed, "model"));
  load_parameters(ckpt, model.parameters());
  return {cfg, std::move(run), std::move(model)};
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt_path) {
  LoadedModel lm = load_model(flags, ckpt_path);
  require_data(lm.run);
  const auto samples = load_dataset(lm.run.data_csv, lm.run.image_dir, lm.run.model.input_size);
  const EvalResult ev = evaluate(lm.model, samples, {});
  const MetricReport report = metrics(confusion(ev.predictions, ev.labels, lm.run.model.classes));
  fs::create_directories(lm.run.out_dir);
  write_report(lm.run.out_dir, report);
  std::cout << report_render(report, "text");
  return kOk;
}

int cmd_predict(const CommonFlags& flags, const std::string& ckpt_path, const std::string& image_path) {
  LoadedModel lm = load_model(flags, ckpt_path);
  const std::size_t r = lm.run.model.input_size;
  const Image img = resize_bilinear(read_image(image_path), r, r);
  const Tensor x = reshape(image_to_tensor(img), {1, 3, r, r});
  const Tensor probs = lm.model.predict(x);
  const auto p = probs.data();
  std::size_t best = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] > p[best]) best = c;
    const std::string name = c < kNumClasses ? kClassNames[c] : "class" + std::to_string(c);
    std::cout << name << " " << fmt("%.6f", p[c]) << "\n";
  }
  std::cout << "predicted " << (best < kNumClasses ? kClassNames[best] : "class" + std::to_string(best)) << "\n";
  return kOk;
}

int cmd_kfold(const CommonFlags& flags) {
  const ConfigMap cfg = flags.effective();
  const RunConfig run = resolve_config(cfg);
  if (run.folds < 2) throw ConfigError("--folds must be at least 2, got " + std::to_string(run.folds));
  require_data(run);
  print_warnings(run.model);
  const auto samples = load_dataset(run.data_csv, run.image_dir, run.model.input_size);
  const KfoldResult result = kfold_run(run.model, samples, run.train, run.folds, run.deterministic ? 1 : 0);
  const std::string csv = kfold_csv(result);
  fs::create_directories(run.out_dir);
  write_text_atomic(run.out_dir / "effective.cfg", render_config(cfg));
  write_text_atomic(run.out_dir / "kfold.csv", csv);
  std::cout << csv;
  return kOk;
}

std::string normalize_variant(const std::string& spec) {
  std::stringstream ss(spec);
  std::string item, out;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t\r");
    const auto e = item.find_last_not_of(" \t\r");
    if (!out.empty()) out += ',';
    if (b != std::string::npos) out += item.substr(b, e - b + 1);
  }
  return out;
}

std::vector<std::string> read_variant_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open variant file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(line);
  }
  return out;
}

int cmd_variants(const CommonFlags& flags, std::vector<std::string> specs, const std::string& spec_file) {
  const ConfigMap cfg = flags.effective();
  const RunConfig run = resolve_config(cfg);
  if (!spec_file.empty()) {
    for (auto& s : read_variant_file(spec_file)) specs.push_back(s);
  }
  if (specs.empty()) specs = sweep_variants();
  std::set<std::string> seen;
  std::vector<ModelConfig> models;
  for (auto& s : specs) {
    s = normalize_variant(s);
    if (!seen.insert(s).second) throw ConfigError("variant '" + s + "' is listed twice");
    models.push_back(model_for_variant(run, s));
  }
  require_data(run);
  const auto samples = load_dataset(run.data_csv, run.image_dir, run.model.input_size);
  const SplitPlan split = make_holdout(labels_of(samples), run.train_fraction, run.seed);

  std::vector<std::vector<std::int64_t>> rows;
  for (std::size_t j = 0; j < specs.size(); ++j) {
    std::cerr << "variant " << specs[j] << "\n";
    McffaModel model(models[j], derive_seed(run.seed, "model"));
    train(model, samples, split.train_indices(), split.val_indices(), run.train);
    const EvalResult ev = evaluate(model, samples, split.val_indices());
    rows.push_back(metrics(confusion(ev.predictions, ev.labels, models[j].classes)).headline_cents());
  }
  std::size_t best = 0;
  for (std::size_t j = 1; j < rows.size(); ++j) {
    if (rows[j][0] > rows[best][0] || (rows[j][0] == rows[best][0] && rows[j][3] > rows[best][3])) best = j;
  }
  std::string csv = "variant,accuracy,precision,recall,f1,best\n";
  for (std::size_t j = 0; j < rows.size(); ++j) {
    csv += "\"" + specs[j] + "\"," + headline_row(rows[j]) + "," + (j == best ? "*" : "") + "\n";
  }
  fs::create_directories(run.out_dir);
  write_text_atomic(run.out_dir / "effective.cfg", render_config(cfg));
  write_text_atomic(run.out_dir / "variants.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_gradcheck(std::size_t seeds, const std::string& fault_layer) {
  const auto reports = run_gradcheck(seeds, fault_layer);
  std::printf("%-18s %6s %9s %14s  %s\n", "layer", "seeds", "elements", "max_rel_error", "status");
  std::vector<std::string> failed;
  for (const auto& r : reports) {
    std::printf("%-18s %6zu %9zu %14.3e  %s%s\n", r.layer.c_str(), r.seeds, r.elements, r.max_relative_error,
                r.passed ? "PASS" : "FAIL", r.passed ? "" : ("  worst at " + r.worst_input).c_str());
    if (!r.passed) failed.push_back(r.layer);
  }
  if (failed.empty()) return kOk;
  for (const auto& f : failed) std::cerr << "gradient check failed for layer " << f << "\n";
  return kNumeric;
}

int cmd_synth(std::size_t per_class, std::size_t resolution, std::uint64_t seed, const fs::path& out) {
  if (per_class == 0) throw ConfigError("--per-class must be positive");
  if (resolution == 0) throw ConfigError("--resolution must be positive");
  const auto samples = make_synthetic(per_class, resolution, seed);
  fs::create_directories(out);
  write_dataset(samples, out / "labels.csv", out / "images");
  std::cout << "wrote " << samples.size() << " samples to " << out.string() << "\n";
  return kOk;
}

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const CheckpointMismatch& e) {
    std::cerr << "error: checkpoint does not match the model at tensor " << e.tensor_name() << ": " << e.what() << "\n";
    return kCheckpoint;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-context feature fusion classifier: training, evaluation and self-checks"};
  app.require_subcommand(1);

  CommonFlags train_flags, eval_flags, predict_flags, kfold_flags, variant_flags;
  auto* train_cmd = app.add_subcommand("train", "Train on a holdout split and write checkpoints and reports");
  train_flags.attach(train_cmd);

  std::string eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled dataset");
  eval_flags.attach(eval_cmd);
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();

  std::string predict_ckpt, predict_image;
  auto* predict_cmd = app.add_subcommand("predict", "Class probabilities for one image");
  predict_flags.attach(predict_cmd);
  predict_cmd->add_option("--ckpt", predict_ckpt, "Checkpoint file")->required();
  predict_cmd->add_option("--image", predict_image, "PPM image")->required();

  auto* kfold_cmd = app.add_subcommand("kfold", "Stratified k-fold cross-validation");
  kfold_flags.attach(kfold_cmd);

  std::vector<std::string> variant_specs;
  std::string variant_file;
  auto* variants_cmd = app.add_subcommand("variants", "Train and compare backbone triples");
  variant_flags.attach(variants_cmd);
  variants_cmd->add_option("--variant", variant_specs, "Backbone triple such as A,B,C (repeatable)");
  variants_cmd->add_option("--variants-file", variant_file, "File with one backbone triple per line");

  std::size_t grad_seeds = 5;
  std::string fault_layer;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every layer and the micro model");
  grad_cmd->add_option("--seeds", grad_seeds, "Random seeds per layer");
  grad_cmd->add_option("--inject-fault", fault_layer, "Corrupt the backward pass of this layer");

  std::size_t synth_per_class = 8, synth_resolution = 16;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic four-class dataset");
  synth_cmd->add_option("--per-class", synth_per_class, "Samples per class");
  synth_cmd->add_option("--resolution", synth_resolution, "Image side in pixels");
  synth_cmd->add_option("--seed", synth_seed, "Seed");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  return guarded([&] {
    if (*train_cmd) return cmd_train(train_flags);
    if (*eval_cmd) return cmd_eval(eval_flags, eval_ckpt);
    if (*predict_cmd) return cmd_predict(predict_flags, predict_ckpt, predict_image);
    if (*kfold_cmd) return cmd_kfold(kfold_flags);
    if (*variants_cmd) return cmd_variants(variant_flags, variant_specs, variant_file);
    if (*grad_cmd) return cmd_gradcheck(grad_seeds, fault_layer);
    return cmd_synth(synth_per_class, synth_resolution, synth_seed, synth_out);
  });
}
