#include "mcffa/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "mcffa/errors.hpp"

namespace mcffa {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw ConfigError("cannot format number");
  return std::string(buf, end);
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': '" + value + "' is not " + expected);
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, v);
  if (value.empty() || ec != std::errc{} || p != end) bad_value(key, value, "a non-negative integer");
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0;
  const char* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, v);
  if (value.empty() || ec != std::errc{} || p != end || !std::isfinite(v)) bad_value(key, value, "a finite number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename M>
Field size_field(std::string key, M member) {
  return {key, [member](const RunConfig& r) { return std::to_string(member(r)); },
          [member, key](RunConfig& r, const std::string& v) { member(r) = parse_size(key, v); }};
}

template <typename M>
Field double_field(std::string key, M member) {
  return {key, [member](const RunConfig& r) { return fmt_double(member(r)); },
          [member, key](RunConfig& r, const std::string& v) { member(r) = parse_double(key, v); }};
}

template <typename M>
Field bool_field(std::string key, M member) {
  return {key, [member](const RunConfig& r) { return fmt_bool(member(r)); },
          [member, key](RunConfig& r, const std::string& v) { member(r) = parse_bool(key, v); }};
}

template <typename M>
Field path_field(std::string key, M member) {
  return {key, [member](const RunConfig& r) { return member(r).string(); },
          [member](RunConfig& r, const std::string& v) { member(r) = v; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"preset", [](const RunConfig& r) { return r.preset; },
                 [](RunConfig& r, const std::string& s) { r.preset = s; }});
    v.push_back({"seed", [](const RunConfig& r) { return std::to_string(r.seed); },
                 [](RunConfig& r, const std::string& s) { r.seed = parse_u64("seed", s); }});
    v.push_back(bool_field("deterministic", [](auto& r) -> auto& { return r.deterministic; }));
    v.push_back(path_field("data.csv", [](auto& r) -> auto& { return r.data_csv; }));
    v.push_back(path_field("data.image_dir", [](auto& r) -> auto& { return r.image_dir; }));
    v.push_back(double_field("data.train_fraction", [](auto& r) -> auto& { return r.train_fraction; }));
    v.push_back(path_field("out", [](auto& r) -> auto& { return r.out_dir; }));
    v.push_back(size_field("kfold.folds", [](auto& r) -> auto& { return r.folds; }));

    v.push_back({"model.variant", [](const RunConfig& r) { return r.variant; },
                 [](RunConfig& r, const std::string& s) { r.variant = trim(s); }});
    v.push_back(size_field("model.input_size", [](auto& r) -> auto& { return r.model.input_size; }));
    v.push_back(size_field("model.se_ratio", [](auto& r) -> auto& { return r.model.se_ratio; }));
    v.push_back(
        size_field("model.msdrc_width", [](auto& r) -> auto& { return r.model.msdrc_branch_width; }));
    v.push_back({"model.head_widths", [](const RunConfig& r) { return fmt_list(r.model.head.widths); },
                 [](RunConfig& r, const std::string& s) {
                   r.model.head.widths.clear();
                   for (const auto& item : split_list(s)) r.model.head.widths.push_back(parse_size("model.head_widths", item));
                 }});
    v.push_back({"model.head_dropout", [](const RunConfig& r) { return fmt_list(r.model.head.dropout); },
                 [](RunConfig& r, const std::string& s) {
                   r.model.head.dropout.clear();
                   for (const auto& item : split_list(s)) {
                     r.model.head.dropout.push_back(parse_double("model.head_dropout", item));
                   }
                 }});

    v.push_back(size_field("train.max_epochs", [](auto& r) -> auto& { return r.train.max_epochs; }));
    v.push_back(size_field("train.batch_size", [](auto& r) -> auto& { return r.train.batch_size; }));
    v.push_back({"train.optimizer", [](const RunConfig& r) { return to_string(r.train.optimizer.kind); },
                 [](RunConfig& r, const std::string& s) { r.train.optimizer.kind = parse_optimizer(s); }});
    v.push_back(double_field("train.momentum", [](auto& r) -> auto& { return r.train.optimizer.momentum; }));
    v.push_back(double_field("train.lr", [](auto& r) -> auto& { return r.train.schedule.init_lr; }));
    v.push_back(size_field("train.step_every", [](auto& r) -> auto& { return r.train.schedule.step_every; }));
    v.push_back(double_field("train.step_factor", [](auto& r) -> auto& { return r.train.schedule.step_factor; }));
    v.push_back(size_field("train.plateau_patience",
                           [](auto& r) -> auto& { return r.train.schedule.plateau_patience; }));
    v.push_back(
        double_field("train.plateau_factor", [](auto& r) -> auto& { return r.train.schedule.plateau_factor; }));
    v.push_back(double_field("train.plateau_min_delta",
                             [](auto& r) -> auto& { return r.train.schedule.plateau_min_delta; }));
    v.push_back(double_field("train.lr_floor", [](auto& r) -> auto& { return r.train.schedule.lr_floor; }));
    v.push_back(size_field("train.early_stop_patience",
                           [](auto& r) -> auto& { return r.train.schedule.early_stop_patience; }));
    v.push_back(bool_field("train.restore_best", [](auto& r) -> auto& { return r.train.restore_best; }));
    v.push_back(bool_field("train.shuffle", [](auto& r) -> auto& { return r.train.shuffle; }));
    v.push_back(bool_field("train.augment", [](auto& r) -> auto& { return r.train.augment; }));

    auto aug = [](auto& r) -> auto& { return r.train.augmentation; };
    v.push_back(double_field("augment.rotation_deg", [aug](auto& r) -> auto& { return aug(r).rotation_max_deg; }));
    v.push_back(double_field("augment.width_shift", [aug](auto& r) -> auto& { return aug(r).width_shift_frac; }));
    v.push_back(double_field("augment.height_shift", [aug](auto& r) -> auto& { return aug(r).height_shift_frac; }));
    v.push_back(double_field("augment.shear_deg", [aug](auto& r) -> auto& { return aug(r).shear_max_deg; }));
    v.push_back(double_field("augment.zoom_lo", [aug](auto& r) -> auto& { return aug(r).zoom_lo; }));
    v.push_back(double_field("augment.zoom_hi", [aug](auto& r) -> auto& { return aug(r).zoom_hi; }));
    v.push_back(double_field("augment.brightness_lo", [aug](auto& r) -> auto& { return aug(r).brightness_lo; }));
    v.push_back(double_field("augment.brightness_hi", [aug](auto& r) -> auto& { return aug(r).brightness_hi; }));
    v.push_back(bool_field("augment.hflip", [aug](auto& r) -> auto& { return aug(r).hflip; }));
    v.push_back(bool_field("augment.vflip", [aug](auto& r) -> auto& { return aug(r).vflip; }));
    return v;
  }();
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

RunConfig preset_run(const std::string& preset) {
  RunConfig r;
  r.preset = preset;
  r.train = train_preset(preset);
  r.out_dir = "run";
  if (preset == "micro") {
    r.model = micro_config();
    r.variant = "micro";
  } else {
    r.model = paper_config();
    r.variant = "A,B,C";
  }
  return r;
}

}  // namespace

ConfigMap parse_config(std::string_view text, const std::string& source) {
  ConfigMap out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (out.count(key)) throw ConfigError(where + ": key '" + key + "' set twice");
    out[key] = trim(std::string_view(body).substr(eq + 1));
  }
  return out;
}

ConfigMap read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

ConfigMap preset_defaults(const std::string& preset) {
  const RunConfig r = preset_run(preset);
  ConfigMap out;
  for (const auto& f : fields()) out[f.key] = f.get(r);
  return out;
}

void merge_config(ConfigMap& base, const ConfigMap& layer, const std::string& source) {
  for (const auto& [k, v] : layer) {
    if (!find_field(k)) throw ConfigError(source + ": unknown config key '" + k + "'");
    base[k] = v;
  }
}

std::pair<std::string, std::string> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + text + "' must have the form key=value");
  std::string key = trim(std::string_view(text).substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + text + "' has an empty key");
  return {key, trim(std::string_view(text).substr(eq + 1))};
}

std::string render_config(const ConfigMap& cfg) {
  std::string out = "# effective configuration\n";
  for (const auto& [k, v] : cfg) {
    if (v.find('#') != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("config value for '" + k + "' cannot be written: contains '#' or a newline");
    }
    out += k + " = " + v + "\n";
  }
  return out;
}

ConfigMap layered_config(const std::vector<std::pair<std::string, ConfigMap>>& layers) {
  std::string preset = "paper";
  for (const auto& [source, layer] : layers) {
    if (auto it = layer.find("preset"); it != layer.end()) preset = it->second;
  }
  if (preset != "paper" && preset != "micro") {
    throw ConfigError("unknown preset '" + preset + "' (expected micro or paper)");
  }
  ConfigMap cfg = preset_defaults(preset);
  for (const auto& [source, layer] : layers) merge_config(cfg, layer, source);
  return cfg;
}

RunConfig resolve_config(const ConfigMap& cfg) {
  auto preset_it = cfg.find("preset");
  RunConfig r = preset_run(preset_it == cfg.end() ? "paper" : preset_it->second);
  for (const auto& f : fields()) {
    auto it = cfg.find(f.key);
    if (it == cfg.end()) throw ConfigError("config key '" + f.key + "' is missing");
    f.set(r, it->second);
  }
  for (const auto& [k, v] : cfg) {
    if (!find_field(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  if (!(r.train_fraction > 0 && r.train_fraction < 1)) {
    throw ConfigError("config key 'data.train_fraction' must lie in (0, 1)");
  }
  r.model = model_for_variant(r, r.variant);
  r.train.seed = r.seed;
  r.train.validate();
  return r;
}

ModelConfig model_for_variant(const RunConfig& run, const std::string& spec) {
  ModelConfig m = run.model;
  if (spec == "micro") {
    m.branches = micro_config().branches;
    m.validate();
    return m;
  }
  return variant_assemble(spec, m);
}

}  // namespace mcffa
