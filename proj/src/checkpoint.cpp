#include "mcffa/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "mcffa/errors.hpp"

namespace mcffa {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string encode_metadata(const std::vector<std::pair<std::string, std::string>>& metadata) {
  std::string s;
  for (const auto& [k, v] : metadata) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("metadata key '" + k + "' or its value contains a reserved character");
    }
    s += k + "=" + v + "\n";
  }
  return s;
}

std::vector<std::pair<std::string, std::string>> decode_metadata(std::string_view s) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t start = 0;
  while (start < s.size()) {
    const std::size_t end = s.find('\n', start);
    if (end == std::string_view::npos) throw CheckpointError("unterminated metadata line");
    const auto line = s.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0) throw CheckpointError("malformed metadata line");
    out.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    start = end + 1;
  }
  return out;
}

std::optional<std::string> map_name(const std::string& model_name, const std::vector<NameMapRule>& rules) {
  for (const auto& r : rules) {
    if (model_name.compare(0, r.to_prefix.size(), r.to_prefix) == 0) {
      return r.from_prefix + model_name.substr(r.to_prefix.size());
    }
  }
  return std::nullopt;
}

void copy_into(const CheckpointTensor& src, const NamedTensor& dst) {
  Tensor t = dst.tensor;
  std::copy(src.values.begin(), src.values.end(), t.mutable_data().begin());
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  for (auto& [k, v] : metadata) {
    if (k == key) {
      v = value;
      return;
    }
  }
  metadata.emplace_back(key, value);
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    left -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::set<std::string> names;
  std::string out = "MCFF";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.empty()) throw CheckpointError("checkpoint tensor with an empty name");
    if (!names.insert(t.name).second) throw CheckpointError("duplicate tensor name " + t.name);
    if (numel(t.shape) != t.values.size()) throw CheckpointError("tensor " + t.name + " has a shape/value mismatch");
    for (float v : t.values) {
      if (!std::isfinite(v)) throw CheckpointError("tensor " + t.name + " holds a non-finite value");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  const std::string meta = encode_metadata(ckpt.metadata);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "MCFF") throw CheckpointError("bad magic: not a checkpoint file");
  Reader r(bytes);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = r.get<std::uint32_t>("name length");
    t.name = std::string(r.take(name_len, "tensor name"));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw CheckpointError("tensor " + t.name + " has implausible rank " + std::to_string(rank));
    // Saturating element count so that corrupt extents cannot wrap around.
    std::size_t n = 1;
    bool saturated = false;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>("dimensions");
      t.shape.push_back(static_cast<std::size_t>(dim));
      if (dim == 0) {
        n = 0;
      } else if (n != 0 && (saturated || dim > bytes.size() || n > bytes.size() / dim)) {
        saturated = true;
      } else {
        n *= static_cast<std::size_t>(dim);
      }
    }
    if (saturated && n != 0) throw CheckpointError("truncated checkpoint: tensor " + t.name);
    if (n > r.remaining() / sizeof(float)) throw CheckpointError("truncated checkpoint: tensor " + t.name);
    const auto payload = r.take(n * sizeof(float), "values");
    t.values.resize(n);
    if (n) std::memcpy(t.values.data(), payload.data(), payload.size());
    if (!names.insert(t.name).second) throw CheckpointError("duplicate tensor name " + t.name);
    ckpt.tensors.push_back(std::move(t));
  }
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const auto meta = r.take(meta_len, "metadata");
  const std::size_t body = r.pos();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint checksum");
  if (crc32_of(bytes.substr(0, body)) != stored) throw CheckpointError("checkpoint CRC mismatch: file is corrupt");
  ckpt.metadata = decode_metadata(meta);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError("cannot move checkpoint into place at " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint checkpoint_from(const ParameterList& params, std::vector<std::pair<std::string, std::string>> metadata) {
  Checkpoint c;
  for (const auto& p : params) {
    c.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  c.metadata = std::move(metadata);
  return c;
}

void load_parameters(const Checkpoint& ckpt, const ParameterList& params) {
  std::set<std::string> model_names;
  for (const auto& p : params) {
    model_names.insert(p.name);
    const CheckpointTensor* src = ckpt.find(p.name);
    if (!src) throw CheckpointMismatch(p.name, "checkpoint lacks tensor " + p.name);
    if (src->shape != p.tensor.shape()) {
      throw CheckpointMismatch(p.name, "tensor " + p.name + " has shape " + to_string(src->shape) +
                                           " in the checkpoint but " + to_string(p.tensor.shape()) + " in the model");
    }
  }
  for (const auto& t : ckpt.tensors) {
    if (!model_names.count(t.name)) throw CheckpointMismatch(t.name, "checkpoint tensor " + t.name + " is not in the model");
  }
  for (const auto& p : params) copy_into(*ckpt.find(p.name), p);
}

std::vector<NameMapRule> parse_name_map(const std::string& spec) {
  std::vector<NameMapRule> rules;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("name map entry '" + item + "' lacks '='");
    rules.push_back({item.substr(0, eq), item.substr(eq + 1)});
  }
  return rules;
}

ImportSummary import_partial(const Checkpoint& ckpt, const ParameterList& params, const std::vector<NameMapRule>& rules,
                             bool strict) {
  ImportSummary s;
  std::vector<std::pair<const CheckpointTensor*, const NamedTensor*>> plan;
  for (const auto& p : params) {
    const auto source = map_name(p.name, rules);
    if (!source) continue;
    const CheckpointTensor* src = ckpt.find(*source);
    if (!src) {
      if (strict) throw CheckpointMismatch(p.name, "checkpoint lacks tensor " + *source + " for " + p.name);
      s.missing.push_back(p.name);
    } else if (src->shape != p.tensor.shape()) {
      if (strict) {
        throw CheckpointMismatch(p.name, "tensor " + *source + " has shape " + to_string(src->shape) + " but " +
                                             p.name + " has " + to_string(p.tensor.shape()));
      }
      s.skipped.push_back(p.name);
    } else {
      plan.emplace_back(src, &p);
      s.loaded.push_back(p.name);
    }
  }
  for (const auto& [src, dst] : plan) copy_into(*src, *dst);
  return s;
}

}  // namespace mcffa
