#include "stylemine/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include <json.hpp>

namespace stylemine::io {

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kCkptVersion = 1;

void put_le32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_le16(std::ostream& out, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

uint32_t get_le32(std::istream& in, const std::string& path, int64_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError(path + ": truncated at byte " + std::to_string(offset));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t get_le16(std::istream& in, const std::string& path, int64_t offset) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  if (!in) throw FormatError(path + ": truncated at byte " + std::to_string(offset));
  return static_cast<uint16_t>(static_cast<uint16_t>(b[0]) | (static_cast<uint16_t>(b[1]) << 8));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write("ASMC", 4);
  put_le32(out, kCkptVersion);
  put_le32(out, static_cast<uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    if (e.name.empty() || e.name.size() > 65535) throw ContractError("checkpoint entry name length out of range");
    if (e.dtype > 1) throw ContractError("checkpoint entry dtype out of range: " + e.name);
    const Shape& shape = e.dtype == 0 ? e.f32.shape : e.f64.shape;
    if (shape.size() > 8) throw ContractError("checkpoint entry rank out of range: " + e.name);
    put_le16(out, static_cast<uint16_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    out.put(static_cast<char>(e.dtype));
    out.put(static_cast<char>(shape.size()));
    for (int64_t d : shape) put_le32(out, static_cast<uint32_t>(d));
    // payload assumes a little-endian host, like everything else here
    if (e.dtype == 0)
      out.write(reinterpret_cast<const char*>(e.f32.data.data()),
                static_cast<std::streamsize>(e.f32.data.size() * sizeof(float)));
    else
      out.write(reinterpret_cast<const char*>(e.f64.data.data()),
                static_cast<std::streamsize>(e.f64.data.size() * sizeof(double)));
  }
  if (!out) throw FormatError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "ASMC", 4) != 0)
    throw FormatError(path + ": bad magic at byte 0 (expected \"ASMC\")");
  int64_t off = 4;
  const uint32_t version = get_le32(in, path, off);
  off += 4;
  if (version != kCkptVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version) + " at byte 4");
  const uint32_t count = get_le32(in, path, off);
  off += 4;
  Checkpoint ck;
  ck.entries.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t name_len = get_le16(in, path, off);
    off += 2;
    if (name_len == 0) throw FormatError(path + ": empty entry name at byte " + std::to_string(off - 2));
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError(path + ": truncated entry name at byte " + std::to_string(off));
    off += name_len;
    const int dtype = in.get();
    const int rank = in.get();
    if (dtype < 0 || rank < 0) throw FormatError(path + ": truncated entry header at byte " + std::to_string(off));
    off += 2;
    if (dtype != 0 && dtype != 1)
      throw FormatError(path + ": unsupported dtype " + std::to_string(dtype) + " for entry \"" + name + "\" at byte " +
                        std::to_string(off - 2));
    if (rank > 8) throw FormatError(path + ": rank out of range for entry \"" + name + "\"");
    Shape shape(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) {
      shape[static_cast<size_t>(d)] = static_cast<int64_t>(get_le32(in, path, off));
      off += 4;
    }
    if (dtype == 0) {
      Tensor32 t = rank == 0 ? Tensor32::scalar(0.0f) : Tensor32(shape);
      in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
      if (!in)
        throw FormatError(path + ": truncated payload for entry \"" + name + "\" at byte " +
                          std::to_string(off + in.gcount()));
      off += static_cast<int64_t>(t.data.size() * sizeof(float));
      ck.add(std::move(name), std::move(t));
    } else {
      Tensor64 t = rank == 0 ? Tensor64::scalar(0.0) : Tensor64(shape);
      in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      if (!in)
        throw FormatError(path + ": truncated payload for entry \"" + name + "\" at byte " +
                          std::to_string(off + in.gcount()));
      off += static_cast<int64_t>(t.data.size() * sizeof(double));
      ck.add(std::move(name), std::move(t));
    }
  }
  return ck;
}

void pack_params(Checkpoint& ck, const std::string& prefix, const ParamSet<float>& ps) {
  for (const auto& p : ps) {
    ck.add(prefix + "/" + p.name, p.value);
    ck.add(prefix + "/" + p.name + "#m", p.momentum);
  }
}

void unpack_params(const Checkpoint& ck, const std::string& prefix, ParamSet<float>& ps) {
  for (auto& p : ps) {
    const std::string key = prefix + "/" + p.name;
    const CheckpointEntry* e = ck.find(key);
    if (!e) throw FormatError("checkpoint missing entry \"" + key + "\"");
    const Tensor32* v = ck.find_f32(key);
    if (!v) throw FormatError("checkpoint entry \"" + key + "\" is not f32");
    if (!v->same_shape(p.value))
      throw FormatError("checkpoint entry \"" + key + "\" has shape " + shape_str(v->shape) + ", expected " +
                        shape_str(p.value.shape));
    p.value = *v;
    if (const Tensor32* m = ck.find_f32(key + "#m")) {
      if (!m->same_shape(p.momentum))
        throw FormatError("checkpoint entry \"" + key + "#m\" has shape " + shape_str(m->shape) + ", expected " +
                          shape_str(p.momentum.shape));
      p.momentum = *m;
    }
  }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

struct FieldRef {
  enum Kind { kInt, kU64, kDouble, kBool, kString } kind;
  void* ptr;
};

std::vector<std::pair<std::string, FieldRef>> field_table(RunConfig& c) {
  using F = FieldRef;
  return {
      {"seed", {F::kU64, &c.seed}},
      {"out_dir", {F::kString, &c.out_dir}},
      {"side", {F::kInt, &c.side}},
      {"channels", {F::kInt, &c.channels}},
      {"latent", {F::kInt, &c.latent}},
      {"classes", {F::kInt, &c.classes}},
      {"penultimate", {F::kInt, &c.penultimate}},
      {"vae_hidden", {F::kInt, &c.vae_hidden}},
      {"n_train", {F::kInt, &c.n_train}},
      {"n_val", {F::kInt, &c.n_val}},
      {"style_count", {F::kInt, &c.style_count}},
      {"data_seed", {F::kU64, &c.data_seed}},
      {"shift_hue", {F::kDouble, &c.shift_hue}},
      {"shift_gain_r", {F::kDouble, &c.shift_gain_r}},
      {"shift_gain_g", {F::kDouble, &c.shift_gain_g}},
      {"shift_gain_b", {F::kDouble, &c.shift_gain_b}},
      {"shift_bias_r", {F::kDouble, &c.shift_bias_r}},
      {"shift_bias_g", {F::kDouble, &c.shift_bias_g}},
      {"shift_bias_b", {F::kDouble, &c.shift_bias_b}},
      {"shift_texture", {F::kDouble, &c.shift_texture}},
      {"shift_noise", {F::kDouble, &c.shift_noise}},
      {"shift_seed", {F::kU64, &c.shift_seed}},
      {"pretrain_iters", {F::kInt, &c.pretrain_iters}},
      {"pretrain_batch", {F::kInt, &c.pretrain_batch}},
      {"pretrain_lr", {F::kDouble, &c.pretrain_lr}},
      {"pretrain_warmup", {F::kInt, &c.pretrain_warmup}},
      {"pretrain_momentum", {F::kDouble, &c.pretrain_momentum}},
      {"pretrain_weight_decay", {F::kDouble, &c.pretrain_weight_decay}},
      {"rain_iters", {F::kInt, &c.rain_iters}},
      {"rain_batch", {F::kInt, &c.rain_batch}},
      {"rain_lr", {F::kDouble, &c.rain_lr}},
      {"rain_warmup", {F::kInt, &c.rain_warmup}},
      {"rain_momentum", {F::kDouble, &c.rain_momentum}},
      {"rain_weight_decay", {F::kDouble, &c.rain_weight_decay}},
      {"rain_lambda_s", {F::kDouble, &c.rain_lambda_s}},
      {"rain_lambda_k", {F::kDouble, &c.rain_lambda_k}},
      {"rain_lambda_r", {F::kDouble, &c.rain_lambda_r}},
      {"rain_bypass_vae", {F::kBool, &c.rain_bypass_vae}},
      {"mine_iters", {F::kInt, &c.mine_iters}},
      {"mine_batch", {F::kInt, &c.mine_batch}},
      {"mine_lr", {F::kDouble, &c.mine_lr}},
      {"mine_warmup", {F::kInt, &c.mine_warmup}},
      {"mine_momentum", {F::kDouble, &c.mine_momentum}},
      {"mine_weight_decay", {F::kDouble, &c.mine_weight_decay}},
      {"beta", {F::kDouble, &c.beta}},
      {"depth", {F::kInt, &c.depth}},
      {"lambda_consist", {F::kDouble, &c.lambda_consist}},
      {"divergence_cap", {F::kDouble, &c.divergence_cap}},
      {"consistency_whole_batch", {F::kBool, &c.consistency_whole_batch}},
      {"strategy", {F::kString, &c.strategy}},
      {"lr_power", {F::kDouble, &c.lr_power}},
      {"num_seeds", {F::kInt, &c.num_seeds}},
      {"generator_ckpt", {F::kString, &c.generator_ckpt}},
      {"task_ckpt", {F::kString, &c.task_ckpt}},
      {"dataset_path", {F::kString, &c.dataset_path}},
  };
}

int64_t parse_i64(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": cannot parse integer from \"" + s + "\"");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    const uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": cannot parse unsigned integer from \"" + s + "\"");
  }
}

double parse_f64(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": cannot parse number from \"" + s + "\"");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key \"" + key + "\": cannot parse bool from \"" + s + "\" (use true/false)");
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  for (auto& [name, f] : field_table(*this)) {
    if (name != key) continue;
    switch (f.kind) {
      case FieldRef::kInt: *static_cast<int64_t*>(f.ptr) = parse_i64(key, value); return;
      case FieldRef::kU64: *static_cast<uint64_t*>(f.ptr) = parse_u64(key, value); return;
      case FieldRef::kDouble: *static_cast<double*>(f.ptr) = parse_f64(key, value); return;
      case FieldRef::kBool: *static_cast<bool*>(f.ptr) = parse_bool(key, value); return;
      case FieldRef::kString: *static_cast<std::string*>(f.ptr) = value; return;
    }
  }
  throw ConfigError("unknown config key \"" + key + "\"");
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": config root must be a flat JSON object");
  auto table = field_table(*this);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    auto match = std::find_if(table.begin(), table.end(), [&](const auto& p) { return p.first == key; });
    if (match == table.end()) throw ConfigError(path + ": unknown config key \"" + key + "\"");
    const auto& v = it.value();
    FieldRef f = match->second;
    try {
      switch (f.kind) {
        case FieldRef::kInt: *static_cast<int64_t*>(f.ptr) = v.get<int64_t>(); break;
        case FieldRef::kU64: *static_cast<uint64_t*>(f.ptr) = v.get<uint64_t>(); break;
        case FieldRef::kDouble: *static_cast<double*>(f.ptr) = v.get<double>(); break;
        case FieldRef::kBool: *static_cast<bool*>(f.ptr) = v.get<bool>(); break;
        case FieldRef::kString: *static_cast<std::string*>(f.ptr) = v.get<std::string>(); break;
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path + ": bad value type for key \"" + key + "\"");
    }
  }
}

std::string RunConfig::serialize_json() const {
  auto table = field_table(const_cast<RunConfig&>(*this));
  nlohmann::ordered_json j;
  for (const auto& [name, f] : table) {
    switch (f.kind) {
      case FieldRef::kInt: j[name] = *static_cast<const int64_t*>(f.ptr); break;
      case FieldRef::kU64: j[name] = *static_cast<const uint64_t*>(f.ptr); break;
      case FieldRef::kDouble: j[name] = *static_cast<const double*>(f.ptr); break;
      case FieldRef::kBool: j[name] = *static_cast<const bool*>(f.ptr); break;
      case FieldRef::kString: j[name] = *static_cast<const std::string*>(f.ptr); break;
    }
  }
  return j.dump(2) + "\n";
}

void RunConfig::validate() const {
  auto positive = [](const char* k, int64_t v) {
    if (v < 1) throw ConfigError(std::string("config key \"") + k + "\" must be >= 1");
  };
  positive("side", side);
  positive("channels", channels);
  positive("latent", latent);
  positive("classes", classes);
  positive("penultimate", penultimate);
  positive("vae_hidden", vae_hidden);
  positive("n_train", n_train);
  positive("n_val", n_val);
  positive("style_count", style_count);
  positive("pretrain_iters", pretrain_iters);
  positive("pretrain_batch", pretrain_batch);
  positive("rain_iters", rain_iters);
  positive("rain_batch", rain_batch);
  positive("mine_iters", mine_iters);
  positive("mine_batch", mine_batch);
  positive("depth", depth);
  positive("num_seeds", num_seeds);
  if (beta < 0) throw ConfigError("config key \"beta\" must be >= 0");
  if (lambda_consist < 0) throw ConfigError("config key \"lambda_consist\" must be >= 0");
  if (!(divergence_cap > 0)) throw ConfigError("config key \"divergence_cap\" must be > 0");
  if (pretrain_lr <= 0 || rain_lr <= 0 || mine_lr <= 0) throw ConfigError("learning rates must be > 0");
  if (lr_power <= 0) throw ConfigError("config key \"lr_power\" must be > 0");
  if (pretrain_warmup < 0 || rain_warmup < 0 || mine_warmup < 0) throw ConfigError("warmup must be >= 0");
  if (out_dir.empty()) throw ConfigError("config key \"out_dir\" must not be empty");
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

std::string format_fixed9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

MetricsWriter::MetricsWriter(const std::string& path, const std::vector<std::string>& columns, bool append)
    : path_(path), ncols_(columns.size()) {
  if (columns.empty()) throw ContractError("MetricsWriter: no columns");
  std::string header;
  for (size_t i = 0; i < columns.size(); ++i) {
    if (i) header += ',';
    header += columns[i];
  }
  bool need_header = true;
  if (append) {
    std::ifstream probe(path);
    std::string first;
    if (probe && std::getline(probe, first) && !first.empty()) {
      if (first != header)
        throw ContractError("MetricsWriter: existing header in " + path + " does not match");
      need_header = false;
    }
  }
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw FormatError(path + ": cannot open for writing");
  if (need_header) out_ << header << '\n';
}

void MetricsWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != ncols_)
    throw ContractError("MetricsWriter: expected " + std::to_string(ncols_) + " cells, got " +
                        std::to_string(cells.size()));
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  out_.flush();
  if (!out_) throw FormatError(path_ + ": write failed");
}

// ---------------------------------------------------------------------------
// Image previews
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor32& image) {
  if (image.rank() != 3 || image.shape[0] != 3)
    throw ShapeError("write_ppm: expected (3,H,W), got " + shape_str(image.shape));
  const int64_t h = image.shape[1], w = image.shape[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(3 * w));
  const int64_t hw = h * w;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image.data[static_cast<size_t>(c * hw + y * w + x)], 0.0f, 1.0f);
        row[static_cast<size_t>(3 * x + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw FormatError(path + ": write failed");
}

Tensor32 tile_images(const Tensor32& images, int64_t cols) {
  if (images.rank() != 4 || images.shape[1] != 3)
    throw ShapeError("tile_images: expected (N,3,H,W), got " + shape_str(images.shape));
  if (cols < 1) throw ContractError("tile_images: cols must be >= 1");
  const int64_t n = images.shape[0], h = images.shape[2], w = images.shape[3];
  const int64_t rows = (n + cols - 1) / cols;
  Tensor32 grid = Tensor32::zeros({3, rows * h, cols * w});
  const int64_t hw = h * w;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, col = i % cols;
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < h; ++y)
        std::copy_n(images.ptr() + i * 3 * hw + c * hw + y * w, w,
                    grid.ptr() + c * (rows * h) * (cols * w) + (r * h + y) * (cols * w) + col * w);
  }
  return grid;
}

}  // namespace stylemine::io
