#pragma once

// Persistence: checkpoints, run configuration, metric logs, image previews.
//
// Checkpoint container (ASMC): "ASMC" magic, little-endian u32 version and
// entry count, then per entry a length-prefixed name, dtype byte (0 = f32,
// 1 = f64), rank byte, u32 dims and the raw little-endian payload. Parameter
// sets are stored value-entry plus a companion "<name>#m" momentum entry, so
// training resumes bit-exactly.
//
// Run configuration is a flat key -> value table; every key maps 1:1 to a CLI
// flag. Files use a flat JSON object. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "stylemine/paramset.hpp"
#include "stylemine/tensor.hpp"

namespace stylemine::io {

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointEntry {
  std::string name;
  uint8_t dtype = 0;  // 0 = f32, 1 = f64
  Tensor32 f32;       // valid when dtype == 0
  Tensor64 f64;       // valid when dtype == 1
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  // The f32 payload of `name`, or nullptr when absent or not f32.
  const Tensor32* find_f32(const std::string& name) const {
    const CheckpointEntry* e = find(name);
    return (e && e->dtype == 0) ? &e->f32 : nullptr;
  }
  void add(std::string name, Tensor32 t) {
    CheckpointEntry e;
    e.name = std::move(name);
    e.dtype = 0;
    e.f32 = std::move(t);
    entries.push_back(std::move(e));
  }
  void add(std::string name, Tensor64 t) {
    CheckpointEntry e;
    e.name = std::move(name);
    e.dtype = 1;
    e.f64 = std::move(t);
    entries.push_back(std::move(e));
  }
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Parameter values and momentum buffers under "<prefix>/<param>".
void pack_params(Checkpoint& ck, const std::string& prefix, const ParamSet<float>& ps);
void unpack_params(const Checkpoint& ck, const std::string& prefix, ParamSet<float>& ps);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  // run identity / output
  uint64_t seed = 1;
  std::string out_dir = "out";

  // network dims
  int64_t side = 16;
  int64_t channels = 16;
  int64_t latent = 8;
  int64_t classes = 10;
  int64_t penultimate = 64;
  int64_t vae_hidden = 64;

  // synthetic data
  int64_t n_train = 2000;
  int64_t n_val = 500;
  int64_t style_count = 512;
  uint64_t data_seed = 5;

  // domain shift
  double shift_hue = 140.0;
  double shift_gain_r = 0.65, shift_gain_g = 1.25, shift_gain_b = 0.85;
  double shift_bias_r = 0.05, shift_bias_g = -0.02, shift_bias_b = 0.08;
  double shift_texture = 0.35;
  double shift_noise = 0.04;
  uint64_t shift_seed = 7;

  // classifier pretraining
  int64_t pretrain_iters = 3000;
  int64_t pretrain_batch = 32;
  double pretrain_lr = 0.01;
  int64_t pretrain_warmup = 100;
  double pretrain_momentum = 0.9;
  double pretrain_weight_decay = 5e-4;

  // stylizer training
  int64_t rain_iters = 2000;
  int64_t rain_batch = 8;
  double rain_lr = 0.02;
  int64_t rain_warmup = 100;
  double rain_momentum = 0.9;
  double rain_weight_decay = 5e-4;
  double rain_lambda_s = 1.0;
  double rain_lambda_k = 1.0;
  double rain_lambda_r = 5.0;
  bool rain_bypass_vae = false;

  // mining
  int64_t mine_iters = 3000;
  int64_t mine_batch = 4;
  double mine_lr = 2.5e-4;
  int64_t mine_warmup = 0;
  double mine_momentum = 0.9;
  double mine_weight_decay = 5e-4;
  double beta = 0.05;
  int64_t depth = 5;
  double lambda_consist = 2e-4;
  double divergence_cap = 50.0;
  bool consistency_whole_batch = false;
  std::string strategy = "asm";

  // shared schedule shape + experiment repetition
  double lr_power = 0.9;
  int64_t num_seeds = 5;

  // artifact paths (empty = derive from out_dir)
  std::string generator_ckpt;
  std::string task_ckpt;
  std::string dataset_path;

  // Set one field from its flat key; throws ConfigError on unknown key or
  // unparseable value.
  void apply(const std::string& key, const std::string& value);

  // Merge a flat JSON object file (later apply() calls still override).
  void load_file(const std::string& path);

  std::string serialize_json() const;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

// Numbers are written in fixed notation with nine digits after the decimal
// point so logs from separate runs can be compared byte-for-byte.
std::string format_fixed9(double v);

class MetricsWriter {
 public:
  // Writes the header immediately unless appending to a non-empty file (in
  // which case the existing header must match).
  MetricsWriter(const std::string& path, const std::vector<std::string>& columns, bool append = false);

  void row(const std::vector<std::string>& cells);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  size_t ncols_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Image previews
// ---------------------------------------------------------------------------

// Binary P6, input (3,H,W) in [0,1].
void write_ppm(const std::string& path, const Tensor32& image);

// Pack (N,3,H,W) into a (3, rows*H, cols*W) grid, row-major, black padding.
Tensor32 tile_images(const Tensor32& images, int64_t cols);

}  // namespace stylemine::io
