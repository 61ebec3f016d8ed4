#pragma once

// Datasets and synthetic data sources.
//
// Images are (N, 3, H, W) float tensors in [0,1]. Two sources are built in:
// a procedural digit renderer (glyphs with randomized pose, stroke weight and
// contrast) and a style corpus generator (stripes / radial gradients / value
// noise). A deterministic "domain shift" transform manufactures a target
// domain from source images: hue rotation, per-channel gain/bias, a smooth
// texture overlay and pixel noise. Per-image randomness is keyed by the image
// content hash plus the shift seed, so shifting commutes with subsetting.
//
// On-disk formats: IDX (big-endian, the classic digit-dataset layout) and
// ASMD (little-endian float images + int labels, this project's native
// container).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stylemine/rng.hpp"
#include "stylemine/tensor.hpp"

namespace stylemine::data {

struct LabeledDataset {
  Tensor32 images;          // (N, 3, H, W) in [0,1]
  std::vector<int> labels;  // length N

  int64_t size() const { return images.rank() == 4 ? images.shape[0] : 0; }
  void validate() const;
};

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

// Balanced 10-class digit images (label = index mod 10), side x side, 3
// identical channels. Pose, scale, stroke weight and contrast vary per image.
LabeledDataset gen_digits(int64_t count, int64_t side, uint64_t seed);

// Unlabeled style images: stripes, radial gradients and smooth value noise in
// random colors. Every image has per-channel pixel variance above 1e-4.
Tensor32 gen_style_corpus(int64_t count, int64_t side, uint64_t seed);

// ---------------------------------------------------------------------------
// Domain shift
// ---------------------------------------------------------------------------

struct ShiftSpec {
  double hue_deg = 140.0;                   // rotation around the gray axis
  std::array<double, 3> gain{0.65, 1.25, 0.85};
  std::array<double, 3> bias{0.05, -0.02, 0.08};
  double texture = 0.35;                    // strength of the smooth overlay
  double noise = 0.04;                      // pixel noise std
  uint64_t seed = 7;

  void validate() const;
};

// Deterministic per-image transform; the same image yields the same output
// regardless of its position in the batch.
Tensor32 apply_shift(const Tensor32& images, const ShiftSpec& spec);

// ---------------------------------------------------------------------------
// Dataset utilities
// ---------------------------------------------------------------------------

LabeledDataset subset(const LabeledDataset& ds, const std::vector<int64_t>& indices);

// Content fingerprint (images + labels + shape) for run reports.
uint64_t dataset_hash(const LabeledDataset& ds);

// Shuffled minibatch index source; reshuffles each epoch, drops the final
// partial batch.
class Batcher {
 public:
  Batcher(int64_t n, int64_t batch, Rng rng);

  std::vector<int64_t> next();
  int64_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  int64_t n_, batch_, cursor_ = 0, epoch_ = 0;
  Rng rng_;
  std::vector<int64_t> order_;
};

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

// IDX: big-endian, u8 pixels (magic 0x803) and u8 labels (magic 0x801).
// Grayscale pixels are normalized to [0,1] and replicated to 3 channels.
// side > 0 resizes every image to side x side by nearest neighbor.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path, int64_t side = 0);
void save_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path);

// ASMD: "ASMD" magic plus little-endian u32 version, count and side (16-byte
// header), then f32 images and i32 labels.
void save_asmd(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_asmd(const std::string& path);

}  // namespace stylemine::data
