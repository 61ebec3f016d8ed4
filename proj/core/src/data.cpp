#include "stylemine/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace stylemine::data {

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw ContractError("dataset: images must be (N,3,H,W), got " + shape_str(images.shape));
  if (images.shape[1] != 3) throw ContractError("dataset: expected 3 channels, got " + std::to_string(images.shape[1]));
  if (images.shape[0] != static_cast<int64_t>(labels.size()))
    throw ContractError("dataset: image/label count mismatch (" + std::to_string(images.shape[0]) + " vs " +
                        std::to_string(labels.size()) + ")");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0) throw ContractError("dataset: negative label at index " + std::to_string(i));
}

// ---------------------------------------------------------------------------
// Digit renderer
// ---------------------------------------------------------------------------

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used (MSB of the 5 = left column).
constexpr std::array<std::array<uint8_t, 7>, 10> kGlyphs = {{
    {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
    {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
    {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
    {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
    {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
    {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
    {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
    {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
    {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
    {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
}};

double glyph_cell(int digit, double gx, double gy) {
  // Bilinear sample of the 5x7 bitmap; cell centers at (col+0.5, row+0.5),
  // zero outside.
  const auto& rows = kGlyphs[static_cast<size_t>(digit)];
  auto cell = [&](int col, int row) -> double {
    if (col < 0 || col >= 5 || row < 0 || row >= 7) return 0.0;
    return (rows[static_cast<size_t>(row)] >> (4 - col)) & 1 ? 1.0 : 0.0;
  };
  const double fx = gx - 0.5, fy = gy - 0.5;
  const int c0 = static_cast<int>(std::floor(fx)), r0 = static_cast<int>(std::floor(fy));
  const double ax = fx - c0, ay = fy - r0;
  return cell(c0, r0) * (1 - ax) * (1 - ay) + cell(c0 + 1, r0) * ax * (1 - ay) +
         cell(c0, r0 + 1) * (1 - ax) * ay + cell(c0 + 1, r0 + 1) * ax * ay;
}

}  // namespace

LabeledDataset gen_digits(int64_t count, int64_t side, uint64_t seed) {
  if (count < 1) throw ContractError("gen_digits: count must be >= 1");
  if (side < 8) throw ContractError("gen_digits: side must be >= 8");
  LabeledDataset ds;
  ds.images = Tensor32({count, 3, side, side});
  ds.labels.resize(static_cast<size_t>(count));
  Rng root(seed);
  const double half = static_cast<double>(side) / 2.0;
  for (int64_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(i % 10);
    ds.labels[static_cast<size_t>(i)] = digit;
    Rng r = root.stream("digit", static_cast<uint64_t>(i));
    const double u = 0.55 + 0.3 * r.uniform();                      // glyph height fraction
    const double s = u * static_cast<double>(side) / 7.0;           // pixels per glyph cell
    const double theta = (r.uniform() * 2 - 1) * 15.0 * std::numbers::pi / 180.0;
    const double jx = (r.uniform() * 2 - 1) * 0.10 * side;
    const double jy = (r.uniform() * 2 - 1) * 0.10 * side;
    const double gamma = 0.6 + r.uniform();                         // stroke weight
    const double fg = 0.75 + 0.25 * r.uniform();
    const double bg = 0.15 * r.uniform();
    const double ct = std::cos(theta), st = std::sin(theta);
    float* base = ds.images.ptr() + i * 3 * side * side;
    for (int64_t py = 0; py < side; ++py)
      for (int64_t px = 0; px < side; ++px) {
        const double dx = (px + 0.5) - half - jx;
        const double dy = (py + 0.5) - half - jy;
        const double rx = ct * dx + st * dy;
        const double ry = -st * dx + ct * dy;
        const double gx = rx / s + 2.5;
        const double gy = ry / s + 3.5;
        double v = glyph_cell(digit, gx, gy);
        v = std::pow(std::clamp(v, 0.0, 1.0), gamma);
        const auto pix = static_cast<float>(bg + (fg - bg) * v);
        base[py * side + px] = pix;
        base[side * side + py * side + px] = pix;
        base[2 * side * side + py * side + px] = pix;
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Style corpus
// ---------------------------------------------------------------------------

namespace {

// Smooth value noise: bilinear interpolation of a coarse random grid.
void add_value_noise(float* img, int64_t side, int64_t grid, double amp, Rng& r) {
  std::vector<double> g(static_cast<size_t>((grid + 1) * (grid + 1)));
  for (auto& v : g) v = r.uniform();
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      const double fx = static_cast<double>(x) / side * grid;
      const double fy = static_cast<double>(y) / side * grid;
      const int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
      const double ax = fx - x0, ay = fy - y0;
      const double v = g[static_cast<size_t>(y0 * (grid + 1) + x0)] * (1 - ax) * (1 - ay) +
                       g[static_cast<size_t>(y0 * (grid + 1) + x0 + 1)] * ax * (1 - ay) +
                       g[static_cast<size_t>((y0 + 1) * (grid + 1) + x0)] * (1 - ax) * ay +
                       g[static_cast<size_t>((y0 + 1) * (grid + 1) + x0 + 1)] * ax * ay;
      img[y * side + x] += static_cast<float>(amp * (v - 0.5));
    }
}

double channel_variance(const float* ch, int64_t n) {
  double s = 0, s2 = 0;
  for (int64_t i = 0; i < n; ++i) {
    s += ch[i];
    s2 += static_cast<double>(ch[i]) * ch[i];
  }
  const double m = s / n;
  return s2 / n - m * m;
}

}  // namespace

Tensor32 gen_style_corpus(int64_t count, int64_t side, uint64_t seed) {
  if (count < 1) throw ContractError("gen_style_corpus: count must be >= 1");
  if (side < 8) throw ContractError("gen_style_corpus: side must be >= 8");
  Tensor32 out({count, 3, side, side});
  Rng root(seed);
  const int64_t hw = side * side;
  for (int64_t i = 0; i < count; ++i) {
    float* base = out.ptr() + i * 3 * hw;
    for (uint64_t attempt = 0;; ++attempt) {
      if (attempt > 16) throw ContractError("gen_style_corpus: failed to reach minimum channel variance");
      Rng r = root.stream("style", static_cast<uint64_t>(i) * 131 + attempt);
      // Two colors with guaranteed per-channel separation.
      std::array<double, 3> ca, cb;
      for (int c = 0; c < 3; ++c) {
        const double lo = r.uniform() * 0.45;
        ca[static_cast<size_t>(c)] = lo;
        cb[static_cast<size_t>(c)] = lo + 0.4 + 0.15 * r.uniform();
        if (r.uniform() < 0.5) std::swap(ca[static_cast<size_t>(c)], cb[static_cast<size_t>(c)]);
      }
      const int kind = static_cast<int>(i % 3);
      if (kind == 0) {
        const double ang = r.uniform() * std::numbers::pi;
        const double freq = 2.0 + 6.0 * r.uniform();
        const double phase = r.uniform() * 2 * std::numbers::pi;
        const double kx = std::cos(ang) * freq * 2 * std::numbers::pi / side;
        const double ky = std::sin(ang) * freq * 2 * std::numbers::pi / side;
        for (int64_t y = 0; y < side; ++y)
          for (int64_t x = 0; x < side; ++x) {
            const double w = 0.5 + 0.5 * std::sin(kx * x + ky * y + phase);
            for (int c = 0; c < 3; ++c)
              base[c * hw + y * side + x] =
                  static_cast<float>(ca[static_cast<size_t>(c)] * (1 - w) + cb[static_cast<size_t>(c)] * w);
          }
      } else if (kind == 1) {
        const double cx = side * (0.2 + 0.6 * r.uniform());
        const double cy = side * (0.2 + 0.6 * r.uniform());
        const double rad = side * (0.4 + 0.5 * r.uniform());
        for (int64_t y = 0; y < side; ++y)
          for (int64_t x = 0; x < side; ++x) {
            const double d = std::hypot(x - cx, y - cy) / rad;
            const double w = std::clamp(d, 0.0, 1.0);
            for (int c = 0; c < 3; ++c)
              base[c * hw + y * side + x] =
                  static_cast<float>(ca[static_cast<size_t>(c)] * (1 - w) + cb[static_cast<size_t>(c)] * w);
          }
      } else {
        for (int c = 0; c < 3; ++c) {
          const auto mid = static_cast<float>((ca[static_cast<size_t>(c)] + cb[static_cast<size_t>(c)]) / 2);
          std::fill_n(base + c * hw, hw, mid);
          add_value_noise(base + c * hw, side, 4, 0.9, r);
          add_value_noise(base + c * hw, side, 8, 0.45, r);
        }
      }
      for (int64_t p = 0; p < 3 * hw; ++p) base[p] = std::clamp(base[p], 0.0f, 1.0f);
      bool ok = true;
      for (int c = 0; c < 3 && ok; ++c) ok = channel_variance(base + c * hw, hw) > 1e-4;
      if (ok) break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Domain shift
// ---------------------------------------------------------------------------

void ShiftSpec::validate() const {
  if (texture < 0 || texture > 1) throw ContractError("ShiftSpec: texture must be in [0,1]");
  if (noise < 0) throw ContractError("ShiftSpec: noise must be >= 0");
  for (double g : gain)
    if (g <= 0) throw ContractError("ShiftSpec: gains must be > 0");
}

Tensor32 apply_shift(const Tensor32& images, const ShiftSpec& spec) {
  spec.validate();
  if (images.rank() != 4 || images.shape[1] != 3)
    throw ShapeError("apply_shift: expected (N,3,H,W), got " + shape_str(images.shape));
  const int64_t n = images.shape[0], side_h = images.shape[2], side_w = images.shape[3];
  const int64_t hw = side_h * side_w;
  Tensor32 out(images.shape);

  // Rotation around the gray axis (1,1,1)/sqrt(3) by hue_deg (Rodrigues).
  const double th = spec.hue_deg * std::numbers::pi / 180.0;
  const double cth = std::cos(th), sth = std::sin(th);
  const double k = 1.0 / 3.0;
  double rot[3][3];
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) rot[a][b] = k + (a == b ? cth * (1 - k) : -cth * k);
  const double w = sth / std::sqrt(3.0);
  rot[0][1] -= w; rot[0][2] += w;
  rot[1][0] += w; rot[1][2] -= w;
  rot[2][0] -= w; rot[2][1] += w;

  for (int64_t i = 0; i < n; ++i) {
    const float* src = images.ptr() + i * 3 * hw;
    float* dst = out.ptr() + i * 3 * hw;
    // Keyed by content, not position: subsetting and shifting commute.
    const uint64_t key = mix64(spec.seed ^ fnv1a64(src, static_cast<size_t>(3 * hw) * sizeof(float)));
    Rng r(key);
    std::vector<float> pat(static_cast<size_t>(hw), 0.5f);
    if (spec.texture > 0) {
      add_value_noise(pat.data(), side_h, 4, 1.0, r);
      add_value_noise(pat.data(), side_h, 8, 0.5, r);
    }
    for (int64_t p = 0; p < hw; ++p) {
      const double in[3] = {src[p], src[hw + p], src[2 * hw + p]};
      for (int c = 0; c < 3; ++c) {
        double v = rot[c][0] * in[0] + rot[c][1] * in[1] + rot[c][2] * in[2];
        v = v * spec.gain[static_cast<size_t>(c)] + spec.bias[static_cast<size_t>(c)];
        if (spec.texture > 0) v *= 1.0 - spec.texture * std::clamp<double>(pat[static_cast<size_t>(p)], 0.0, 1.0);
        if (spec.noise > 0) v += spec.noise * r.normal();
        dst[c * hw + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

LabeledDataset subset(const LabeledDataset& ds, const std::vector<int64_t>& indices) {
  ds.validate();
  if (indices.empty()) throw ContractError("subset: empty index list");
  const int64_t per = ds.images.numel() / ds.images.shape[0];
  LabeledDataset out;
  out.images = Tensor32({static_cast<int64_t>(indices.size()), ds.images.shape[1], ds.images.shape[2],
                         ds.images.shape[3]});
  out.labels.resize(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t src = indices[i];
    if (src < 0 || src >= ds.size()) throw ContractError("subset: index out of range: " + std::to_string(src));
    std::copy_n(ds.images.ptr() + src * per, per, out.images.ptr() + static_cast<int64_t>(i) * per);
    out.labels[i] = ds.labels[static_cast<size_t>(src)];
  }
  return out;
}

uint64_t dataset_hash(const LabeledDataset& ds) {
  ds.validate();
  uint64_t h = fnv1a64(ds.images.data.data(), ds.images.data.size() * sizeof(float));
  for (int64_t d : ds.images.shape) h = fnv1a64(&d, sizeof(d), h);
  h = fnv1a64(ds.labels.data(), ds.labels.size() * sizeof(int), h);
  return h;
}

Batcher::Batcher(int64_t n, int64_t batch, Rng rng) : n_(n), batch_(batch), rng_(rng) {
  if (n < 1) throw ContractError("Batcher: n must be >= 1");
  if (batch < 1 || batch > n) throw ContractError("Batcher: batch must be in [1, n]");
  order_.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order_[static_cast<size_t>(i)] = i;
  reshuffle();
}

void Batcher::reshuffle() { rng_.shuffle(order_); }

std::vector<int64_t> Batcher::next() {
  if (cursor_ + batch_ > n_) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  std::vector<int64_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
  cursor_ += batch_;
  return out;
}

// ---------------------------------------------------------------------------
// IDX I/O
// ---------------------------------------------------------------------------

namespace {

uint32_t read_be32(std::istream& in, const std::string& path, int64_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError(path + ": truncated at byte " + std::to_string(offset));
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path, int64_t side) {
  if (side < 0) throw ContractError("load_idx: side must be >= 0");
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw FormatError(images_path + ": cannot open");
  const uint32_t magic_i = read_be32(fi, images_path, 0);
  if (magic_i != 0x803)
    throw FormatError(images_path + ": bad magic at byte 0 (expected 0x00000803)");
  const auto n = static_cast<int64_t>(read_be32(fi, images_path, 4));
  const auto rows = static_cast<int64_t>(read_be32(fi, images_path, 8));
  const auto cols = static_cast<int64_t>(read_be32(fi, images_path, 12));
  if (n < 1 || rows < 1 || cols < 1) throw FormatError(images_path + ": bad dimensions in header");
  std::vector<unsigned char> pix(static_cast<size_t>(n * rows * cols));
  fi.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
  if (!fi || fi.gcount() != static_cast<std::streamsize>(pix.size()))
    throw FormatError(images_path + ": truncated pixel data at byte " + std::to_string(16 + fi.gcount()));

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw FormatError(labels_path + ": cannot open");
  const uint32_t magic_l = read_be32(fl, labels_path, 0);
  if (magic_l != 0x801)
    throw FormatError(labels_path + ": bad magic at byte 0 (expected 0x00000801)");
  const auto nl = static_cast<int64_t>(read_be32(fl, labels_path, 4));
  if (nl != n)
    throw FormatError(labels_path + ": label count " + std::to_string(nl) + " != image count " + std::to_string(n));
  std::vector<unsigned char> lab(static_cast<size_t>(n));
  fl.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  if (!fl || fl.gcount() != static_cast<std::streamsize>(lab.size()))
    throw FormatError(labels_path + ": truncated label data at byte " + std::to_string(8 + fl.gcount()));

  const int64_t out_r = side > 0 ? side : rows;
  const int64_t out_c = side > 0 ? side : cols;
  LabeledDataset ds;
  ds.images = Tensor32({n, 3, out_r, out_c});
  ds.labels.resize(static_cast<size_t>(n));
  const int64_t hw_in = rows * cols;
  const int64_t hw = out_r * out_c;
  for (int64_t i = 0; i < n; ++i) {
    float* dst = ds.images.ptr() + i * 3 * hw;
    for (int64_t y = 0; y < out_r; ++y) {
      const int64_t sy = std::min(y * rows / out_r, rows - 1);
      for (int64_t x = 0; x < out_c; ++x) {
        const int64_t sx = std::min(x * cols / out_c, cols - 1);
        const float v = static_cast<float>(pix[static_cast<size_t>(i * hw_in + sy * cols + sx)]) / 255.0f;
        const int64_t p = y * out_c + x;
        dst[p] = v;
        dst[hw + p] = v;
        dst[2 * hw + p] = v;
      }
    }
    ds.labels[static_cast<size_t>(i)] = static_cast<int>(lab[static_cast<size_t>(i)]);
  }
  return ds;
}

void save_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  const int64_t n = ds.size(), rows = ds.images.shape[2], cols = ds.images.shape[3];
  const int64_t hw = rows * cols;
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw FormatError(images_path + ": cannot open for writing");
  write_be32(fi, 0x803);
  write_be32(fi, static_cast<uint32_t>(n));
  write_be32(fi, static_cast<uint32_t>(rows));
  write_be32(fi, static_cast<uint32_t>(cols));
  std::vector<unsigned char> pix(static_cast<size_t>(n * hw));
  for (int64_t i = 0; i < n; ++i) {
    const float* src = ds.images.ptr() + i * 3 * hw;
    for (int64_t p = 0; p < hw; ++p) {
      const float g = (src[p] + src[hw + p] + src[2 * hw + p]) / 3.0f;
      pix[static_cast<size_t>(i * hw + p)] =
          static_cast<unsigned char>(std::lround(std::clamp(g, 0.0f, 1.0f) * 255.0f));
    }
  }
  fi.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
  if (!fi) throw FormatError(images_path + ": write failed");

  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw FormatError(labels_path + ": cannot open for writing");
  write_be32(fl, 0x801);
  write_be32(fl, static_cast<uint32_t>(n));
  std::vector<unsigned char> lab(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) lab[static_cast<size_t>(i)] = static_cast<unsigned char>(ds.labels[static_cast<size_t>(i)]);
  fl.write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  if (!fl) throw FormatError(labels_path + ": write failed");
}

// ---------------------------------------------------------------------------
// ASMD I/O
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kAsmdVersion = 1;

void write_le32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_le32(std::istream& in, const std::string& path, int64_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError(path + ": truncated at byte " + std::to_string(offset));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_asmd(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  if (ds.images.shape[2] != ds.images.shape[3])
    throw ContractError("save_asmd: images must be square, got " + shape_str(ds.images.shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write("ASMD", 4);
  write_le32(out, kAsmdVersion);
  write_le32(out, static_cast<uint32_t>(ds.size()));
  write_le32(out, static_cast<uint32_t>(ds.images.shape[2]));
  out.write(reinterpret_cast<const char*>(ds.images.data.data()),
            static_cast<std::streamsize>(ds.images.data.size() * sizeof(float)));
  std::vector<int32_t> lab(ds.labels.begin(), ds.labels.end());
  out.write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size() * sizeof(int32_t)));
  if (!out) throw FormatError(path + ": write failed");
}

LabeledDataset load_asmd(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "ASMD", 4) != 0) throw FormatError(path + ": bad magic at byte 0 (expected \"ASMD\")");
  const uint32_t version = read_le32(in, path, 4);
  if (version != kAsmdVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version) + " at byte 4");
  const auto n = static_cast<int64_t>(read_le32(in, path, 8));
  const auto side = static_cast<int64_t>(read_le32(in, path, 12));
  if (n < 1 || side < 1) throw FormatError(path + ": bad dimensions in header");
  LabeledDataset ds;
  ds.images = Tensor32({n, 3, side, side});
  in.read(reinterpret_cast<char*>(ds.images.data.data()),
          static_cast<std::streamsize>(ds.images.data.size() * sizeof(float)));
  if (!in) throw FormatError(path + ": truncated image data at byte " + std::to_string(16 + in.gcount()));
  std::vector<int32_t> lab(static_cast<size_t>(n));
  const int64_t lab_off = 16 + static_cast<int64_t>(ds.images.data.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size() * sizeof(int32_t)));
  if (!in) throw FormatError(path + ": truncated label data at byte " + std::to_string(lab_off + in.gcount()));
  ds.labels.assign(lab.begin(), lab.end());
  ds.validate();
  return ds;
}

}  // namespace stylemine::data
