#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "stylemine/tensor.hpp"

namespace stylemine {

// Smallest channel standard deviation the library ever divides by or encodes.
// Population stds below this are clamped up to it.
inline constexpr double kEpsStd = 1e-5;

// Per-channel first and second moments of one feature map.
template <class T>
struct ChannelStatsT {
  std::vector<T> mu;
  std::vector<T> sigma;  // population std, floored at kEpsStd

  size_t channels() const { return mu.size(); }
};

using ChannelStats32 = ChannelStatsT<float>;
using ChannelStats64 = ChannelStatsT<double>;

// Channel-wise mean / population-std over the spatial extent of each item in
// a (N, C, H, W) tensor. H*W must be >= 1 (enforced by tensor dims > 0, but a
// wrong rank is rejected here).
template <class T>
std::vector<ChannelStatsT<T>> channel_stats(const TensorT<T>& f) {
  if (f.rank() != 4) throw ShapeError("channel_stats: expected rank-4 (N,C,H,W), got " + shape_str(f.shape));
  const int64_t n = f.shape[0], c = f.shape[1], hw = f.shape[2] * f.shape[3];
  std::vector<ChannelStatsT<T>> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto& st = out[static_cast<size_t>(i)];
    st.mu.resize(static_cast<size_t>(c));
    st.sigma.resize(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) {
      const T* p = f.ptr() + (i * c + j) * hw;
      double sum = 0;
      for (int64_t k = 0; k < hw; ++k) sum += p[k];
      const double mean = sum / static_cast<double>(hw);
      double var = 0;
      for (int64_t k = 0; k < hw; ++k) {
        const double d = p[k] - mean;
        var += d * d;
      }
      var /= static_cast<double>(hw);
      double sd = std::sqrt(var);
      if (sd < kEpsStd) sd = kEpsStd;
      st.mu[static_cast<size_t>(j)] = static_cast<T>(mean);
      st.sigma[static_cast<size_t>(j)] = static_cast<T>(sd);
    }
  }
  return out;
}

// Adaptive instance normalization: renormalize each channel of f to the
// target mean/std. Input (N, C, H, W) with one target per item.
template <class T>
TensorT<T> adain(const TensorT<T>& f, std::span<const ChannelStatsT<T>> targets) {
  if (f.rank() != 4) throw ShapeError("adain: expected rank-4 (N,C,H,W), got " + shape_str(f.shape));
  const int64_t n = f.shape[0], c = f.shape[1], hw = f.shape[2] * f.shape[3];
  if (static_cast<int64_t>(targets.size()) != n)
    throw ShapeError("adain: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " items");
  for (const auto& t : targets)
    if (static_cast<int64_t>(t.channels()) != c || t.sigma.size() != t.mu.size())
      throw ShapeError("adain: target stats have wrong channel count");

  auto src = channel_stats(f);
  TensorT<T> out(f.shape);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      const T* p = f.ptr() + (i * c + j) * hw;
      T* q = out.ptr() + (i * c + j) * hw;
      const double mu_c = src[static_cast<size_t>(i)].mu[static_cast<size_t>(j)];
      const double sd_c = src[static_cast<size_t>(i)].sigma[static_cast<size_t>(j)];
      const double mu_t = targets[static_cast<size_t>(i)].mu[static_cast<size_t>(j)];
      const double sd_t = targets[static_cast<size_t>(i)].sigma[static_cast<size_t>(j)];
      const double scale = sd_t / sd_c;
      for (int64_t k = 0; k < hw; ++k) q[k] = static_cast<T>((p[k] - mu_c) * scale + mu_t);
    }
  }
  return out;
}

// Single-image convenience: f is (C, H, W).
template <class T>
TensorT<T> adain(const TensorT<T>& f, const ChannelStatsT<T>& target) {
  if (f.rank() != 3) throw ShapeError("adain: expected rank-3 (C,H,W), got " + shape_str(f.shape));
  TensorT<T> batched({1, f.shape[0], f.shape[1], f.shape[2]}, f.data);
  std::vector<ChannelStatsT<T>> t{target};
  TensorT<T> r = adain(batched, std::span<const ChannelStatsT<T>>(t));
  return TensorT<T>(f.shape, std::move(r.data));
}

}  // namespace stylemine
