#pragma once

// Stylizer: AdaIN transfer driven by a variational autoencoder over style
// codes, so that styles live in a compact latent space that downstream
// components can search by gradient.
//
// A style code is the per-channel (mean, std) signature of encoder features:
// [mu(f) || sigma(f)], length 2C. The VAE encodes a code to a diagonal
// gaussian posterior (psi, xi) over a d-dim latent and decodes a latent back
// to a code. Stylization renormalizes content features to a decoded code's
// stats (std half floored at kEpsStd) and runs the decoder network.
//
// Training objective: l_c + lambda_s * l_s + lambda_k * l_kl + lambda_r * l_rec
//   l_c    feature reconstruction (MSE against the AdaIN-transformed target)
//   l_s    per-stage stat matching against the style image
//   l_kl   sum_j 0.5 (psi_j^2 + xi_j^2 - 1 - 2 ln xi_j), batch-averaged
//   l_rec  euclidean norm between input and reconstructed style codes
// The encoder stays frozen; decoder and both VAE halves train jointly.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "stylemine/models.hpp"
#include "stylemine/schedule.hpp"
#include "stylemine/stats.hpp"

namespace stylemine::rain {

using models::Generator;
using models::ParamBinder;

template <class T>
struct StylePosteriorT {
  std::vector<T> psi;
  std::vector<T> xi;  // strictly positive

  size_t dim() const { return psi.size(); }
};

template <class T>
struct StyleLatentT {
  std::vector<T> epsilon;
};

using StylePosterior = StylePosteriorT<float>;
using StyleLatent = StyleLatentT<float>;

struct RainWeights {
  double lambda_s = 1.0;
  double lambda_k = 1.0;
  double lambda_r = 5.0;

  void validate() const {
    if (lambda_s < 0 || lambda_k < 0 || lambda_r < 0)
      throw ContractError("RainWeights: loss weights must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Pure (tensor-level) pieces
// ---------------------------------------------------------------------------

// Per-item style code [mu || sigma] of encoder features (B, C, H, W) -> (B, 2C).
template <class T>
TensorT<T> style_code(const TensorT<T>& f) {
  auto stats = channel_stats(f);
  const int64_t b = f.shape[0], c = f.shape[1];
  TensorT<T> out({b, 2 * c});
  for (int64_t i = 0; i < b; ++i) {
    const auto& st = stats[static_cast<size_t>(i)];
    for (int64_t j = 0; j < c; ++j) {
      out.data[static_cast<size_t>(i * 2 * c + j)] = st.mu[static_cast<size_t>(j)];
      out.data[static_cast<size_t>(i * 2 * c + c + j)] = st.sigma[static_cast<size_t>(j)];
    }
  }
  return out;
}

template <class T>
T kl_loss(std::span<const T> psi, std::span<const T> xi) {
  if (psi.size() != xi.size()) throw ContractError("kl_loss: psi/xi length mismatch");
  if (psi.empty()) throw ContractError("kl_loss: empty posterior");
  double s = 0;
  for (size_t j = 0; j < psi.size(); ++j) {
    const double x = xi[j];
    if (!(x > 0)) throw ContractError("kl_loss: xi must be > 0");
    s += 0.5 * (static_cast<double>(psi[j]) * psi[j] + x * x - 1.0 - 2.0 * std::log(x));
  }
  return static_cast<T>(s);
}

template <class T>
T kl_loss(const StylePosteriorT<T>& p) {
  return kl_loss(std::span<const T>(p.psi), std::span<const T>(p.xi));
}

// Euclidean norm between two style codes (not squared).
template <class T>
T rec_loss(std::span<const T> code, std::span<const T> code_hat) {
  if (code.size() != code_hat.size()) throw ContractError("rec_loss: code length mismatch");
  double s = 0;
  for (size_t j = 0; j < code.size(); ++j) {
    const double d = static_cast<double>(code[j]) - code_hat[j];
    s += d * d;
  }
  return static_cast<T>(std::sqrt(s));
}

// Reparameterized draw: epsilon = psi + xi * eta.
template <class T>
StyleLatentT<T> sample_latent(const StylePosteriorT<T>& p, std::span<const T> eta) {
  if (p.psi.size() != p.xi.size() || p.psi.size() != eta.size())
    throw ContractError("sample_latent: dimension mismatch");
  for (T x : p.xi)
    if (!(x > 0)) throw ContractError("sample_latent: xi must be > 0");
  StyleLatentT<T> out;
  out.epsilon.resize(eta.size());
  for (size_t j = 0; j < eta.size(); ++j) out.epsilon[j] = p.psi[j] + p.xi[j] * eta[j];
  return out;
}

template <class T>
StyleLatentT<T> sample_latent(const StylePosteriorT<T>& p, Rng& rng) {
  std::vector<T> eta = rng.normal_vec<T>(p.psi.size());
  return sample_latent(p, std::span<const T>(eta));
}

// Mean squared error between a decoded feature map and its AdaIN target.
template <class T>
T content_loss(const TensorT<T>& f_out, const TensorT<T>& target) {
  require_same_shape(f_out, target, "content_loss");
  double s = 0;
  for (int64_t i = 0; i < f_out.numel(); ++i) {
    const double d = static_cast<double>(f_out.data[static_cast<size_t>(i)]) - target.data[static_cast<size_t>(i)];
    s += d * d;
  }
  return static_cast<T>(s / static_cast<double>(f_out.numel()));
}

// Sum over stages of ||mu_out - mu_target||_2 + ||sigma_out - sigma_target||_2
// for one item's per-stage stats.
template <class T>
T style_loss(std::span<const ChannelStatsT<T>> out_stats, std::span<const ChannelStatsT<T>> target_stats) {
  if (out_stats.size() != target_stats.size()) throw ContractError("style_loss: stage count mismatch");
  if (out_stats.empty()) throw ContractError("style_loss: no stages");
  double total = 0;
  for (size_t l = 0; l < out_stats.size(); ++l) {
    const auto& a = out_stats[l];
    const auto& b = target_stats[l];
    if (a.channels() != b.channels()) throw ContractError("style_loss: channel mismatch at stage " + std::to_string(l));
    double smu = 0, ssd = 0;
    for (size_t j = 0; j < a.channels(); ++j) {
      const double dm = static_cast<double>(a.mu[j]) - b.mu[j];
      const double ds = static_cast<double>(a.sigma[j]) - b.sigma[j];
      smu += dm * dm;
      ssd += ds * ds;
    }
    total += std::sqrt(smu) + std::sqrt(ssd);
  }
  return static_cast<T>(total);
}

// ---------------------------------------------------------------------------
// Graph pieces
// ---------------------------------------------------------------------------

template <class T>
struct StylizedGraph {
  Var<T> image;       // (B, 3, H, W) in [0,1]
  Var<T> adain_feat;  // the AdaIN-transformed feature the decoder consumed
};

// Renormalize pre-encoded content features to the stats in `code` rows and
// decode to an image. mu_c / sigma_c are the content features' own stats
// (typically constants: the encoder is frozen and runs off-tape).
template <class T>
StylizedGraph<T> apply_code_and_decode(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> f_c,
                                       Var<T> mu_c, Var<T> sigma_c, Var<T> code, bool trainable_dec) {
  const int64_t c = g.cfg.channels;
  Var<T> mu_t = slice_cols(code, 0, c);
  Var<T> sigma_t = clamp_min(slice_cols(code, c, 2 * c), kEpsStd);
  Var<T> t = normalize_affine(f_c, mu_c, sigma_c, sigma_t, mu_t);
  Var<T> image = decode(tape, binder, g, t, trainable_dec);
  return StylizedGraph<T>{image, t};
}

// ---------------------------------------------------------------------------
// Value-level stylization
// ---------------------------------------------------------------------------

// Decode a latent to a style code and restyle the content batch with it.
// One latent row per content item, or a single shared latent.
template <class T>
TensorT<T> stylize(const Generator<T>& g, const TensorT<T>& x_content, const TensorT<T>& eps) {
  if (!g.trained) throw ContractError("stylize: generator has not been trained");
  if (x_content.rank() != 4) throw ShapeError("stylize: content must be (B,3,H,W), got " + shape_str(x_content.shape));
  const int64_t b = x_content.shape[0];
  TensorT<T> eps_rows = eps;
  if (eps.rank() == 1) {
    eps_rows = TensorT<T>({1, eps.shape[0]}, eps.data);
  }
  if (eps_rows.rank() != 2 || (eps_rows.shape[0] != b && eps_rows.shape[0] != 1) ||
      eps_rows.shape[1] != g.cfg.latent)
    throw ShapeError("stylize: latent must be (d), (1,d) or (B,d)");

  auto& gm = const_cast<Generator<T>&>(g);
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  Var<T> x = tape.leaf(x_content);
  Var<T> f_c = encode(tape, binder, gm, x).out;
  Var<T> mu_c = instance_mean(f_c);
  Var<T> sigma_c = instance_std(f_c, kEpsStd);
  Var<T> code = vae_decode(tape, binder, gm, tape.leaf(std::move(eps_rows)));
  if (code.val().shape[0] == 1 && b > 1) code = tile_rows(code, b);
  StylizedGraph<T> sg = apply_code_and_decode(tape, binder, gm, f_c, mu_c, sigma_c, code, false);
  return tape.value(sg.image);
}

template <class T>
TensorT<T> stylize(const Generator<T>& g, const TensorT<T>& x_content, const StyleLatentT<T>& eps) {
  TensorT<T> e({static_cast<int64_t>(eps.epsilon.size())}, eps.epsilon);
  return stylize(g, x_content, e);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct RainTrainOptions {
  int64_t iters = 2000;
  int batch = 8;
  ScheduleSpec sched{0.02, 100, 2000, 0.9};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool bypass_vae = false;  // reduction mode: feed codes straight to AdaIN
};

struct RainLogRow {
  int64_t iter;  // 1-based
  double l_c, l_s, l_kl, l_rec, total;
};

// Pre-encoded per-image style information (encoder is frozen, so this is
// computed once per corpus).
template <class T>
struct StyleBank {
  std::vector<std::array<ChannelStatsT<T>, 4>> stage_stats;
  TensorT<T> codes;  // (M, 2C)
};

template <class T>
StyleBank<T> build_style_bank(const Generator<T>& g, const TensorT<T>& corpus) {
  if (corpus.rank() != 4 || corpus.shape[0] < 1)
    throw ContractError("style bank: corpus must be a non-empty (M,3,H,W) tensor");
  StyleBank<T> bank;
  const int64_t m = corpus.shape[0];
  bank.stage_stats.resize(static_cast<size_t>(m));
  bank.codes = TensorT<T>({m, g.cfg.code_len()});
  const Shape one{1, corpus.shape[1], corpus.shape[2], corpus.shape[3]};
  for (int64_t i = 0; i < m; ++i) {
    TensorT<T> img(one);
    std::copy_n(corpus.ptr() + i * img.numel(), img.numel(), img.ptr());
    auto stages = models::encode_stage_values(g, img);
    for (int s = 0; s < 4; ++s) bank.stage_stats[static_cast<size_t>(i)][static_cast<size_t>(s)] =
        channel_stats(stages[static_cast<size_t>(s)])[0];
    TensorT<T> code = style_code(stages[3]);
    std::copy_n(code.ptr(), code.numel(), bank.codes.ptr() + i * code.numel());
  }
  return bank;
}

// Train decoder + VAE against a frozen encoder. Returns the per-iteration
// loss log; mutates g (parameters and the trained flag).
template <class T>
std::vector<RainLogRow> train_rain(Generator<T>& g, const TensorT<T>& source_images, const TensorT<T>& style_corpus,
                                   const RainWeights& weights, const RainTrainOptions& opt, Rng& rng) {
  weights.validate();
  opt.sched.validate();
  if (source_images.rank() != 4 || source_images.shape[0] < 1)
    throw ContractError("train_rain: source images must be a non-empty (N,3,H,W) tensor");
  if (style_corpus.rank() != 4 || style_corpus.shape[0] < 1)
    throw ContractError("train_rain: style corpus must be a non-empty (M,3,H,W) tensor");
  if (opt.batch < 1) throw ContractError("train_rain: batch must be >= 1");

  const int64_t n_src = source_images.shape[0];
  const int64_t n_sty = style_corpus.shape[0];
  const int64_t c = g.cfg.channels;
  const int64_t d = g.cfg.latent;
  const int64_t b = opt.batch;

  // Frozen-encoder caches: content features and corpus style bank.
  TensorT<T> f_all = models::encode_values(g, source_images);
  const int64_t fhw = f_all.shape[2] * f_all.shape[3];
  StyleBank<T> bank = build_style_bank(g, style_corpus);

  Rng pick = rng.stream("rain/pick");
  Rng noise = rng.stream("rain/eta");

  std::vector<RainLogRow> log;
  log.reserve(static_cast<size_t>(opt.iters));

  const std::array<int64_t, 4> stage_channels{g.cfg.mid(), g.cfg.mid(), c, c};

  for (int64_t iter = 1; iter <= opt.iters; ++iter) {
    // Assemble the batch from caches.
    TensorT<T> f_c({b, c, f_all.shape[2], f_all.shape[3]});
    TensorT<T> code({b, 2 * c});
    std::array<TensorT<T>, 4> mu_s, sd_s;
    for (int s = 0; s < 4; ++s) {
      mu_s[static_cast<size_t>(s)] = TensorT<T>({b, stage_channels[static_cast<size_t>(s)]});
      sd_s[static_cast<size_t>(s)] = TensorT<T>({b, stage_channels[static_cast<size_t>(s)]});
    }
    for (int64_t i = 0; i < b; ++i) {
      const int64_t ci = pick.index(n_src);
      const int64_t si = pick.index(n_sty);
      std::copy_n(f_all.ptr() + ci * c * fhw, c * fhw, f_c.ptr() + i * c * fhw);
      std::copy_n(bank.codes.ptr() + si * 2 * c, 2 * c, code.ptr() + i * 2 * c);
      for (int s = 0; s < 4; ++s) {
        const auto& st = bank.stage_stats[static_cast<size_t>(si)][static_cast<size_t>(s)];
        const int64_t sc = stage_channels[static_cast<size_t>(s)];
        std::copy_n(st.mu.data(), sc, mu_s[static_cast<size_t>(s)].ptr() + i * sc);
        std::copy_n(st.sigma.data(), sc, sd_s[static_cast<size_t>(s)].ptr() + i * sc);
      }
    }

    Tape<T> tape;
    ParamBinder<T> binder(tape);
    Var<T> f_c_leaf = tape.leaf(std::move(f_c));
    Var<T> mu_c = instance_mean(f_c_leaf);
    Var<T> sigma_c = instance_std(f_c_leaf, kEpsStd);
    Var<T> code_leaf = tape.leaf(std::move(code));

    Var<T> code_used = code_leaf;
    Var<T> l_kl{}, l_rec{};
    bool has_vae = !opt.bypass_vae;
    if (has_vae) {
      auto post = vae_encode(tape, binder, g, code_leaf, true);
      TensorT<T> eta({b, d});
      noise.fill_normal(eta);
      Var<T> eps = add(post.psi, mul(post.xi, tape.leaf(std::move(eta))));
      code_used = vae_decode(tape, binder, g, eps, true);
      // KL: 0.5 * sum(psi^2 + exp(2u) - 1 - 2u) / B  with u = log xi
      Var<T> two_u = scale(post.log_xi, 2.0);
      Var<T> inner = sub(add(square(post.psi), exp_(two_u)), add_scalar(two_u, 1.0));
      l_kl = scale(sum_all(inner), 0.5 / static_cast<double>(b));
      l_rec = rowwise_l2_mean(sub(code_leaf, code_used));
    }

    StylizedGraph<T> sg = apply_code_and_decode(tape, binder, g, f_c_leaf, mu_c, sigma_c, code_used, true);
    auto f_out = encode(tape, binder, g, sg.image, false);

    Var<T> l_c = mean_all(square(sub(f_out.out, sg.adain_feat)));
    Var<T> l_s{};
    for (int s = 0; s < 4; ++s) {
      Var<T> dm = sub(instance_mean(f_out.stages[static_cast<size_t>(s)]),
                      tape.leaf(std::move(mu_s[static_cast<size_t>(s)])));
      Var<T> ds = sub(instance_std(f_out.stages[static_cast<size_t>(s)], kEpsStd),
                      tape.leaf(std::move(sd_s[static_cast<size_t>(s)])));
      Var<T> term = add(rowwise_l2_mean(dm), rowwise_l2_mean(ds));
      l_s = (s == 0) ? term : add(l_s, term);
    }

    Var<T> total = add(l_c, scale(l_s, weights.lambda_s));
    if (has_vae) {
      total = add(total, scale(l_kl, weights.lambda_k));
      total = add(total, scale(l_rec, weights.lambda_r));
    }

    g.dec.zero_grads();
    g.vae_enc.zero_grads();
    g.vae_dec.zero_grads();
    tape.backward(total);
    binder.pull_grads();

    const double lr = learning_rate(opt.sched, iter - 1);
    sgd_step(g.dec, lr, opt.momentum, opt.weight_decay);
    if (has_vae) {
      sgd_step(g.vae_enc, lr, opt.momentum, opt.weight_decay);
      sgd_step(g.vae_dec, lr, opt.momentum, opt.weight_decay);
    }

    RainLogRow row;
    row.iter = iter;
    row.l_c = static_cast<double>(tape.value(l_c).data[0]);
    row.l_s = static_cast<double>(tape.value(l_s).data[0]);
    row.l_kl = has_vae ? static_cast<double>(tape.value(l_kl).data[0]) : 0.0;
    row.l_rec = has_vae ? static_cast<double>(tape.value(l_rec).data[0]) : 0.0;
    row.total = static_cast<double>(tape.value(total).data[0]);
    if (!std::isfinite(row.total))
      throw ContractError("train_rain: non-finite loss at iteration " + std::to_string(iter));
    log.push_back(row);
  }

  g.trained = true;
  return log;
}

}  // namespace stylemine::rain
