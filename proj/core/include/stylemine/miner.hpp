#pragma once

// Adversarial style mining: a task classifier and the stylizer's latent space
// locked in a min/max loop. Each depth step builds ONE graph over the current
// batch, backpropagates once, and uses that single pass for both updates:
// descend the classifier parameters, ascend the style latent by its raw
// gradient (epsilon += beta * dL/depsilon). The stylizer itself stays frozen;
// content features are encoded once per batch, outside the depth loop.
//
// Baseline strategies reuse the identical step (beta forced to 0) and differ
// only in where epsilon comes from: re-drawn from the anchor posterior, drawn
// from N(0, I), or bypassing stylization entirely (source_only). Every
// strategy performs the same number of classifier updates on the same
// learning-rate schedule, so runs with the same seed are directly comparable.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "stylemine/rain.hpp"

namespace stylemine::miner {

using models::Generator;
using models::ParamBinder;
using models::TaskModel;
using rain::StyleLatentT;
using rain::StylePosteriorT;

enum class Strategy { mined, anchored, random_style, source_only };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::mined: return "asm";
    case Strategy::anchored: return "anchored";
    case Strategy::random_style: return "random";
    case Strategy::source_only: return "source_only";
  }
  throw ContractError("strategy_name: unknown strategy");
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "asm") return Strategy::mined;
  if (s == "anchored") return Strategy::anchored;
  if (s == "random") return Strategy::random_style;
  if (s == "source_only") return Strategy::source_only;
  throw ConfigError("unknown strategy '" + s + "' (expected asm|anchored|random|source_only)");
}

struct MiningConfig {
  double beta = 0.05;        // latent ascent rate
  int depth = 5;             // mine steps per batch
  double lambda = 2e-4;      // consistency weight
  double divergence_cap = 50.0;
  // Consistency pools features per content pair by default; setting this pools
  // the whole stylized batch into a single group instead.
  bool whole_batch_consistency = false;

  void validate() const {
    if (beta < 0) throw ContractError("MiningConfig: beta must be >= 0");
    if (depth < 1) throw ContractError("MiningConfig: depth must be >= 1");
    if (lambda < 0) throw ContractError("MiningConfig: lambda must be >= 0");
    if (!(divergence_cap > 0)) throw ContractError("MiningConfig: divergence_cap must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Anchor
// ---------------------------------------------------------------------------

// The style posterior at a single target-domain image; baseline draws and the
// miner's starting point both come from here.
template <class T>
struct AnchorSampleT {
  StylePosteriorT<T> post;

  int64_t dim() const { return static_cast<int64_t>(post.psi.size()); }
};

using AnchorSample = AnchorSampleT<float>;

template <class T>
AnchorSampleT<T> anchor_posterior(const Generator<T>& g, const TensorT<T>& x_target) {
  if (!g.trained) throw ContractError("anchor_posterior: generator has not been trained");
  TensorT<T> x = x_target;
  if (x.rank() == 3) x = TensorT<T>({1, x.shape[0], x.shape[1], x.shape[2]}, x.data);
  if (x.rank() != 4 || x.shape[0] != 1)
    throw ShapeError("anchor_posterior: expected a single (3,H,W) or (1,3,H,W) image, got " + shape_str(x_target.shape));
  TensorT<T> f = models::encode_values(g, x);
  TensorT<T> code = rain::style_code(f);
  auto [psi, xi] = models::vae_encode_values(g, code);
  AnchorSampleT<T> a;
  a.post.psi.assign(psi.data.begin(), psi.data.end());
  a.post.xi.assign(xi.data.begin(), xi.data.end());
  return a;
}

template <class T>
StyleLatentT<T> draw_anchor(const AnchorSampleT<T>& a, Rng& rng) {
  return rain::sample_latent(a.post, rng);
}

// ---------------------------------------------------------------------------
// Pure losses (tensor-level oracles for the graph versions)
// ---------------------------------------------------------------------------

template <class T>
T task_loss(const TensorT<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("task_loss: logits must be (B,K), got " + shape_str(logits.shape));
  const int64_t b = logits.shape[0], k = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != b) throw ContractError("task_loss: label count mismatch");
  double total = 0;
  for (int64_t i = 0; i < b; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
      throw ContractError("task_loss: label out of range at row " + std::to_string(i));
    const T* row = logits.ptr() + i * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double lse = 0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
    lse = mx + std::log(lse);
    total += lse - row[labels[static_cast<size_t>(i)]];
  }
  return static_cast<T>(total / static_cast<double>(b));
}

// Mean over consecutive groups of `group_size` rows of the average distance
// to the group centroid.
template <class T>
T consistency_loss(const TensorT<T>& z, int64_t group_size) {
  if (z.rank() != 2) throw ShapeError("consistency_loss: expected (B,F), got " + shape_str(z.shape));
  const int64_t b = z.shape[0], f = z.shape[1];
  if (group_size < 2) throw ContractError("consistency_loss: group_size must be >= 2");
  if (b % group_size != 0) throw ContractError("consistency_loss: batch not divisible by group_size");
  const int64_t groups = b / group_size;
  double total = 0;
  std::vector<double> centroid(static_cast<size_t>(f));
  for (int64_t g = 0; g < groups; ++g) {
    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (int64_t i = 0; i < group_size; ++i)
      for (int64_t j = 0; j < f; ++j)
        centroid[static_cast<size_t>(j)] += z.data[static_cast<size_t>(((g * group_size + i) * f) + j)];
    for (double& v : centroid) v /= static_cast<double>(group_size);
    double sum_norm = 0;
    for (int64_t i = 0; i < group_size; ++i) {
      double s = 0;
      for (int64_t j = 0; j < f; ++j) {
        const double d = z.data[static_cast<size_t>(((g * group_size + i) * f) + j)] - centroid[static_cast<size_t>(j)];
        s += d * d;
      }
      sum_norm += std::sqrt(s);
    }
    total += sum_norm / static_cast<double>(group_size);
  }
  return static_cast<T>(total / static_cast<double>(groups));
}

template <class T>
T total_loss(T l_task, T l_consist, double lambda) {
  return static_cast<T>(l_task + lambda * l_consist);
}

// Raw-gradient ascent on a latent (the epsilon update rule).
template <class T>
void ascend(TensorT<T>& eps, const TensorT<T>& grad, double beta) {
  require_same_shape(eps, grad, "ascend");
  for (int64_t i = 0; i < eps.numel(); ++i)
    eps.data[static_cast<size_t>(i)] += static_cast<T>(beta) * grad.data[static_cast<size_t>(i)];
}

// ---------------------------------------------------------------------------
// One mine step
// ---------------------------------------------------------------------------

// Cached per-batch inputs. The stylizer encoder runs exactly once per batch
// (when this struct is built), not once per depth step.
template <class T>
struct MineBatch {
  TensorT<T> raw;               // (B,3,H,W) source images
  TensorT<T> f_c;               // (B,C,h,w) frozen-encoder features
  TensorT<T> mu_c, sigma_c;     // (B,C) per-channel stats of f_c
  std::vector<int> labels;      // length B
  int64_t encoder_passes = 0;   // forward passes spent building this batch
};

// with_features=false gathers raw pixels and labels only (no encoder pass);
// that is all the source-only baseline consumes.
template <class T>
MineBatch<T> make_mine_batch(const Generator<T>& g, const TensorT<T>& images, const std::vector<int>& labels,
                             const std::vector<int64_t>& indices, bool with_features = true) {
  if (images.rank() != 4) throw ShapeError("make_mine_batch: images must be (N,3,H,W)");
  if (images.shape[0] != static_cast<int64_t>(labels.size()))
    throw ContractError("make_mine_batch: image/label count mismatch");
  if (indices.empty()) throw ContractError("make_mine_batch: empty batch");
  const int64_t n = images.shape[0];
  const int64_t per = images.numel() / n;
  MineBatch<T> b;
  const int64_t bs = static_cast<int64_t>(indices.size());
  b.raw = TensorT<T>({bs, images.shape[1], images.shape[2], images.shape[3]});
  b.labels.resize(indices.size());
  for (int64_t i = 0; i < bs; ++i) {
    const int64_t src = indices[static_cast<size_t>(i)];
    if (src < 0 || src >= n) throw ContractError("make_mine_batch: index out of range");
    std::copy_n(images.ptr() + src * per, per, b.raw.ptr() + i * per);
    b.labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
  }
  if (!with_features) return b;
  b.f_c = models::encode_values(g, b.raw);
  b.encoder_passes = 1;
  auto stats = channel_stats(b.f_c);
  const int64_t c = b.f_c.shape[1];
  b.mu_c = TensorT<T>({bs, c});
  b.sigma_c = TensorT<T>({bs, c});
  for (int64_t i = 0; i < bs; ++i)
    for (int64_t j = 0; j < c; ++j) {
      b.mu_c.data[static_cast<size_t>(i * c + j)] = stats[static_cast<size_t>(i)].mu[static_cast<size_t>(j)];
      b.sigma_c.data[static_cast<size_t>(i * c + j)] = stats[static_cast<size_t>(i)].sigma[static_cast<size_t>(j)];
    }
  return b;
}

struct StepResult {
  double l_task = 0, l_consist = 0, l_m = 0;
  int forward_passes = 0;  // graphs built during the step; the contract is 1
};

// One coupled update: single graph, single backward, classifier descends,
// epsilon ascends by beta times its raw gradient.
template <class T>
StepResult mine_step(TaskModel<T>& task, Generator<T>& g, const MineBatch<T>& batch, TensorT<T>& eps,
                     const TensorT<T>& anchor_eta, const MiningConfig& cfg, double lr, double momentum,
                     double weight_decay) {
  cfg.validate();
  if (!g.trained) throw ContractError("mine_step: generator has not been trained");
  const int64_t bc = batch.raw.shape[0];
  const int64_t d = g.cfg.latent;
  if (!(eps.rank() == 2 && eps.shape[0] == 1 && eps.shape[1] == d))
    throw ShapeError("mine_step: epsilon must be (1,d), got " + shape_str(eps.shape));
  if (!(anchor_eta.rank() == 2 && anchor_eta.shape[0] == 1 && anchor_eta.shape[1] == d))
    throw ShapeError("mine_step: anchor latent must be (1,d), got " + shape_str(anchor_eta.shape));

  StepResult res;
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  ++res.forward_passes;

  Var<T> eps_leaf = tape.leaf(eps, true);
  Var<T> eps_anchor = tape.leaf(anchor_eta, false);
  Var<T> f_c = tape.leaf(batch.f_c, false);
  Var<T> mu_c = tape.leaf(batch.mu_c, false);
  Var<T> sigma_c = tape.leaf(batch.sigma_c, false);

  Var<T> code_m = tile_rows(models::vae_decode(tape, binder, g, eps_leaf, false), bc);
  Var<T> code_a = tile_rows(models::vae_decode(tape, binder, g, eps_anchor, false), bc);
  Var<T> img_m = rain::apply_code_and_decode(tape, binder, g, f_c, mu_c, sigma_c, code_m, false).image;
  Var<T> img_a = rain::apply_code_and_decode(tape, binder, g, f_c, mu_c, sigma_c, code_a, false).image;
  Var<T> x = interleave_rows(img_m, img_a);

  std::vector<int> labels2(static_cast<size_t>(2 * bc));
  for (int64_t i = 0; i < bc; ++i) {
    labels2[static_cast<size_t>(2 * i)] = batch.labels[static_cast<size_t>(i)];
    labels2[static_cast<size_t>(2 * i + 1)] = batch.labels[static_cast<size_t>(i)];
  }

  auto out = models::task_forward(tape, binder, task, x, true);
  Var<T> l_task = softmax_xent_mean(out.logits, labels2);
  const int64_t group = cfg.whole_batch_consistency ? 2 * bc : 2;
  Var<T> l_cons = group_consistency(out.z, group);
  Var<T> l_m = add(l_task, scale(l_cons, cfg.lambda));

  task.params.zero_grads();
  tape.backward(l_m);
  binder.pull_grads();
  sgd_step(task.params, lr, momentum, weight_decay);

  TensorT<T> eps_grad = tape.grad(eps_leaf);
  ascend(eps, eps_grad, cfg.beta);

  res.l_task = static_cast<double>(tape.value(l_task).data[0]);
  res.l_consist = static_cast<double>(tape.value(l_cons).data[0]);
  res.l_m = static_cast<double>(tape.value(l_m).data[0]);
  return res;
}

// Supervised step on raw source images; the source_only strategy's analogue
// of mine_step (same update count, no stylization, no consistency term).
template <class T>
StepResult plain_step(TaskModel<T>& task, const MineBatch<T>& batch, double lr, double momentum,
                      double weight_decay) {
  StepResult res;
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  ++res.forward_passes;
  Var<T> x = tape.leaf(batch.raw, false);
  auto out = models::task_forward(tape, binder, task, x, true);
  Var<T> l_task = softmax_xent_mean(out.logits, batch.labels);
  task.params.zero_grads();
  tape.backward(l_task);
  binder.pull_grads();
  sgd_step(task.params, lr, momentum, weight_decay);
  res.l_task = static_cast<double>(tape.value(l_task).data[0]);
  res.l_consist = 0.0;
  res.l_m = res.l_task;
  return res;
}

// ---------------------------------------------------------------------------
// Full mining / baseline run
// ---------------------------------------------------------------------------

struct MineTrainOptions {
  int64_t outer_iters = 1000;
  int batch_contents = 4;
  ScheduleSpec sched{2.5e-4, 0, 1000, 0.9};
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct MiningLogRow {
  int64_t outer_iter;  // 1-based
  int depth_step;      // 1-based
  std::string strategy;
  double l_task, l_consist, l_m, lr;
};

template <class T>
struct MiningResult {
  std::vector<MiningLogRow> log;
  TensorT<T> mined_latents;     // (outer_iters, d): epsilon after each outer iteration
  int64_t forward_passes = 0;   // task-graph builds, one per classifier update
  int64_t encoder_passes = 0;   // stylizer-encoder batches, one per outer iteration
};

namespace detail {

template <class T>
std::string format_latent(const TensorT<T>& eps) {
  std::ostringstream os;
  os << "[";
  for (int64_t i = 0; i < eps.numel(); ++i) {
    if (i) os << ", ";
    os << eps.data[static_cast<size_t>(i)];
  }
  os << "]";
  return os.str();
}

}  // namespace detail

// Unified training loop for every strategy. All strategies consume identical
// random streams for batching and latent draws, so runs that share a seed see
// the same batches; with beta == 0 and depth == 1 the mined strategy is
// step-for-step identical to the anchored baseline.
template <class T>
MiningResult<T> run_mining(TaskModel<T>& task, Generator<T>& g, const TensorT<T>& images,
                           const std::vector<int>& labels, const AnchorSampleT<T>& anchor, Strategy strategy,
                           const MiningConfig& cfg, const MineTrainOptions& opt, Rng& rng) {
  cfg.validate();
  opt.sched.validate();
  if (opt.batch_contents < 1) throw ContractError("run_mining: batch_contents must be >= 1");
  if (opt.outer_iters < 1) throw ContractError("run_mining: outer_iters must be >= 1");
  if (images.rank() != 4 || images.shape[0] < 1)
    throw ContractError("run_mining: images must be a non-empty (N,3,H,W) tensor");
  const bool stylized = strategy != Strategy::source_only;
  if (stylized && !g.trained) throw ContractError("run_mining: generator has not been trained");
  const int64_t d = g.cfg.latent;
  if (stylized && anchor.dim() != d) throw ContractError("run_mining: anchor dimension mismatch");

  Rng pick = rng.stream("mine/batch");
  Rng eps_rng = rng.stream("mine/eps");
  Rng anchor_rng = rng.stream("mine/anchor");

  const int64_t n = images.shape[0];
  MiningResult<T> out;
  out.mined_latents = TensorT<T>::zeros({opt.outer_iters, d});
  out.log.reserve(static_cast<size_t>(opt.outer_iters * cfg.depth));
  const std::string sname = strategy_name(strategy);

  auto draw_eps = [&](TensorT<T>& eps) {
    std::vector<T> eta = eps_rng.normal_vec<T>(static_cast<size_t>(d));
    if (strategy == Strategy::random_style) {
      std::copy(eta.begin(), eta.end(), eps.data.begin());
    } else {
      StyleLatentT<T> s = rain::sample_latent(anchor.post, std::span<const T>(eta));
      std::copy(s.epsilon.begin(), s.epsilon.end(), eps.data.begin());
    }
  };

  for (int64_t iter = 1; iter <= opt.outer_iters; ++iter) {
    std::vector<int64_t> idx(static_cast<size_t>(opt.batch_contents));
    for (auto& v : idx) v = pick.index(n);
    MineBatch<T> batch = make_mine_batch(g, images, labels, idx, stylized);
    out.encoder_passes += batch.encoder_passes;

    TensorT<T> eps({1, d});
    const double lr = learning_rate(opt.sched, iter - 1);

    for (int step = 1; step <= cfg.depth; ++step) {
      StepResult sr;
      if (!stylized) {
        sr = plain_step(task, batch, lr, opt.momentum, opt.weight_decay);
      } else {
        const bool fresh = (step == 1) || (strategy != Strategy::mined);
        if (fresh) draw_eps(eps);
        TensorT<T> eps_a({1, d});
        {
          std::vector<T> eta = anchor_rng.normal_vec<T>(static_cast<size_t>(d));
          StyleLatentT<T> s = rain::sample_latent(anchor.post, std::span<const T>(eta));
          std::copy(s.epsilon.begin(), s.epsilon.end(), eps_a.data.begin());
        }
        MiningConfig step_cfg = cfg;
        if (strategy != Strategy::mined) step_cfg.beta = 0.0;
        sr = mine_step(task, g, batch, eps, eps_a, step_cfg, lr, opt.momentum, opt.weight_decay);
      }
      out.forward_passes += sr.forward_passes;

      if (!std::isfinite(sr.l_m) || sr.l_m > cfg.divergence_cap) {
        std::ostringstream os;
        os << "mining diverged: strategy=" << sname << " outer_iter=" << iter << " depth_step=" << step
           << " l_m=" << sr.l_m << " epsilon=" << detail::format_latent(eps);
        throw ContractError(os.str());
      }

      out.log.push_back(MiningLogRow{iter, step, sname, sr.l_task, sr.l_consist, sr.l_m, lr});
    }

    if (stylized)
      std::copy(eps.data.begin(), eps.data.end(), out.mined_latents.ptr() + (iter - 1) * d);
  }
  return out;
}

// The adversarial run (mined epsilons).
template <class T>
MiningResult<T> train_asm(TaskModel<T>& task, Generator<T>& g, const TensorT<T>& images,
                          const std::vector<int>& labels, const AnchorSampleT<T>& anchor, const MiningConfig& cfg,
                          const MineTrainOptions& opt, Rng& rng) {
  return run_mining(task, g, images, labels, anchor, Strategy::mined, cfg, opt, rng);
}

// Non-adversarial comparison runs (anchored / random / source_only).
template <class T>
MiningResult<T> baseline_strategy(TaskModel<T>& task, Generator<T>& g, const TensorT<T>& images,
                                  const std::vector<int>& labels, const AnchorSampleT<T>& anchor, Strategy strategy,
                                  const MiningConfig& cfg, const MineTrainOptions& opt, Rng& rng) {
  if (strategy == Strategy::mined)
    throw ContractError("baseline_strategy: use train_asm for the mined strategy");
  return run_mining(task, g, images, labels, anchor, strategy, cfg, opt, rng);
}

}  // namespace stylemine::miner
