#pragma once

// Network definitions.
//
// Generator G bundles four parameter sets:
//   enc      4-layer conv encoder, (3,H,W) -> (C, H/4, W/4), two stride-2 stages
//   dec      mirror decoder with nearest 2x upsampling, sigmoid output in [0,1]
//   vae_enc  2-layer MLP, style code (2C) -> posterior (psi, log xi), each d wide
//   vae_dec  2-layer MLP, latent (d) -> reconstructed style code (2C)
// TaskModel M is a conv trunk with the encoder topology plus a 2-layer head;
// the activation of the first head layer is the penultimate feature z.
//
// Forward passes are graph builders: they take a Tape plus a ParamBinder and
// append nodes, so the same code serves training (float) and gradient
// verification (double).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stylemine/autodiff.hpp"
#include "stylemine/paramset.hpp"
#include "stylemine/rng.hpp"

namespace stylemine::models {

struct NetConfig {
  int channels = 64;     // C: encoder output channels
  int latent = 16;       // d: style latent width
  int classes = 10;      // K
  int penultimate = 128; // F: width of z
  int side = 32;         // input image side; must be divisible by 4
  int vae_hidden = 64;   // hidden width of both VAE MLPs

  void validate() const;
  int mid() const { return channels / 2; }
  int feat_side() const { return side / 4; }
  int64_t code_len() const { return 2 * static_cast<int64_t>(channels); }
};

template <class T>
struct Generator {
  NetConfig cfg;
  ParamSet<T> enc, dec, vae_enc, vae_dec;
  // Frozen per-dimension statistics of the style-code corpus. The style VAE
  // operates on (code - code_mu) / code_sigma so its layers always see O(1)
  // inputs regardless of encoder feature scale; identity until set by training.
  TensorT<T> code_mu, code_sigma;
  bool trained = false;  // set after stylizer training or checkpoint load

  template <class U>
  Generator<U> cast() const {
    Generator<U> g;
    g.cfg = cfg;
    g.enc = enc.template cast<U>();
    g.dec = dec.template cast<U>();
    g.vae_enc = vae_enc.template cast<U>();
    g.vae_dec = vae_dec.template cast<U>();
    g.code_mu = code_mu.template cast<U>();
    g.code_sigma = code_sigma.template cast<U>();
    g.trained = trained;
    return g;
  }
};

template <class T>
struct TaskModel {
  NetConfig cfg;
  ParamSet<T> params;

  template <class U>
  TaskModel<U> cast() const {
    return TaskModel<U>{cfg, params.template cast<U>()};
  }
};

// Binds ParamSet entries onto a tape as leaves and pulls gradients back after
// backward(). Only entries bound with track=true are recorded.
template <class T>
class ParamBinder {
 public:
  explicit ParamBinder(Tape<T>& tape) : tape_(&tape) {}

  Var<T> bind(ParamSet<T>& ps, const std::string& name, bool track) {
    for (const auto& s : splices_)
      if (s.ps == &ps && s.name == name) {
        require_same_shape(s.var.val(), ps.at(name).value, "ParamBinder splice");
        return s.var;
      }
    auto& e = ps.at(name);
    Var<T> v = tape_->leaf(e.value, track);
    if (track) slots_.push_back({&ps, ps.find(name), v});
    return v;
  }

  // Substitute an existing tape node for one parameter; later bind() calls for
  // it return this node instead of leafing the stored value. Lets gradient
  // verification differentiate the real graph builders w.r.t. one weight.
  void splice(ParamSet<T>& ps, const std::string& name, Var<T> v) { splices_.push_back({&ps, name, v}); }

  // Read leaf gradients back into their ParamSet grad buffers (accumulating).
  void pull_grads() {
    for (const auto& s : slots_) {
      auto& e = s.ps->at(s.entry);
      TensorT<T> g = tape_->grad(s.var);
      for (int64_t i = 0; i < g.numel(); ++i) e.grad.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
      e.grad_set = true;
    }
  }

 private:
  struct Slot {
    ParamSet<T>* ps;
    int entry;
    Var<T> var;
  };
  struct Splice {
    ParamSet<T>* ps;
    std::string name;
    Var<T> var;
  };
  Tape<T>* tape_;
  std::vector<Slot> slots_;
  std::vector<Splice> splices_;
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

// Biases start at a small positive constant instead of zero: with zero
// biases and narrow layers, a whole relu layer can start dead for some
// inputs, which makes the loss locally constant and strands gradient ascent
// on the style latent at an exact zero. (Layers not followed by a relu are
// unaffected in any way that matters: a constant shift of the logits leaves
// the softmax unchanged.)
inline constexpr double kBiasInit = 0.1;

template <class T>
void add_conv(ParamSet<T>& ps, Rng& rng, const std::string& name, int out_c, int in_c, int k) {
  TensorT<T> w({out_c, in_c, k, k});
  const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));  // He-style
  rng.fill_normal(w, 0.0, stddev);
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", TensorT<T>::full({out_c}, static_cast<T>(kBiasInit)));
}

template <class T>
void add_fc(ParamSet<T>& ps, Rng& rng, const std::string& name, int out_n, int in_n) {
  TensorT<T> w({out_n, in_n});
  const double a = 1.0 / std::sqrt(static_cast<double>(in_n));
  rng.fill_uniform(w, -a, a);
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", TensorT<T>::full({out_n}, static_cast<T>(kBiasInit)));
}

}  // namespace detail

template <class T>
ParamSet<T> build_conv_trunk(const NetConfig& cfg, Rng rng) {
  ParamSet<T> ps;
  detail::add_conv(ps, rng, "c1", cfg.mid(), 3, 3);
  detail::add_conv(ps, rng, "c2", cfg.mid(), cfg.mid(), 3);
  detail::add_conv(ps, rng, "c3", cfg.channels, cfg.mid(), 3);
  detail::add_conv(ps, rng, "c4", cfg.channels, cfg.channels, 3);
  return ps;
}

template <class T>
Generator<T> build_generator(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  Generator<T> g;
  g.cfg = cfg;
  g.enc = build_conv_trunk<T>(cfg, root.stream("enc"));
  {
    Rng r = root.stream("dec");
    detail::add_conv(g.dec, r, "d1", cfg.channels, cfg.channels, 3);
    detail::add_conv(g.dec, r, "d2", cfg.mid(), cfg.channels, 3);
    detail::add_conv(g.dec, r, "d3", cfg.mid(), cfg.mid(), 3);
    detail::add_conv(g.dec, r, "d4", 3, cfg.mid(), 3);
  }
  {
    Rng r = root.stream("vae_enc");
    detail::add_fc(g.vae_enc, r, "f1", cfg.vae_hidden, static_cast<int>(cfg.code_len()));
    detail::add_fc(g.vae_enc, r, "f2", 2 * cfg.latent, cfg.vae_hidden);
  }
  {
    Rng r = root.stream("vae_dec");
    detail::add_fc(g.vae_dec, r, "f1", cfg.vae_hidden, cfg.latent);
    detail::add_fc(g.vae_dec, r, "f2", static_cast<int>(cfg.code_len()), cfg.vae_hidden);
  }
  g.code_mu = TensorT<T>::zeros({cfg.code_len()});
  g.code_sigma = TensorT<T>::full({cfg.code_len()}, T(1));
  return g;
}

template <class T>
TaskModel<T> build_task_model(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  TaskModel<T> m;
  m.cfg = cfg;
  m.params = build_conv_trunk<T>(cfg, root.stream("trunk"));
  {
    Rng r = root.stream("head");
    const int flat = cfg.channels * cfg.feat_side() * cfg.feat_side();
    detail::add_fc(m.params, r, "f1", cfg.penultimate, flat);
    detail::add_fc(m.params, r, "f2", cfg.classes, cfg.penultimate);
  }
  return m;
}

template <class T>
int64_t param_count(const Generator<T>& g) {
  return g.enc.param_count() + g.dec.param_count() + g.vae_enc.param_count() + g.vae_dec.param_count();
}

template <class T>
int64_t param_count(const TaskModel<T>& m) {
  return m.params.param_count();
}

// ---------------------------------------------------------------------------
// Graph-building forward passes
// ---------------------------------------------------------------------------

template <class T>
struct EncoderTaps {
  std::array<Var<T>, 4> stages;  // relu1, relu2, relu3, conv4 (linear)
  Var<T> out;                    // == stages[3]
};

// Shared topology of the generator encoder and the task trunk:
// c1 s1 + relu, c2 s2 + relu, c3 s2 + relu, c4 s1 (linear output).
template <class T>
EncoderTaps<T> conv_trunk_forward(Tape<T>& tape, ParamBinder<T>& binder, ParamSet<T>& ps, Var<T> x, bool trainable) {
  EncoderTaps<T> taps;
  Var<T> h1 = relu(conv2d(x, binder.bind(ps, "c1.w", trainable), binder.bind(ps, "c1.b", trainable), 1, 1));
  Var<T> h2 = relu(conv2d(h1, binder.bind(ps, "c2.w", trainable), binder.bind(ps, "c2.b", trainable), 2, 1));
  Var<T> h3 = relu(conv2d(h2, binder.bind(ps, "c3.w", trainable), binder.bind(ps, "c3.b", trainable), 2, 1));
  Var<T> h4 = conv2d(h3, binder.bind(ps, "c4.w", trainable), binder.bind(ps, "c4.b", trainable), 1, 1);
  taps.stages = {h1, h2, h3, h4};
  taps.out = h4;
  return taps;
}

template <class T>
EncoderTaps<T> encode(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> x, bool trainable = false) {
  return conv_trunk_forward(tape, binder, g.enc, x, trainable);
}

template <class T>
Var<T> decode(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> f, bool trainable = false) {
  Var<T> h = relu(conv2d(f, binder.bind(g.dec, "d1.w", trainable), binder.bind(g.dec, "d1.b", trainable), 1, 1));
  h = upsample2x(h);
  h = relu(conv2d(h, binder.bind(g.dec, "d2.w", trainable), binder.bind(g.dec, "d2.b", trainable), 1, 1));
  h = relu(conv2d(h, binder.bind(g.dec, "d3.w", trainable), binder.bind(g.dec, "d3.b", trainable), 1, 1));
  h = upsample2x(h);
  h = conv2d(h, binder.bind(g.dec, "d4.w", trainable), binder.bind(g.dec, "d4.b", trainable), 1, 1);
  return sigmoid(h);
}

template <class T>
struct VaePosterior {
  Var<T> psi;
  Var<T> xi;      // exp(log_xi); strictly positive
  Var<T> log_xi;
};

// Map a raw style code batch (B, 2C) into the standardized space the VAE
// operates in: (code - code_mu) / code_sigma, as frozen (untracked) constants.
template <class T>
Var<T> to_code_space(Tape<T>& tape, const Generator<T>& g, Var<T> code) {
  TensorT<T> neg_mu = g.code_mu;
  for (auto& v : neg_mu.data) v = -v;
  TensorT<T> inv_sigma = g.code_sigma;
  for (auto& v : inv_sigma.data) v = T(1) / v;
  return mul_rowvec(add_rowvec(code, tape.leaf(std::move(neg_mu))), tape.leaf(std::move(inv_sigma)));
}

// Inverse of to_code_space: code_std * code_sigma + code_mu.
template <class T>
Var<T> from_code_space(Tape<T>& tape, const Generator<T>& g, Var<T> code_std) {
  return add_rowvec(mul_rowvec(code_std, tape.leaf(g.code_sigma)), tape.leaf(g.code_mu));
}

template <class T>
VaePosterior<T> vae_encode(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> code,
                           bool trainable = false) {
  Var<T> code_std = to_code_space(tape, g, code);
  Var<T> h = relu(add_rowvec(matmul_nt(code_std, binder.bind(g.vae_enc, "f1.w", trainable)),
                             binder.bind(g.vae_enc, "f1.b", trainable)));
  Var<T> out = add_rowvec(matmul_nt(h, binder.bind(g.vae_enc, "f2.w", trainable)),
                          binder.bind(g.vae_enc, "f2.b", trainable));
  VaePosterior<T> p;
  p.psi = slice_cols(out, 0, g.cfg.latent);
  p.log_xi = slice_cols(out, g.cfg.latent, 2 * g.cfg.latent);
  p.xi = exp_(p.log_xi);
  return p;
}

// Decoder half of the style VAE in standardized code space; callers that need
// a real-scale code wrap the result in from_code_space (vae_decode does).
template <class T>
Var<T> vae_decode_std(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> eps, bool trainable = false) {
  Var<T> h = relu(add_rowvec(matmul_nt(eps, binder.bind(g.vae_dec, "f1.w", trainable)),
                             binder.bind(g.vae_dec, "f1.b", trainable)));
  return add_rowvec(matmul_nt(h, binder.bind(g.vae_dec, "f2.w", trainable)),
                    binder.bind(g.vae_dec, "f2.b", trainable));
}

template <class T>
Var<T> vae_decode(Tape<T>& tape, ParamBinder<T>& binder, Generator<T>& g, Var<T> eps, bool trainable = false) {
  return from_code_space(tape, g, vae_decode_std(tape, binder, g, eps, trainable));
}

template <class T>
struct TaskOut {
  Var<T> logits;
  Var<T> z;  // penultimate feature, (B, F)
};

template <class T>
TaskOut<T> task_forward(Tape<T>& tape, ParamBinder<T>& binder, TaskModel<T>& m, Var<T> x, bool trainable = false) {
  EncoderTaps<T> taps = conv_trunk_forward(tape, binder, m.params, x, trainable);
  Var<T> h = relu(taps.out);
  const int64_t b = h.val().shape[0];
  const int64_t flat = h.val().numel() / b;
  h = reshape_copy(h, Shape{b, flat});
  Var<T> z = relu(add_rowvec(matmul_nt(h, binder.bind(m.params, "f1.w", trainable)),
                             binder.bind(m.params, "f1.b", trainable)));
  Var<T> logits = add_rowvec(matmul_nt(z, binder.bind(m.params, "f2.w", trainable)),
                             binder.bind(m.params, "f2.b", trainable));
  return TaskOut<T>{logits, z};
}

// ---------------------------------------------------------------------------
// Value-only conveniences (throwaway tape, no gradients)
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> encode_values(const Generator<T>& g, const TensorT<T>& x) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& gm = const_cast<Generator<T>&>(g);
  return tape.value(encode(tape, binder, gm, tape.leaf(x)).out);
}

template <class T>
std::array<TensorT<T>, 4> encode_stage_values(const Generator<T>& g, const TensorT<T>& x) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& gm = const_cast<Generator<T>&>(g);
  EncoderTaps<T> taps = encode(tape, binder, gm, tape.leaf(x));
  return {tape.value(taps.stages[0]), tape.value(taps.stages[1]), tape.value(taps.stages[2]),
          tape.value(taps.stages[3])};
}

template <class T>
TensorT<T> decode_values(const Generator<T>& g, const TensorT<T>& f) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& gm = const_cast<Generator<T>&>(g);
  return tape.value(decode(tape, binder, gm, tape.leaf(f)));
}

template <class T>
std::pair<TensorT<T>, TensorT<T>> vae_encode_values(const Generator<T>& g, const TensorT<T>& code) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& gm = const_cast<Generator<T>&>(g);
  VaePosterior<T> p = vae_encode(tape, binder, gm, tape.leaf(code));
  return {tape.value(p.psi), tape.value(p.xi)};
}

template <class T>
TensorT<T> vae_decode_values(const Generator<T>& g, const TensorT<T>& eps) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& gm = const_cast<Generator<T>&>(g);
  return tape.value(vae_decode(tape, binder, gm, tape.leaf(eps)));
}

template <class T>
std::pair<TensorT<T>, TensorT<T>> task_forward_values(const TaskModel<T>& m, const TensorT<T>& x) {
  Tape<T> tape;
  ParamBinder<T> binder(tape);
  auto& mm = const_cast<TaskModel<T>&>(m);
  TaskOut<T> out = task_forward(tape, binder, mm, tape.leaf(x));
  return {tape.value(out.logits), tape.value(out.z)};
}

}  // namespace stylemine::models
