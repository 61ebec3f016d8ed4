#pragma once

// Reverse-mode automatic differentiation over a tape of tensor nodes.
//
// A Tape owns every node of one forward computation in creation order, which
// is already a topological order, so backward() is a single reverse sweep.
// Gradients can be read for any node that was marked as requiring them —
// parameters and free latent inputs alike; mining ascends on the gradient of
// a *leaf input*, so intermediates are first-class differentiation targets.
//
// Every op records the minimum it needs for its backward rule and reads the
// rest (parent values) straight from the tape. Ops with non-smooth points
// (relu, clamps, norms, std floors) report how close the forward pass came to
// a kink via Tape::kink_margin(); the finite-difference checker uses that to
// reject ill-conditioned probe points instead of loosening tolerances.

#include <Eigen/Core>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "stylemine/stats.hpp"
#include "stylemine/tensor.hpp"

namespace stylemine {

namespace detail {
// Test hook: when enabled, one backward rule (relu) is deliberately scaled by
// 1.01 so the gradient-check harness can prove it detects broken rules.
inline std::atomic<bool>& fault_injection() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const TensorT<T>& val() const;
};

using Var32 = Var<float>;
using Var64 = Var<double>;

template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  struct Node {
    TensorT<T> value;
    TensorT<T> grad;  // allocated on first contribution
    std::vector<int> parents;
    BackFn back;        // empty for leaves
    bool needs_grad = false;
    bool touched = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(TensorT<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> emplace(TensorT<T> value, std::vector<int> parents, BackFn back) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.back = std::move(back);
    for (int p : n.parents)
      if (nodes_[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const TensorT<T>& value(Var<T> v) const { return nodes_.at(static_cast<size_t>(v.idx)).value; }

  const Node& node(int idx) const { return nodes_.at(static_cast<size_t>(idx)); }

  // Gradient of the last backward() loss w.r.t. v; zeros if v was not reached.
  TensorT<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(static_cast<size_t>(v.idx));
    if (n.grad.numel() == 0) return TensorT<T>::zeros(n.value.shape.empty() ? Shape{} : n.value.shape);
    return n.grad;
  }

  // Accumulation buffer for a node's gradient; allocates zeros on first use.
  TensorT<T>& grad_buf(int idx) {
    Node& n = nodes_[static_cast<size_t>(idx)];
    if (n.grad.numel() == 0) {
      if (n.value.is_scalar())
        n.grad = TensorT<T>::scalar(T(0));
      else
        n.grad = TensorT<T>::zeros(n.value.shape);
    }
    n.touched = true;
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss from a different tape");
    Node& root = nodes_.at(static_cast<size_t>(loss.idx));
    if (!root.value.is_scalar())
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(root.value.shape));
    grad_buf(loss.idx).data[0] = T(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.touched || !n.needs_grad || !n.back) continue;
      n.back(*this, i);
    }
  }

  void note_margin(double m) {
    if (m < kink_margin_) kink_margin_ = m;
  }

  // Smallest distance any non-smooth op came to its kink during the forward
  // pass; +inf when every op stayed smooth.
  double kink_margin() const { return kink_margin_; }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  std::vector<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

using Tape32 = Tape<float>;
using Tape64 = Tape<double>;

template <class T>
const TensorT<T>& Var<T>::val() const {
  return tape->value(*this);
}

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapCM = Eigen::Map<const MatRM<T>>;

template <class T>
void same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands from different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  require_same_shape(a.val(), b.val(), "add");
  TensorT<T> out = a.val();
  const TensorT<T>& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] += bv.data[static_cast<size_t>(i)];
  int pa = a.idx, pb = b.idx;
  return a.tape->emplace(std::move(out), {pa, pb}, [pa, pb](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    if (t.node(pa).needs_grad) {
      auto& ga = t.grad_buf(pa);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "sub");
  require_same_shape(a.val(), b.val(), "sub");
  TensorT<T> out = a.val();
  const TensorT<T>& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] -= bv.data[static_cast<size_t>(i)];
  int pa = a.idx, pb = b.idx;
  return a.tape->emplace(std::move(out), {pa, pb}, [pa, pb](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    if (t.node(pa).needs_grad) {
      auto& ga = t.grad_buf(pa);
      for (int64_t i = 0; i < g.numel(); ++i) ga.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < g.numel(); ++i) gb.data[static_cast<size_t>(i)] -= g.data[static_cast<size_t>(i)];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  require_same_shape(a.val(), b.val(), "mul");
  TensorT<T> out = a.val();
  const TensorT<T>& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] *= bv.data[static_cast<size_t>(i)];
  int pa = a.idx, pb = b.idx;
  return a.tape->emplace(std::move(out), {pa, pb}, [pa, pb](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& av = t.node(pa).value;
    const TensorT<T>& bv2 = t.node(pb).value;
    if (t.node(pa).needs_grad) {
      auto& ga = t.grad_buf(pa);
      for (int64_t i = 0; i < g.numel(); ++i)
        ga.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)] * bv2.data[static_cast<size_t>(i)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < g.numel(); ++i)
        gb.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)] * av.data[static_cast<size_t>(i)];
    }
  });
}

template <class T>
Var<T> scale(Var<T> x, double c) {
  TensorT<T> out = x.val();
  for (T& v : out.data) v = static_cast<T>(v * c);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, c](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i)
      gx.data[static_cast<size_t>(i)] += static_cast<T>(g.data[static_cast<size_t>(i)] * c);
  });
}

template <class T>
Var<T> add_scalar(Var<T> x, double c) {
  TensorT<T> out = x.val();
  for (T& v : out.data) v = static_cast<T>(v + c);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
  });
}

template <class T>
Var<T> relu(Var<T> x) {
  const TensorT<T>& xv = x.val();
  TensorT<T> out(xv.shape.empty() ? Shape{} : xv.shape);
  if (xv.is_scalar()) out = TensorT<T>::scalar(T(0));
  double margin = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < xv.numel(); ++i) {
    const T v = xv.data[static_cast<size_t>(i)];
    out.data[static_cast<size_t>(i)] = v > T(0) ? v : T(0);
    const double m = std::abs(static_cast<double>(v));
    if (m < margin) margin = m;
  }
  x.tape->note_margin(margin);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv2 = t.node(px).value;
    auto& gx = t.grad_buf(px);
    const T fault = detail::fault_injection().load(std::memory_order_relaxed) ? T(1.01) : T(1);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (xv2.data[static_cast<size_t>(i)] > T(0))
        gx.data[static_cast<size_t>(i)] += fault * g.data[static_cast<size_t>(i)];
  });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  const TensorT<T>& xv = x.val();
  TensorT<T> out = xv;
  for (T& v : out.data) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& y = t.node(self).value;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T yi = y.data[static_cast<size_t>(i)];
      gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)] * yi * (T(1) - yi);
    }
  });
}

template <class T>
Var<T> exp_(Var<T> x) {
  TensorT<T> out = x.val();
  for (T& v : out.data) v = static_cast<T>(std::exp(static_cast<double>(v)));
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& y = t.node(self).value;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i)
      gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)] * y.data[static_cast<size_t>(i)];
  });
}

template <class T>
Var<T> square(Var<T> x) {
  TensorT<T> out = x.val();
  for (T& v : out.data) v = v * v;
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv = t.node(px).value;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i)
      gx.data[static_cast<size_t>(i)] += T(2) * g.data[static_cast<size_t>(i)] * xv.data[static_cast<size_t>(i)];
  });
}

template <class T>
Var<T> clamp_min(Var<T> x, double lo) {
  const TensorT<T>& xv = x.val();
  TensorT<T> out = xv;
  double margin = std::numeric_limits<double>::infinity();
  for (T& v : out.data) {
    const double m = std::abs(static_cast<double>(v) - lo);
    if (m < margin) margin = m;
    if (static_cast<double>(v) < lo) v = static_cast<T>(lo);
  }
  x.tape->note_margin(margin);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, lo](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv2 = t.node(px).value;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i)
      if (static_cast<double>(xv2.data[static_cast<size_t>(i)]) > lo)
        gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape_copy(Var<T> x, Shape s) {
  if (shape_numel(s) != x.val().numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(x.val().shape) + " -> " + shape_str(s));
  TensorT<T> out(std::move(s), x.val().data);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < g.numel(); ++i) gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
  });
}

template <class T>
Var<T> slice_cols(Var<T> x, int64_t c0, int64_t c1) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("slice_cols: expected rank-2, got " + shape_str(xv.shape));
  const int64_t r = xv.shape[0], n = xv.shape[1];
  if (c0 < 0 || c1 <= c0 || c1 > n) throw ShapeError("slice_cols: bad column range");
  TensorT<T> out({r, c1 - c0});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = c0; j < c1; ++j) out.data[static_cast<size_t>(i * (c1 - c0) + (j - c0))] = xv.data[static_cast<size_t>(i * n + j)];
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, c0, c1](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    const int64_t r2 = g.shape[0], w = c1 - c0, n2 = t.node(px).value.shape[1];
    for (int64_t i = 0; i < r2; ++i)
      for (int64_t j = 0; j < w; ++j)
        gx.data[static_cast<size_t>(i * n2 + c0 + j)] += g.data[static_cast<size_t>(i * w + j)];
  });
}

template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "concat_cols");
  const TensorT<T>& av = a.val();
  const TensorT<T>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[0] != bv.shape[0])
    throw ShapeError("concat_cols: incompatible shapes " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  const int64_t r = av.shape[0], na = av.shape[1], nb = bv.shape[1];
  TensorT<T> out({r, na + nb});
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < na; ++j) out.data[static_cast<size_t>(i * (na + nb) + j)] = av.data[static_cast<size_t>(i * na + j)];
    for (int64_t j = 0; j < nb; ++j) out.data[static_cast<size_t>(i * (na + nb) + na + j)] = bv.data[static_cast<size_t>(i * nb + j)];
  }
  int pa = a.idx, pb = b.idx;
  return a.tape->emplace(std::move(out), {pa, pb}, [pa, pb, na, nb](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    const int64_t r2 = g.shape[0];
    if (t.node(pa).needs_grad) {
      auto& ga = t.grad_buf(pa);
      for (int64_t i = 0; i < r2; ++i)
        for (int64_t j = 0; j < na; ++j)
          ga.data[static_cast<size_t>(i * na + j)] += g.data[static_cast<size_t>(i * (na + nb) + j)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < r2; ++i)
        for (int64_t j = 0; j < nb; ++j)
          gb.data[static_cast<size_t>(i * nb + j)] += g.data[static_cast<size_t>(i * (na + nb) + na + j)];
    }
  });
}

// Repeat a (R, N) block `times` times along rows: out row t*R + r = x row r.
template <class T>
Var<T> tile_rows(Var<T> x, int64_t times) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("tile_rows: expected rank-2, got " + shape_str(xv.shape));
  if (times <= 0) throw ShapeError("tile_rows: times must be positive");
  const int64_t r = xv.shape[0], n = xv.shape[1];
  TensorT<T> out({r * times, n});
  for (int64_t tt = 0; tt < times; ++tt)
    std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + static_cast<size_t>(tt * r * n));
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, r, n, times](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t tt = 0; tt < times; ++tt)
      for (int64_t i = 0; i < r * n; ++i)
        gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(tt * r * n + i)];
  });
}

// Zip two equal-shape batches along the leading dim: out row 2i = a_i,
// out row 2i+1 = b_i. Rows are whole dim-0 slices of any rank >= 1.
template <class T>
Var<T> interleave_rows(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "interleave_rows");
  const TensorT<T>& av = a.val();
  const TensorT<T>& bv = b.val();
  require_same_shape(av, bv, "interleave_rows");
  if (av.rank() < 1) throw ShapeError("interleave_rows: expected rank >= 1");
  const int64_t r = av.shape[0];
  const int64_t n = av.numel() / r;
  Shape oshape = av.shape;
  oshape[0] = 2 * r;
  TensorT<T> out(oshape);
  for (int64_t i = 0; i < r; ++i) {
    std::copy_n(av.ptr() + i * n, n, out.ptr() + (2 * i) * n);
    std::copy_n(bv.ptr() + i * n, n, out.ptr() + (2 * i + 1) * n);
  }
  int pa = a.idx, pb = b.idx;
  return a.tape->emplace(std::move(out), {pa, pb}, [pa, pb, r, n](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    if (t.node(pa).needs_grad) {
      auto& ga = t.grad_buf(pa);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j)
          ga.data[static_cast<size_t>(i * n + j)] += g.data[static_cast<size_t>((2 * i) * n + j)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j)
          gb.data[static_cast<size_t>(i * n + j)] += g.data[static_cast<size_t>((2 * i + 1) * n + j)];
    }
  });
}

// ---------------------------------------------------------------------------
// Dense / convolution layers
// ---------------------------------------------------------------------------

// y = x * w^T for x (B, In), w (Out, In) -> (B, Out).
template <class T>
Var<T> matmul_nt(Var<T> x, Var<T> w) {
  detail::same_tape(x, w, "matmul_nt");
  const TensorT<T>& xv = x.val();
  const TensorT<T>& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
  const int64_t b = xv.shape[0], in = xv.shape[1], out_n = wv.shape[0];
  TensorT<T> out({b, out_n});
  {
    detail::MapCM<T> X(xv.ptr(), b, in), W(wv.ptr(), out_n, in);
    detail::MapM<T> Y(out.ptr(), b, out_n);
    Y.noalias() = X * W.transpose();
  }
  int px = x.idx, pw = w.idx;
  return x.tape->emplace(std::move(out), {px, pw}, [px, pw, b, in, out_n](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    detail::MapCM<T> G(g.ptr(), b, out_n);
    if (t.node(px).needs_grad) {
      detail::MapCM<T> W(t.node(pw).value.ptr(), out_n, in);
      detail::MapM<T> GX(t.grad_buf(px).ptr(), b, in);
      GX.noalias() += G * W;
    }
    if (t.node(pw).needs_grad) {
      detail::MapCM<T> X(t.node(px).value.ptr(), b, in);
      detail::MapM<T> GW(t.grad_buf(pw).ptr(), out_n, in);
      GW.noalias() += G.transpose() * X;
    }
  });
}

// y = x + b broadcast over rows, for x (B, N), b (N).
template <class T>
Var<T> add_rowvec(Var<T> x, Var<T> b) {
  detail::same_tape(x, b, "add_rowvec");
  const TensorT<T>& xv = x.val();
  const TensorT<T>& bv = b.val();
  if (xv.rank() != 2 || bv.rank() != 1 || xv.shape[1] != bv.shape[0])
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(xv.shape) + " vs " + shape_str(bv.shape));
  const int64_t r = xv.shape[0], n = xv.shape[1];
  TensorT<T> out = xv;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[static_cast<size_t>(i * n + j)] += bv.data[static_cast<size_t>(j)];
  int px = x.idx, pb = b.idx;
  return x.tape->emplace(std::move(out), {px, pb}, [px, pb, r, n](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    if (t.node(px).needs_grad) {
      auto& gx = t.grad_buf(px);
      for (int64_t i = 0; i < r * n; ++i) gx.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * n + j)];
    }
  });
}

// Multiply every row of a (rows, n) matrix elementwise by a length-n vector.
template <class T>
Var<T> mul_rowvec(Var<T> x, Var<T> b) {
  detail::same_tape(x, b, "mul_rowvec");
  const TensorT<T>& xv = x.val();
  const TensorT<T>& bv = b.val();
  if (xv.rank() != 2 || bv.rank() != 1 || xv.shape[1] != bv.shape[0])
    throw ShapeError("mul_rowvec: incompatible shapes " + shape_str(xv.shape) + " vs " + shape_str(bv.shape));
  const int64_t r = xv.shape[0], n = xv.shape[1];
  TensorT<T> out = xv;
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[static_cast<size_t>(i * n + j)] *= bv.data[static_cast<size_t>(j)];
  int px = x.idx, pb = b.idx;
  return x.tape->emplace(std::move(out), {px, pb}, [px, pb, r, n](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv2 = t.node(px).value;
    const TensorT<T>& bv2 = t.node(pb).value;
    if (t.node(px).needs_grad) {
      auto& gx = t.grad_buf(px);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j)
          gx.data[static_cast<size_t>(i * n + j)] += g.data[static_cast<size_t>(i * n + j)] * bv2.data[static_cast<size_t>(j)];
    }
    if (t.node(pb).needs_grad) {
      auto& gb = t.grad_buf(pb);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j)
          gb.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i * n + j)] * xv2.data[static_cast<size_t>(i * n + j)];
    }
  });
}

namespace detail {

template <class T>
void im2col(const T* x, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t ho, int64_t wo, T* col) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* dst = col + ((c * kh + ky) * kw + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int64_t ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = T(0);
            continue;
          }
          const T* src = x + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                int64_t ho, int64_t wo, T* x) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* src = col + ((c * kh + ky) * kw + kx) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-d convolution: x (B, Ci, H, W), w (Co, Ci, kh, kw), bias (Co).
// Lowered to a per-image im2col + GEMM; the column matrix is kept for the
// weight gradient only when the weights actually require one, so frozen
// networks pay nothing extra.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
  detail::same_tape(x, w, "conv2d");
  detail::same_tape(x, b, "conv2d");
  const TensorT<T>& xv = x.val();
  const TensorT<T>& wv = w.val();
  const TensorT<T>& bv = b.val();
  if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: inputs must be rank-4");
  if (xv.shape[1] != wv.shape[1])
    throw ShapeError("conv2d: channel mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
  if (bv.rank() != 1 || bv.shape[0] != wv.shape[0]) throw ShapeError("conv2d: bias shape mismatch");
  if (stride < 1 || pad < 0) throw ContractError("conv2d: bad stride/pad");
  const int64_t bn = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], win = xv.shape[3];
  const int64_t co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (win + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  const int64_t ck = ci * kh * kw, owo = ho * wo;

  const bool keep_cols = w.tape->node(w.idx).needs_grad;
  auto cols = std::make_shared<AVec<T>>();
  if (keep_cols) cols->resize(static_cast<size_t>(bn * ck * owo));

  TensorT<T> out({bn, co, ho, wo});
  {
    AVec<T> col(static_cast<size_t>(ck * owo));
    detail::MapCM<T> W(wv.ptr(), co, ck);
    for (int64_t i = 0; i < bn; ++i) {
      T* cptr = keep_cols ? cols->data() + static_cast<size_t>(i * ck * owo) : col.data();
      detail::im2col(xv.ptr() + i * ci * h * win, ci, h, win, kh, kw, stride, pad, ho, wo, cptr);
      detail::MapCM<T> C(cptr, ck, owo);
      detail::MapM<T> Y(out.ptr() + i * co * owo, co, owo);
      Y.noalias() = W * C;
      for (int64_t oc = 0; oc < co; ++oc) Y.row(oc).array() += bv.data[static_cast<size_t>(oc)];
    }
  }

  int px = x.idx, pw = w.idx, pb = b.idx;
  return x.tape->emplace(
      std::move(out), {px, pw, pb},
      [px, pw, pb, bn, ci, h, win, co, kh, kw, stride, pad, ho, wo, ck, owo, cols, keep_cols](Tape<T>& t, int self) {
        const TensorT<T>& g = t.node(self).grad;
        const TensorT<T>& wv2 = t.node(pw).value;
        const bool need_x = t.node(px).needs_grad;
        const bool need_w = t.node(pw).needs_grad;
        const bool need_b = t.node(pb).needs_grad;
        detail::MapCM<T> W(wv2.ptr(), co, ck);
        AVec<T> dcol(need_x ? static_cast<size_t>(ck * owo) : 0);
        AVec<T> col(need_w && !keep_cols ? static_cast<size_t>(ck * owo) : 0);
        for (int64_t i = 0; i < bn; ++i) {
          detail::MapCM<T> G(g.ptr() + i * co * owo, co, owo);
          if (need_b) {
            auto& gb = t.grad_buf(pb);
            for (int64_t oc = 0; oc < co; ++oc) gb.data[static_cast<size_t>(oc)] += G.row(oc).sum();
          }
          if (need_w) {
            const T* cptr;
            if (keep_cols) {
              cptr = cols->data() + static_cast<size_t>(i * ck * owo);
            } else {
              detail::im2col(t.node(px).value.ptr() + i * ci * h * win, ci, h, win, kh, kw, stride, pad, ho, wo,
                             col.data());
              cptr = col.data();
            }
            detail::MapCM<T> C(cptr, ck, owo);
            detail::MapM<T> GW(t.grad_buf(pw).ptr(), co, ck);
            GW.noalias() += G * C.transpose();
          }
          if (need_x) {
            detail::MapM<T> DC(dcol.data(), ck, owo);
            DC.noalias() = W.transpose() * G;
            detail::col2im_add(dcol.data(), ci, h, win, kh, kw, stride, pad, ho, wo,
                               t.grad_buf(px).ptr() + i * ci * h * win);
          }
        }
      });
}

// Nearest-neighbour 2x upsampling of (B, C, H, W).
template <class T>
Var<T> upsample2x(Var<T> x) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 4) throw ShapeError("upsample2x: expected rank-4, got " + shape_str(xv.shape));
  const int64_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  TensorT<T> out({b, c, 2 * h, 2 * w});
  for (int64_t i = 0; i < b * c; ++i) {
    const T* src = xv.ptr() + i * h * w;
    T* dst = out.ptr() + i * 4 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        const T v = src[y * w + xx];
        dst[(2 * y) * 2 * w + 2 * xx] = v;
        dst[(2 * y) * 2 * w + 2 * xx + 1] = v;
        dst[(2 * y + 1) * 2 * w + 2 * xx] = v;
        dst[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
      }
  }
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, b, c, h, w](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < b * c; ++i) {
      const T* gs = g.ptr() + i * 4 * h * w;
      T* gd = gx.ptr() + i * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx)
          gd[y * w + xx] += gs[(2 * y) * 2 * w + 2 * xx] + gs[(2 * y) * 2 * w + 2 * xx + 1] +
                            gs[(2 * y + 1) * 2 * w + 2 * xx] + gs[(2 * y + 1) * 2 * w + 2 * xx + 1];
    }
  });
}

// ---------------------------------------------------------------------------
// Instance statistics and the AdaIN core
// ---------------------------------------------------------------------------

// Per-(item, channel) spatial mean of (B, C, H, W) -> (B, C).
template <class T>
Var<T> instance_mean(Var<T> x) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 4) throw ShapeError("instance_mean: expected rank-4, got " + shape_str(xv.shape));
  const int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  TensorT<T> out({b, c});
  for (int64_t i = 0; i < b * c; ++i) {
    const T* p = xv.ptr() + i * hw;
    double s = 0;
    for (int64_t k = 0; k < hw; ++k) s += p[k];
    out.data[static_cast<size_t>(i)] = static_cast<T>(s / static_cast<double>(hw));
  }
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, b, c, hw](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < b * c; ++i) {
      const T gi = g.data[static_cast<size_t>(i)] / static_cast<T>(hw);
      T* q = gx.ptr() + i * hw;
      for (int64_t k = 0; k < hw; ++k) q[k] += gi;
    }
  });
}

// Per-(item, channel) spatial population std of (B, C, H, W) -> (B, C),
// floored at `eps`. Gradient is zero wherever the floor is active.
template <class T>
Var<T> instance_std(Var<T> x, double eps = kEpsStd) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 4) throw ShapeError("instance_std: expected rank-4, got " + shape_str(xv.shape));
  const int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  TensorT<T> out({b, c});
  auto raw = std::make_shared<std::vector<double>>(static_cast<size_t>(b * c));
  auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(b * c));
  double margin = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < b * c; ++i) {
    const T* p = xv.ptr() + i * hw;
    double s = 0;
    for (int64_t k = 0; k < hw; ++k) s += p[k];
    const double mean = s / static_cast<double>(hw);
    double var = 0;
    for (int64_t k = 0; k < hw; ++k) {
      const double d = p[k] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(hw));
    (*raw)[static_cast<size_t>(i)] = sd;
    (*means)[static_cast<size_t>(i)] = mean;
    const double m = std::abs(sd - eps);
    if (m < margin) margin = m;
    out.data[static_cast<size_t>(i)] = static_cast<T>(sd < eps ? eps : sd);
  }
  x.tape->note_margin(margin);
  int px = x.idx;
  return x.tape->emplace(std::move(out), {px}, [px, b, c, hw, eps, raw, means](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv2 = t.node(px).value;
    auto& gx = t.grad_buf(px);
    for (int64_t i = 0; i < b * c; ++i) {
      const double sd = (*raw)[static_cast<size_t>(i)];
      if (sd <= eps) continue;
      const double mean = (*means)[static_cast<size_t>(i)];
      const double gi = static_cast<double>(g.data[static_cast<size_t>(i)]) / (static_cast<double>(hw) * sd);
      const T* p = xv2.ptr() + i * hw;
      T* q = gx.ptr() + i * hw;
      for (int64_t k = 0; k < hw; ++k) q[k] += static_cast<T>(gi * (p[k] - mean));
    }
  });
}

// y[b,c,:,:] = gain[b,c] * (x[b,c,:,:] - m[b,c]) / s[b,c] + t[b,c]
// The AdaIN transform factors into instance_mean/instance_std (on the content)
// feeding m and s, with gain/t coming from the target style; keeping m and s
// as explicit inputs makes each backward rule local and lets the style side
// receive gradients, which is what the latent miner differentiates through.
template <class T>
Var<T> normalize_affine(Var<T> x, Var<T> m, Var<T> s, Var<T> gain, Var<T> t_) {
  detail::same_tape(x, m, "normalize_affine");
  detail::same_tape(x, s, "normalize_affine");
  detail::same_tape(x, gain, "normalize_affine");
  detail::same_tape(x, t_, "normalize_affine");
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 4) throw ShapeError("normalize_affine: x must be rank-4");
  const int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  const Shape bc{b, c};
  for (Var<T> v : {m, s, gain, t_})
    if (v.val().shape != bc)
      throw ShapeError("normalize_affine: per-channel input must be " + shape_str(bc) + ", got " +
                       shape_str(v.val().shape));
  TensorT<T> out(xv.shape);
  for (int64_t i = 0; i < b * c; ++i) {
    const T* p = xv.ptr() + i * hw;
    T* q = out.ptr() + i * hw;
    const double mu = m.val().data[static_cast<size_t>(i)];
    const double sd = s.val().data[static_cast<size_t>(i)];
    const double ga = gain.val().data[static_cast<size_t>(i)];
    const double tb = t_.val().data[static_cast<size_t>(i)];
    const double k = ga / sd;
    for (int64_t j = 0; j < hw; ++j) q[j] = static_cast<T>((p[j] - mu) * k + tb);
  }
  int px = x.idx, pm = m.idx, ps = s.idx, pg = gain.idx, pt = t_.idx;
  return x.tape->emplace(std::move(out), {px, pm, ps, pg, pt}, [px, pm, ps, pg, pt, b, c, hw](Tape<T>& t, int self) {
    const TensorT<T>& g = t.node(self).grad;
    const TensorT<T>& xv2 = t.node(px).value;
    const TensorT<T>& mv = t.node(pm).value;
    const TensorT<T>& sv = t.node(ps).value;
    const TensorT<T>& gv = t.node(pg).value;
    const bool nx = t.node(px).needs_grad, nm = t.node(pm).needs_grad, ns = t.node(ps).needs_grad,
               ng = t.node(pg).needs_grad, nt = t.node(pt).needs_grad;
    for (int64_t i = 0; i < b * c; ++i) {
      const T* gp = g.ptr() + i * hw;
      const T* p = xv2.ptr() + i * hw;
      const double mu = mv.data[static_cast<size_t>(i)];
      const double sd = sv.data[static_cast<size_t>(i)];
      const double ga = gv.data[static_cast<size_t>(i)];
      double sum_g = 0, sum_gx = 0;
      for (int64_t j = 0; j < hw; ++j) {
        sum_g += gp[j];
        sum_gx += static_cast<double>(gp[j]) * (p[j] - mu);
      }
      if (nx) {
        T* q = t.grad_buf(px).ptr() + i * hw;
        const T k = static_cast<T>(ga / sd);
        for (int64_t j = 0; j < hw; ++j) q[j] += k * gp[j];
      }
      if (nm) t.grad_buf(pm).data[static_cast<size_t>(i)] += static_cast<T>(-ga / sd * sum_g);
      if (ns) t.grad_buf(ps).data[static_cast<size_t>(i)] += static_cast<T>(-ga / (sd * sd) * sum_gx);
      if (ng) t.grad_buf(pg).data[static_cast<size_t>(i)] += static_cast<T>(sum_gx / sd);
      if (nt) t.grad_buf(pt).data[static_cast<size_t>(i)] += static_cast<T>(sum_g);
    }
  });
}

// Full AdaIN as a graph op: content stats are derived on-tape so gradients
// flow into the content features and into the target stats.
template <class T>
Var<T> adain_graph(Var<T> content, Var<T> target_mu, Var<T> target_sigma) {
  Var<T> m = instance_mean(content);
  Var<T> s = instance_std(content, kEpsStd);
  return normalize_affine(content, m, s, target_sigma, target_mu);
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(Var<T> x) {
  const TensorT<T>& xv = x.val();
  double s = 0;
  for (T v : xv.data) s += v;
  int px = x.idx;
  return x.tape->emplace(TensorT<T>::scalar(static_cast<T>(s)), {px}, [px](Tape<T>& t, int self) {
    if (!t.node(px).needs_grad) return;
    const T g = t.node(self).grad.data[0];
    auto& gx = t.grad_buf(px);
    for (T& v : gx.data) v += g;
  });
}

template <class T>
Var<T> mean_all(Var<T> x) {
  const TensorT<T>& xv = x.val();
  const int64_t n = xv.numel();
  double s = 0;
  for (T v : xv.data) s += v;
  int px = x.idx;
  return x.tape->emplace(TensorT<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {px},
                         [px, n](Tape<T>& t, int self) {
                           if (!t.node(px).needs_grad) return;
                           const T g = t.node(self).grad.data[0] / static_cast<T>(n);
                           auto& gx = t.grad_buf(px);
                           for (T& v : gx.data) v += g;
                         });
}

// Mean over rows of the euclidean norm of each row: (1/B) sum_b ||x_b||_2.
template <class T>
Var<T> rowwise_l2_mean(Var<T> x) {
  const TensorT<T>& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("rowwise_l2_mean: expected rank-2, got " + shape_str(xv.shape));
  const int64_t b = xv.shape[0], n = xv.shape[1];
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(b));
  double total = 0;
  double margin = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < b; ++i) {
    const T* p = xv.ptr() + i * n;
    double s = 0;
    for (int64_t j = 0; j < n; ++j) s += static_cast<double>(p[j]) * p[j];
    const double nrm = std::sqrt(s);
    (*norms)[static_cast<size_t>(i)] = nrm;
    total += nrm;
    if (nrm < margin) margin = nrm;
  }
  x.tape->note_margin(margin);
  int px = x.idx;
  return x.tape->emplace(TensorT<T>::scalar(static_cast<T>(total / static_cast<double>(b))), {px},
                         [px, b, n, norms](Tape<T>& t, int self) {
                           if (!t.node(px).needs_grad) return;
                           const double g = t.node(self).grad.data[0];
                           const TensorT<T>& xv2 = t.node(px).value;
                           auto& gx = t.grad_buf(px);
                           for (int64_t i = 0; i < b; ++i) {
                             const double nrm = (*norms)[static_cast<size_t>(i)];
                             if (nrm < 1e-30) continue;  // subgradient 0 at the origin
                             const double k = g / (static_cast<double>(b) * nrm);
                             const T* p = xv2.ptr() + i * n;
                             T* q = gx.ptr() + i * n;
                             for (int64_t j = 0; j < n; ++j) q[j] += static_cast<T>(k * p[j]);
                           }
                         });
}

// Mean cross-entropy between softmax(logits) and integer labels.
template <class T>
Var<T> softmax_xent_mean(Var<T> logits, std::vector<int> labels) {
  const TensorT<T>& lv = logits.val();
  if (lv.rank() != 2) throw ShapeError("softmax_xent_mean: expected rank-2 logits, got " + shape_str(lv.shape));
  const int64_t b = lv.shape[0], k = lv.shape[1];
  if (static_cast<int64_t>(labels.size()) != b)
    throw ShapeError("softmax_xent_mean: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                     " rows");
  for (int y : labels)
    if (y < 0 || y >= k) throw ContractError("softmax_xent_mean: label " + std::to_string(y) + " outside [0," +
                                             std::to_string(k) + ")");
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(b * k));
  double loss = 0;
  for (int64_t i = 0; i < b; ++i) {
    const T* p = lv.ptr() + i * k;
    double mx = p[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(p[j]));
    double z = 0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(p[j]) - mx);
    const double logz = std::log(z) + mx;
    for (int64_t j = 0; j < k; ++j)
      (*probs)[static_cast<size_t>(i * k + j)] = std::exp(static_cast<double>(p[j]) - logz);
    loss += logz - static_cast<double>(p[labels[static_cast<size_t>(i)]]);
  }
  loss /= static_cast<double>(b);
  int pl = logits.idx;
  return logits.tape->emplace(TensorT<T>::scalar(static_cast<T>(loss)), {pl},
                              [pl, b, k, labels = std::move(labels), probs](Tape<T>& t, int self) {
                                if (!t.node(pl).needs_grad) return;
                                const double g = t.node(self).grad.data[0];
                                auto& gx = t.grad_buf(pl);
                                for (int64_t i = 0; i < b; ++i) {
                                  T* q = gx.ptr() + i * k;
                                  for (int64_t j = 0; j < k; ++j) {
                                    double d = (*probs)[static_cast<size_t>(i * k + j)];
                                    if (j == labels[static_cast<size_t>(i)]) d -= 1.0;
                                    q[j] += static_cast<T>(g * d / static_cast<double>(b));
                                  }
                                }
                              });
}

// Feature-consistency penalty over groups of S consecutive rows of z (B, F):
// the mean over groups of (sum_i ||z_i - z_bar||_2) / S.
template <class T>
Var<T> group_consistency(Var<T> z, int64_t group_size) {
  const TensorT<T>& zv = z.val();
  if (zv.rank() != 2) throw ShapeError("group_consistency: expected rank-2, got " + shape_str(zv.shape));
  const int64_t b = zv.shape[0], f = zv.shape[1];
  if (group_size < 2) throw ContractError("group_consistency: group size must be >= 2");
  if (b % group_size != 0)
    throw ContractError("group_consistency: rows " + std::to_string(b) + " not divisible by group size " +
                        std::to_string(group_size));
  const int64_t groups = b / group_size;
  auto units = std::make_shared<std::vector<double>>(static_cast<size_t>(b * f));  // r_i / ||r_i||
  double total = 0;
  double margin = std::numeric_limits<double>::infinity();
  std::vector<double> zbar(static_cast<size_t>(f));
  for (int64_t gi = 0; gi < groups; ++gi) {
    std::fill(zbar.begin(), zbar.end(), 0.0);
    for (int64_t i = 0; i < group_size; ++i) {
      const T* p = zv.ptr() + (gi * group_size + i) * f;
      for (int64_t j = 0; j < f; ++j) zbar[static_cast<size_t>(j)] += p[j];
    }
    for (double& v : zbar) v /= static_cast<double>(group_size);
    double gsum = 0;
    for (int64_t i = 0; i < group_size; ++i) {
      const int64_t row = gi * group_size + i;
      const T* p = zv.ptr() + row * f;
      double s = 0;
      for (int64_t j = 0; j < f; ++j) {
        const double d = p[j] - zbar[static_cast<size_t>(j)];
        s += d * d;
      }
      const double nrm = std::sqrt(s);
      if (nrm < margin) margin = nrm;
      gsum += nrm;
      if (nrm >= 1e-30) {
        for (int64_t j = 0; j < f; ++j)
          (*units)[static_cast<size_t>(row * f + j)] = (p[j] - zbar[static_cast<size_t>(j)]) / nrm;
      }
    }
    total += gsum / static_cast<double>(group_size);
  }
  total /= static_cast<double>(groups);
  z.tape->note_margin(margin);
  int pz = z.idx;
  return z.tape->emplace(
      TensorT<T>::scalar(static_cast<T>(total)), {pz}, [pz, b, f, group_size, groups, units](Tape<T>& t, int self) {
        if (!t.node(pz).needs_grad) return;
        const double g = t.node(self).grad.data[0];
        auto& gx = t.grad_buf(pz);
        const double k = g / static_cast<double>(groups * group_size);
        std::vector<double> ubar(static_cast<size_t>(f));
        for (int64_t gi = 0; gi < groups; ++gi) {
          std::fill(ubar.begin(), ubar.end(), 0.0);
          for (int64_t i = 0; i < group_size; ++i) {
            const double* u = units->data() + (gi * group_size + i) * f;
            for (int64_t j = 0; j < f; ++j) ubar[static_cast<size_t>(j)] += u[j];
          }
          for (double& v : ubar) v /= static_cast<double>(group_size);
          for (int64_t i = 0; i < group_size; ++i) {
            const int64_t row = gi * group_size + i;
            const double* u = units->data() + row * f;
            T* q = gx.ptr() + row * f;
            for (int64_t j = 0; j < f; ++j)
              q[j] += static_cast<T>(k * (u[j] - ubar[static_cast<size_t>(j)]));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient evaluation entry point
// ---------------------------------------------------------------------------

// Backpropagate from a scalar loss and collect gradients for each requested
// node. Nodes that do not participate in the loss get zeros.
template <class T>
std::vector<TensorT<T>> grad_eval(Tape<T>& tape, Var<T> loss, std::span<const Var<T>> wrt) {
  tape.backward(loss);
  std::vector<TensorT<T>> out;
  out.reserve(wrt.size());
  for (Var<T> v : wrt) {
    if (v.tape != &tape) throw ContractError("grad_eval: wrt node from a different tape");
    out.push_back(tape.grad(v));
  }
  return out;
}

}  // namespace stylemine
