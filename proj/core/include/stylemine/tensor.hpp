#pragma once

#include <cmath>
#include <cstdint>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylemine {

// All tensor storage is 64-byte aligned. SIMD kernels (ours and Eigen's)
// choose their loop peeling from the runtime address, so mixed alignments
// would make results depend on where the allocator happened to place a
// buffer; a fixed alignment makes every run of the same computation produce
// the same bits.
template <class T, size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, size_t n) { ::operator delete(p, n * sizeof(T), std::align_val_t(Align)); }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

template <class T>
using AVec = std::vector<T, AlignedAllocator<T>>;

// Element-wise equality across allocator types, so aligned tensor storage
// compares directly against ordinary vectors (used heavily by tests).
template <class T, class A1, class A2>
bool operator==(const std::vector<T, A1>& a, const std::vector<T, A2>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}
template <class T, class A1, class A2>
bool operator!=(const std::vector<T, A1>& a, const std::vector<T, A2>& b) {
  return !(a == b);
}

// Error taxonomy used across the library:
//   ShapeError    - tensor shape/axis violations
//   ContractError - precondition violations on operations and training runs
//   FormatError   - malformed files (checkpoints, datasets, CSV headers)
//   ConfigError   - bad configuration documents or CLI overrides
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major tensor. A rank-0 shape denotes a scalar (numel == 1).
// The element type is the dtype: float and double are the two supported
// precisions; training runs in float, verification math in double.
template <class T>
struct TensorT {
  Shape shape;
  AVec<T> data;

  TensorT() = default;

  explicit TensorT(Shape s) : shape(std::move(s)) {
    check_dims();
    data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  }

  TensorT(Shape s, AVec<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_dims();
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  TensorT(Shape s, const std::vector<T>& d) : TensorT(std::move(s), AVec<T>(d.begin(), d.end())) {}

  TensorT(Shape s, std::initializer_list<T> d) : TensorT(std::move(s), AVec<T>(d.begin(), d.end())) {}

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }

  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static TensorT scalar(T v) {
    TensorT t;
    t.data = {v};
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return shape.empty() && data.size() == 1; }

  int64_t dim(int i) const {
    if (i < 0 || i >= rank()) throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape));
    return shape[static_cast<size_t>(i)];
  }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // Flat offset for a 4-d tensor (n, c, h, w); used by the conv/stats kernels.
  int64_t off4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void check_dims() const {
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(shape));
  }
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace stylemine
