#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "stylemine/rng.hpp"
#include "stylemine/tensor.hpp"

namespace stylemine {

// One learnable tensor with its gradient accumulator and SGD momentum buffer.
// grad_set marks that a backward pass deposited a gradient since the last
// zero_grads(); the optimizer refuses to step parameters that never got one.
template <class T>
struct ParamEntry {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;
  TensorT<T> momentum;
  bool grad_set = false;
};

// Ordered, name-addressed collection of parameters. Order is insertion order
// and is part of the public contract: checkpoints and hashes follow it.
template <class T>
class ParamSet {
 public:
  int add(const std::string& name, TensorT<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    ParamEntry<T> e;
    e.name = name;
    e.grad = TensorT<T>::zeros(value.shape);
    e.momentum = TensorT<T>::zeros(value.shape);
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    int idx = static_cast<int>(entries_.size()) - 1;
    index_.emplace(name, idx);
    return idx;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  ParamEntry<T>& at(int i) { return entries_.at(static_cast<size_t>(i)); }
  const ParamEntry<T>& at(int i) const { return entries_.at(static_cast<size_t>(i)); }

  ParamEntry<T>& at(const std::string& name) {
    int i = find(name);
    if (i < 0) throw ContractError("unknown parameter: " + name);
    return entries_[static_cast<size_t>(i)];
  }
  const ParamEntry<T>& at(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw ContractError("unknown parameter: " + name);
    return entries_[static_cast<size_t>(i)];
  }

  size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grads() {
    for (auto& e : entries_) {
      std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
      e.grad_set = false;
    }
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  // Hash of names, shapes and raw value bytes (momentum excluded); used to
  // assert that frozen networks stay bit-identical across a run.
  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& e : entries_) {
      h = fnv1a64(e.name.data(), e.name.size(), h);
      h = fnv1a64(e.value.shape.data(), e.value.shape.size() * sizeof(int64_t), h);
      h = fnv1a64(e.value.data.data(), e.value.data.size() * sizeof(T), h);
    }
    return h;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) {
      out.add(e.name, e.value.template cast<U>());
      out.at(e.name).momentum = e.momentum.template cast<U>();
    }
    return out;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace stylemine
