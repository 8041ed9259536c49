#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nlmap/core/tensor.hpp"

namespace nlmap {

/// One trainable tensor with its gradient and optimizer state.
/// `sparse_rows` marks tensors (hash tables) whose gradients touch only a
/// subset of rows per step; the tape records touched rows so the optimizer
/// can skip the rest.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> m;
  Tensor<S> v;
  bool sparse_rows = false;
  std::vector<uint8_t> row_touched;
  std::vector<int32_t> touched_rows;

  bool has_grad() const { return !grad.data.empty(); }

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<S>::zeros(value.rows, value.cols);
    if (sparse_rows && row_touched.empty())
      row_touched.assign(static_cast<size_t>(value.rows), 0);
  }

  void mark_row(int64_t r) {
    if (!row_touched[static_cast<size_t>(r)]) {
      row_touched[static_cast<size_t>(r)] = 1;
      touched_rows.push_back(static_cast<int32_t>(r));
    }
  }

  void zero_grad() {
    if (!has_grad()) return;
    if (sparse_rows) {
      for (int32_t r : touched_rows) {
        S* g = grad.data.data() + static_cast<size_t>(r) * grad.cols;
        std::fill(g, g + grad.cols, S(0));
        row_touched[static_cast<size_t>(r)] = 0;
      }
      touched_rows.clear();
    } else {
      grad.fill(S(0));
    }
  }
};

/// Owning collection of parameters with stable addresses.
template <typename S>
class ParamStore {
 public:
  Param<S>& add(std::string name, Tensor<S> init, bool sparse_rows = false) {
    auto p = std::make_unique<Param<S>>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->sparse_rows = sparse_rows;
    items_.push_back(std::move(p));
    return *items_.back();
  }

  size_t size() const { return items_.size(); }
  Param<S>& operator[](size_t i) { return *items_[i]; }
  const Param<S>& operator[](size_t i) const { return *items_[i]; }

  Param<S>* find(const std::string& name) {
    for (auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::unique_ptr<Param<S>>> items_;
};

}  // namespace nlmap
