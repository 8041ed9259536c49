#pragma once

#include <cmath>
#include <vector>

#include "nlmap/core/parallel.hpp"
#include "nlmap/core/params.hpp"

namespace nlmap {

template <typename S>
struct AdamConfig {
  S lr = static_cast<S>(1e-3);
  S beta1 = static_cast<S>(0.9);
  S beta2 = static_cast<S>(0.999);
  S eps = static_cast<S>(1e-8);
};

/// Adam with bias correction. Parameters flagged sparse_rows are updated
/// lazily: only rows touched since the last step move (their moments use
/// the global step count, as in the usual sparse-Adam convention).
template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig<S> cfg = {}) : cfg_(cfg) {}

  const AdamConfig<S>& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  void add_param(Param<S>* p) { params_.push_back(p); }

  void step(ThreadPool* pool = nullptr) {
    ++step_;
    const S bc1 = S(1) - std::pow(cfg_.beta1, static_cast<S>(step_));
    const S bc2 = S(1) - std::pow(cfg_.beta2, static_cast<S>(step_));
    for (Param<S>* p : params_) {
      if (!p->has_grad()) continue;
      ensure_state(*p);
      if (p->sparse_rows) {
        const int64_t c = p->value.cols;
        auto& rows = p->touched_rows;
        auto body = [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i) {
            const int64_t base = static_cast<int64_t>(rows[static_cast<size_t>(i)]) * c;
            update_range(*p, base, base + c, bc1, bc2);
          }
        };
        if (pool && rows.size() > 4096)
          pool->for_rows(static_cast<int64_t>(rows.size()), body);
        else
          body(0, static_cast<int64_t>(rows.size()));
        p->zero_grad();  // also clears the touched set
      } else {
        update_range(*p, 0, p->value.numel(), bc1, bc2);
        p->zero_grad();
      }
    }
  }

 private:
  void ensure_state(Param<S>& p) {
    if (p.m.data.empty()) {
      p.m = Tensor<S>::zeros(p.value.rows, p.value.cols);
      p.v = Tensor<S>::zeros(p.value.rows, p.value.cols);
    }
  }

  void update_range(Param<S>& p, int64_t lo, int64_t hi, S bc1, S bc2) {
    S* w = p.value.data.data();
    const S* g = p.grad.data.data();
    S* m = p.m.data.data();
    S* v = p.v.data.data();
    for (int64_t i = lo; i < hi; ++i) {
      m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * g[i] * g[i];
      const S mh = m[i] / bc1;
      const S vh = v[i] / bc2;
      w[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }

  AdamConfig<S> cfg_;
  int64_t step_ = 0;
  std::vector<Param<S>*> params_;
};

}  // namespace nlmap
