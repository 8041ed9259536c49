#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nlmap/core/parallel.hpp"
#include "nlmap/core/params.hpp"
#include "nlmap/core/tensor.hpp"

namespace nlmap {

/// Thrown when a forward value stops being finite; carries the first
/// offending node so training aborts with a usable message.
struct NonFiniteError : std::runtime_error {
  int node;
  NonFiniteError(int node_id, const std::string& what)
      : std::runtime_error(what), node(node_id) {}
};

/// Precomputed multi-corner interpolation plan: for each output row, eight
/// source rows of a table and their weights. Weights are constants of the
/// batch (positions do not require gradients).
template <typename S>
struct InterpPlan {
  int64_t table_rows = 0;
  std::vector<int32_t> idx;  // [n*8]
  std::vector<S> w;          // [n*8]
  int64_t count() const { return static_cast<int64_t>(w.size()) / 8; }
};

/// Reverse-mode tape over 2-D tensors. Ops execute eagerly on creation
/// (that is the forward pass); backward() replays the recorded graph in
/// reverse. Single-threaded use is fully deterministic; with a pool the
/// block grid keeps results reproducible as well.
template <typename S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;

  explicit Tape(ThreadPool* pool = nullptr, bool finite_checks = false)
      : pool_(pool), finite_checks_(finite_checks) {}

  // ---- leaves ----

  int leaf(const Tensor<S>& t) { return make_leaf(t.rows, t.cols, t.data.data(), false, nullptr); }

  int leaf(Tensor<S>&& t) { return leaf(static_cast<const Tensor<S>&>(t)); }

  /// Gradient-requiring leaf whose grad lives on the tape (tests, probes).
  int var(const Tensor<S>& t) { return make_leaf(t.rows, t.cols, t.data.data(), true, nullptr); }

  /// Leaf backed by external parameter storage; gradients accumulate into
  /// param.grad. Repeated calls for the same parameter return one node.
  int param(Param<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    p.ensure_grad();
    int id = make_leaf(p.value.rows, p.value.cols, p.value.data.data(), true, &p);
    param_nodes_[&p] = id;
    return id;
  }

  // ---- elementwise ----

  int add(int a, int b) { return binary(Op::Add, a, b); }
  int sub(int a, int b) { return binary(Op::Sub, a, b); }
  int mul(int a, int b) { return binary(Op::Mul, a, b); }

  /// a0*x + a1, elementwise.
  int affine(int x, S a0, S a1) {
    Node& nx = nodes_[x];
    int id = make_node(Op::Affine, {x}, nx.rows, nx.cols);
    Node& n = nodes_[id];
    n.a0 = a0;
    n.a1 = a1;
    const S* xv = nx.val;
    S* y = n.val;
    for (int64_t i = 0; i < n.numel(); ++i) y[i] = a0 * xv[i] + a1;
    return finish(id);
  }

  int scale(int x, S k) { return affine(x, k, S(0)); }
  int neg(int x) { return affine(x, S(-1), S(0)); }

  int relu(int x) {
    Node& nx = nodes_[x];
    int id = make_node(Op::Relu, {x}, nx.rows, nx.cols);
    const S* xv = nodes_[x].val;
    S* y = nodes_[id].val;
    for (int64_t i = 0; i < nodes_[id].numel(); ++i) y[i] = xv[i] > S(0) ? xv[i] : S(0);
    return finish(id);
  }

  int sigmoid(int x) {
    Node& nx = nodes_[x];
    int id = make_node(Op::Sigmoid, {x}, nx.rows, nx.cols);
    const S* xv = nodes_[x].val;
    S* y = nodes_[id].val;
    for (int64_t i = 0; i < nodes_[id].numel(); ++i)
      y[i] = S(1) / (S(1) + std::exp(-xv[i]));
    return finish(id);
  }

  int log(int x) {
    Node& nx = nodes_[x];
    int id = make_node(Op::Log, {x}, nx.rows, nx.cols);
    const S* xv = nodes_[x].val;
    S* y = nodes_[id].val;
    for (int64_t i = 0; i < nodes_[id].numel(); ++i) y[i] = std::log(xv[i]);
    return finish(id);
  }

  // ---- linear algebra ----

  int matmul(int a, int b) {
    Node& na = nodes_[a];
    Node& nb = nodes_[b];
    if (na.cols != nb.rows) throw std::invalid_argument("matmul: inner dims differ");
    int id = make_node(Op::Matmul, {a, b}, na.rows, nb.cols);
    gemm(nodes_[id].val, nodes_[a].val, nodes_[b].val, na.rows, na.cols, nb.cols);
    return finish(id);
  }

  /// x*W + b over rows; b may be -1 for no bias. W is [in, out], b [1, out].
  int linear(int x, int w, int b) {
    Node& nx = nodes_[x];
    Node& nw = nodes_[w];
    if (nx.cols != nw.rows) throw std::invalid_argument("linear: inner dims differ");
    if (b >= 0 && (nodes_[b].rows != 1 || nodes_[b].cols != nw.cols))
      throw std::invalid_argument("linear: bias shape");
    int id = make_node(Op::Linear, {x, w, b}, nx.rows, nw.cols);
    gemm(nodes_[id].val, nodes_[x].val, nodes_[w].val, nx.rows, nx.cols, nw.cols);
    if (b >= 0) {
      const S* bias = nodes_[b].val;
      S* y = nodes_[id].val;
      const int64_t m = nodes_[id].cols;
      for (int64_t r = 0; r < nodes_[id].rows; ++r)
        for (int64_t c = 0; c < m; ++c) y[r * m + c] += bias[c];
    }
    return finish(id);
  }

  /// Weighted 8-corner gather from a table: out[i] = sum_c w[i,c]*table[idx[i,c]].
  int interp(int table, std::shared_ptr<const InterpPlan<S>> plan) {
    Node& nt = nodes_[table];
    if (plan->table_rows != nt.rows) throw std::invalid_argument("interp: table rows mismatch");
    const int64_t n = plan->count();
    const int64_t f = nt.cols;
    int id = make_node(Op::Interp, {table}, n, f);
    nodes_[id].plan = std::move(plan);
    const auto& pl = *nodes_[id].plan;
    const S* tab = nodes_[table].val;
    S* y = nodes_[id].val;
    auto run = [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i) {
        S* out = y + i * f;
        std::fill(out, out + f, S(0));
        for (int c = 0; c < 8; ++c) {
          const S wc = pl.w[i * 8 + c];
          const S* row = tab + static_cast<int64_t>(pl.idx[i * 8 + c]) * f;
          for (int64_t k = 0; k < f; ++k) out[k] += wc * row[k];
        }
      }
    };
    if (pool_) pool_->for_rows(n, run); else run(0, n);
    return finish(id);
  }

  int concat_cols(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: empty");
    int64_t rows = nodes_[xs[0]].rows, cols = 0;
    for (int x : xs) {
      if (nodes_[x].rows != rows) throw std::invalid_argument("concat: row mismatch");
      cols += nodes_[x].cols;
    }
    int id = make_node(Op::ConcatCols, {}, rows, cols);
    nodes_[id].in_list = xs;
    S* y = nodes_[id].val;
    int64_t off = 0;
    for (int x : xs) {
      const Node& nx = nodes_[x];
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(y + r * cols + off, nx.val + r * nx.cols, sizeof(S) * nx.cols);
      off += nx.cols;
    }
    for (int x : xs) nodes_[id].requires_grad |= nodes_[x].requires_grad;
    return finish(id);
  }

  int slice_cols(int x, int64_t c0, int64_t c1) {
    Node& nx = nodes_[x];
    if (c0 < 0 || c1 > nx.cols || c0 >= c1) throw std::invalid_argument("slice_cols: range");
    int id = make_node(Op::SliceCols, {x}, nx.rows, c1 - c0);
    nodes_[id].i0 = static_cast<int>(c0);
    const Node& src = nodes_[x];
    S* y = nodes_[id].val;
    for (int64_t r = 0; r < src.rows; ++r)
      std::memcpy(y + r * (c1 - c0), src.val + r * src.cols + c0, sizeof(S) * (c1 - c0));
    return finish(id);
  }

  int slice_rows(int x, int64_t r0, int64_t r1) {
    Node& nx = nodes_[x];
    if (r0 < 0 || r1 > nx.rows || r0 >= r1) throw std::invalid_argument("slice_rows: range");
    int id = make_node(Op::SliceRows, {x}, r1 - r0, nx.cols);
    nodes_[id].i0 = static_cast<int>(r0);
    std::memcpy(nodes_[id].val, nodes_[x].val + r0 * nx.cols, sizeof(S) * (r1 - r0) * nx.cols);
    return finish(id);
  }

  // ---- grouped reductions (flat input, consecutive groups of size m) ----

  int group_sum(int x, int64_t m) {
    Node& nx = nodes_[x];
    check_group(nx, m);
    const int64_t g = nx.numel() / m;
    int id = make_node(Op::GroupSum, {x}, g, 1);
    nodes_[id].i0 = static_cast<int>(m);
    const S* xv = nodes_[x].val;
    S* y = nodes_[id].val;
    for (int64_t i = 0; i < g; ++i) {
      S s = 0;
      for (int64_t j = 0; j < m; ++j) s += xv[i * m + j];
      y[i] = s;
    }
    return finish(id);
  }

  int sum_all(int x) { return group_sum(x, nodes_[x].numel()); }

  int mean_all(int x) {
    const int64_t n = nodes_[x].numel();
    return scale(sum_all(x), S(1) / static_cast<S>(n));
  }

  /// Per-group normalization of nonnegative weights; groups whose sum is
  /// below eps produce all-zero output (invalid pixel). Group sums are
  /// readable afterwards via group_sums().
  int group_normalize(int x, int64_t m, S eps) {
    Node& nx = nodes_[x];
    check_group(nx, m);
    const int64_t g = nx.numel() / m;
    int id = make_node(Op::GroupNormalize, {x}, nx.rows, nx.cols);
    Node& n = nodes_[id];
    n.i0 = static_cast<int>(m);
    n.a0 = eps;
    n.aux = arena_alloc(g);
    const S* xv = nodes_[x].val;
    S* y = n.val;
    for (int64_t i = 0; i < g; ++i) {
      S s = 0;
      for (int64_t j = 0; j < m; ++j) s += xv[i * m + j];
      n.aux[i] = s;
      if (s < eps) {
        std::fill(y + i * m, y + (i + 1) * m, S(0));
      } else {
        const S inv = S(1) / s;
        for (int64_t j = 0; j < m; ++j) y[i * m + j] = xv[i * m + j] * inv;
      }
    }
    return finish(id);
  }

  /// out[g,:] = sum_j weights[g*m+j] * values[g*m+j,:].
  int group_weighted_sum(int values, int weights, int64_t m) {
    Node& nv = nodes_[values];
    Node& nw = nodes_[weights];
    if (nw.numel() != nv.rows) throw std::invalid_argument("gws: weight count != value rows");
    if (nv.rows % m != 0) throw std::invalid_argument("gws: rows not divisible by group");
    const int64_t g = nv.rows / m;
    int id = make_node(Op::GroupWeightedSum, {values, weights}, g, nv.cols);
    nodes_[id].i0 = static_cast<int>(m);
    const S* vv = nodes_[values].val;
    const S* wv = nodes_[weights].val;
    S* y = nodes_[id].val;
    const int64_t d = nv.cols;
    for (int64_t i = 0; i < g; ++i) {
      S* out = y + i * d;
      std::fill(out, out + d, S(0));
      for (int64_t j = 0; j < m; ++j) {
        const S w = wv[i * m + j];
        const S* row = vv + (i * m + j) * d;
        for (int64_t k = 0; k < d; ++k) out[k] += w * row[k];
      }
    }
    return finish(id);
  }

  // ---- row-wise vector ops on [g, d] ----

  int rows_l2_normalize(int x) {
    Node& nx = nodes_[x];
    int id = make_node(Op::RowsL2Normalize, {x}, nx.rows, nx.cols);
    Node& n = nodes_[id];
    n.aux = arena_alloc(nx.rows);
    const S* xv = nodes_[x].val;
    S* y = n.val;
    const int64_t d = nx.cols;
    for (int64_t r = 0; r < nx.rows; ++r) {
      S s = 0;
      for (int64_t k = 0; k < d; ++k) s += xv[r * d + k] * xv[r * d + k];
      const S nrm = std::sqrt(s);
      n.aux[r] = nrm;
      if (nrm > S(0)) {
        const S inv = S(1) / nrm;
        for (int64_t k = 0; k < d; ++k) y[r * d + k] = xv[r * d + k] * inv;
      } else {
        std::fill(y + r * d, y + (r + 1) * d, S(0));
      }
    }
    return finish(id);
  }

  /// Cosine similarity per row; rows where either side has (near-)zero norm
  /// yield 0 with zero gradient.
  int rows_cosine(int a, int b) {
    Node& na = nodes_[a];
    Node& nb = nodes_[b];
    if (!(na.rows == nb.rows && na.cols == nb.cols))
      throw std::invalid_argument("cosine: shape mismatch");
    int id = make_node(Op::RowsCosine, {a, b}, na.rows, 1);
    Node& n = nodes_[id];
    n.aux = arena_alloc(na.rows * 3);
    const S* av = nodes_[a].val;
    const S* bv = nodes_[b].val;
    S* y = n.val;
    const int64_t d = na.cols;
    for (int64_t r = 0; r < na.rows; ++r) {
      S saa = 0, sbb = 0, sab = 0;
      for (int64_t k = 0; k < d; ++k) {
        const S x = av[r * d + k], z = bv[r * d + k];
        saa += x * x;
        sbb += z * z;
        sab += x * z;
      }
      const S nrm_a = std::sqrt(saa), nrm_b = std::sqrt(sbb);
      n.aux[r * 3] = nrm_a;
      n.aux[r * 3 + 1] = nrm_b;
      n.aux[r * 3 + 2] = sab;
      y[r] = (nrm_a > kNormEps && nrm_b > kNormEps) ? sab / (nrm_a * nrm_b) : S(0);
    }
    return finish(id);
  }

  /// Row softmax of x*inv_temp, max-shifted for stability.
  int rows_softmax(int x, S inv_temp) {
    Node& nx = nodes_[x];
    int id = make_node(Op::RowsSoftmax, {x}, nx.rows, nx.cols);
    Node& n = nodes_[id];
    n.a0 = inv_temp;
    const S* xv = nodes_[x].val;
    S* y = n.val;
    const int64_t d = nx.cols;
    for (int64_t r = 0; r < nx.rows; ++r) {
      S mx = xv[r * d];
      for (int64_t k = 1; k < d; ++k) mx = std::max(mx, xv[r * d + k]);
      S s = 0;
      for (int64_t k = 0; k < d; ++k) {
        const S e = std::exp((xv[r * d + k] - mx) * inv_temp);
        y[r * d + k] = e;
        s += e;
      }
      const S inv = S(1) / s;
      for (int64_t k = 0; k < d; ++k) y[r * d + k] *= inv;
    }
    return finish(id);
  }

  // ---- access ----

  int64_t num_nodes() const { return static_cast<int64_t>(nodes_.size()); }
  int64_t rows(int id) const { return nodes_[id].rows; }
  int64_t cols(int id) const { return nodes_[id].cols; }
  std::span<const S> values(int id) const {
    return {nodes_[id].val, static_cast<size_t>(nodes_[id].numel())};
  }
  S value0(int id) const { return nodes_[id].val[0]; }
  std::span<const S> grad(int id) const {
    const Node& n = nodes_[id];
    if (!n.grad) throw std::logic_error("grad: not computed for node");
    return {n.grad, static_cast<size_t>(n.numel())};
  }
  /// Per-group sums recorded by group_normalize.
  std::span<const S> group_sums(int id) const {
    const Node& n = nodes_[id];
    return {n.aux, static_cast<size_t>(n.numel() / n.i0)};
  }

  Tensor<S> value_tensor(int id) const {
    Tensor<S> t(nodes_[id].rows, nodes_[id].cols);
    std::copy(values(id).begin(), values(id).end(), t.data.begin());
    return t;
  }

  void check_finite(int id) const {
    for (S x : values(id))
      if (!std::isfinite(static_cast<double>(x)))
        throw NonFiniteError(id, "non-finite value in node " + std::to_string(id) + " (" +
                                     op_name(nodes_[id].op) + ")");
  }

  // ---- backward ----

  /// Accumulates d(root)/d(param) into every reachable parameter and
  /// gradient-requiring leaf. root must be scalar.
  void backward(int root) {
    if (nodes_[root].numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    std::vector<uint8_t> reach(nodes_.size(), 0);
    std::vector<int> stack{root};
    reach[root] = 1;
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      auto visit = [&](int in) {
        if (in >= 0 && !reach[in] && nodes_[in].requires_grad) {
          reach[in] = 1;
          stack.push_back(in);
        }
      };
      for (int in : nodes_[id].in) visit(in);
      for (int in : nodes_[id].in_list) visit(in);
    }
    ensure_grad(root);
    nodes_[root].grad[0] = S(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!reach[id] || !n.requires_grad || !n.grad) continue;
      backward_node(id);
    }
  }

 private:
  enum class Op {
    Leaf, Add, Sub, Mul, Affine, Relu, Sigmoid, Log, Matmul, Linear, Interp,
    ConcatCols, SliceCols, SliceRows, GroupSum, GroupNormalize, GroupWeightedSum,
    RowsL2Normalize, RowsCosine, RowsSoftmax,
  };

  static constexpr S kNormEps = static_cast<S>(1e-12);

  struct Node {
    Op op = Op::Leaf;
    std::array<int, 3> in{{-1, -1, -1}};
    std::vector<int> in_list;
    int64_t rows = 0, cols = 0;
    S* val = nullptr;
    S* grad = nullptr;
    S* aux = nullptr;
    S a0 = 0, a1 = 0;
    int i0 = 0;
    std::shared_ptr<const InterpPlan<S>> plan;
    Param<S>* pref = nullptr;
    bool requires_grad = false;
    int64_t numel() const { return rows * cols; }
  };

  static const char* op_name(Op op) {
    switch (op) {
      case Op::Leaf: return "leaf";
      case Op::Add: return "add";
      case Op::Sub: return "sub";
      case Op::Mul: return "mul";
      case Op::Affine: return "affine";
      case Op::Relu: return "relu";
      case Op::Sigmoid: return "sigmoid";
      case Op::Log: return "log";
      case Op::Matmul: return "matmul";
      case Op::Linear: return "linear";
      case Op::Interp: return "interp";
      case Op::ConcatCols: return "concat_cols";
      case Op::SliceCols: return "slice_cols";
      case Op::SliceRows: return "slice_rows";
      case Op::GroupSum: return "group_sum";
      case Op::GroupNormalize: return "group_normalize";
      case Op::GroupWeightedSum: return "group_weighted_sum";
      case Op::RowsL2Normalize: return "rows_l2_normalize";
      case Op::RowsCosine: return "rows_cosine";
      case Op::RowsSoftmax: return "rows_softmax";
    }
    return "?";
  }

  static void check_group(const Node& n, int64_t m) {
    if (m <= 0 || n.numel() % m != 0)
      throw std::invalid_argument("group op: size does not divide element count");
  }

  // Bump arena; blocks survive until tape destruction.
  S* arena_alloc(int64_t n) {
    if (n <= 0) n = 1;
    if (blocks_.empty() || block_used_ + n > block_cap_) {
      block_cap_ = std::max<int64_t>(n, int64_t(1) << 20);
      blocks_.push_back(std::make_unique<S[]>(static_cast<size_t>(block_cap_)));
      block_used_ = 0;
    }
    S* p = blocks_.back().get() + block_used_;
    block_used_ += n;
    return p;
  }

  S* arena_zeros(int64_t n) {
    S* p = arena_alloc(n);
    std::memset(p, 0, sizeof(S) * static_cast<size_t>(n));
    return p;
  }

  int make_leaf(int64_t r, int64_t c, const S* src, bool requires_grad, Param<S>* pref) {
    Node n;
    n.op = Op::Leaf;
    n.rows = r;
    n.cols = c;
    n.requires_grad = requires_grad;
    n.pref = pref;
    if (pref) {
      n.val = pref->value.data.data();
      n.grad = pref->grad.data.data();
    } else {
      n.val = arena_alloc(r * c);
      std::memcpy(n.val, src, sizeof(S) * static_cast<size_t>(r * c));
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int make_node(Op op, std::initializer_list<int> ins, int64_t r, int64_t c) {
    Node n;
    n.op = op;
    n.rows = r;
    n.cols = c;
    int k = 0;
    for (int in : ins) {
      if (k < 3) n.in[k++] = in;
      if (in >= 0) n.requires_grad |= nodes_[in].requires_grad;
    }
    n.val = arena_alloc(r * c);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int finish(int id) {
    if (finite_checks_) check_finite(id);
    return id;
  }

  int binary(Op op, int a, int b) {
    Node& na = nodes_[a];
    Node& nb = nodes_[b];
    if (!(na.rows == nb.rows && na.cols == nb.cols))
      throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch");
    int id = make_node(op, {a, b}, na.rows, na.cols);
    const S* av = nodes_[a].val;
    const S* bv = nodes_[b].val;
    S* y = nodes_[id].val;
    const int64_t n = nodes_[id].numel();
    switch (op) {
      case Op::Add: for (int64_t i = 0; i < n; ++i) y[i] = av[i] + bv[i]; break;
      case Op::Sub: for (int64_t i = 0; i < n; ++i) y[i] = av[i] - bv[i]; break;
      case Op::Mul: for (int64_t i = 0; i < n; ++i) y[i] = av[i] * bv[i]; break;
      default: throw std::logic_error("binary: bad op");
    }
    return finish(id);
  }

  void gemm(S* out, const S* a, const S* b, int64_t n, int64_t k, int64_t m) {
    CMatMap A(a, n, k), B(b, k, m);
    MatMap C(out, n, m);
    if (pool_ && n >= 64) {
      pool_->for_rows(n, [&](int64_t lo, int64_t hi) {
        C.middleRows(lo, hi - lo).noalias() = A.middleRows(lo, hi - lo) * B;
      });
    } else {
      C.noalias() = A * B;
    }
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad = arena_zeros(n.numel());
  }

  S* grad_of_input(int id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    ensure_grad(id);
    return n.grad;
  }

  void backward_node(int id) {
    Node& n = nodes_[id];
    const S* g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        if (n.pref && n.pref->sparse_rows) break;  // rows marked by Interp
        break;
      case Op::Add: {
        for (int s = 0; s < 2; ++s)
          if (S* gi = grad_of_input(n.in[s]))
            for (int64_t i = 0; i < n.numel(); ++i) gi[i] += g[i];
        break;
      }
      case Op::Sub: {
        if (S* ga = grad_of_input(n.in[0]))
          for (int64_t i = 0; i < n.numel(); ++i) ga[i] += g[i];
        if (S* gb = grad_of_input(n.in[1]))
          for (int64_t i = 0; i < n.numel(); ++i) gb[i] -= g[i];
        break;
      }
      case Op::Mul: {
        const S* av = nodes_[n.in[0]].val;
        const S* bv = nodes_[n.in[1]].val;
        if (S* ga = grad_of_input(n.in[0]))
          for (int64_t i = 0; i < n.numel(); ++i) ga[i] += g[i] * bv[i];
        if (S* gb = grad_of_input(n.in[1]))
          for (int64_t i = 0; i < n.numel(); ++i) gb[i] += g[i] * av[i];
        break;
      }
      case Op::Affine: {
        if (S* gi = grad_of_input(n.in[0]))
          for (int64_t i = 0; i < n.numel(); ++i) gi[i] += n.a0 * g[i];
        break;
      }
      case Op::Relu: {
        if (S* gi = grad_of_input(n.in[0])) {
          const S* y = n.val;
          for (int64_t i = 0; i < n.numel(); ++i) gi[i] += (y[i] > S(0)) ? g[i] : S(0);
        }
        break;
      }
      case Op::Sigmoid: {
        if (S* gi = grad_of_input(n.in[0])) {
          const S* y = n.val;
          for (int64_t i = 0; i < n.numel(); ++i) gi[i] += g[i] * y[i] * (S(1) - y[i]);
        }
        break;
      }
      case Op::Log: {
        if (S* gi = grad_of_input(n.in[0])) {
          const S* x = nodes_[n.in[0]].val;
          for (int64_t i = 0; i < n.numel(); ++i) gi[i] += g[i] / x[i];
        }
        break;
      }
      case Op::Matmul:
      case Op::Linear: {
        const Node& na = nodes_[n.in[0]];
        const Node& nb = nodes_[n.in[1]];
        CMatMap A(na.val, na.rows, na.cols), B(nb.val, nb.rows, nb.cols);
        CMatMap G(g, n.rows, n.cols);
        if (S* ga = grad_of_input(n.in[0])) {
          MatMap GA(ga, na.rows, na.cols);
          if (pool_ && na.rows >= 64) {
            pool_->for_rows(na.rows, [&](int64_t lo, int64_t hi) {
              GA.middleRows(lo, hi - lo).noalias() += G.middleRows(lo, hi - lo) * B.transpose();
            });
          } else {
            GA.noalias() += G * B.transpose();
          }
        }
        if (S* gb = grad_of_input(n.in[1])) {
          MatMap GB(gb, nb.rows, nb.cols);
          if (pool_ && na.rows >= 256) {
            // Fixed block grid; partials reduced in block order.
            const int nb_blocks = ThreadPool::kGridBlocks;
            Mat partials = Mat::Zero(nb_blocks * nb.rows, nb.cols);
            pool_->for_blocks(na.rows, nb_blocks, [&](int blk, int64_t lo, int64_t hi) {
              partials.middleRows(blk * nb.rows, nb.rows).noalias() =
                  A.middleRows(lo, hi - lo).transpose() * G.middleRows(lo, hi - lo);
            });
            for (int blk = 0; blk < nb_blocks; ++blk)
              GB.noalias() += partials.middleRows(blk * nb.rows, nb.rows);
          } else {
            GB.noalias() += A.transpose() * G;
          }
        }
        if (n.op == Op::Linear && n.in[2] >= 0) {
          if (S* gc = grad_of_input(n.in[2])) {
            for (int64_t r = 0; r < n.rows; ++r)
              for (int64_t c = 0; c < n.cols; ++c) gc[c] += g[r * n.cols + c];
          }
        }
        break;
      }
      case Op::Interp: {
        Node& nt = nodes_[n.in[0]];
        if (S* gt = grad_of_input(n.in[0])) {
          const auto& pl = *n.plan;
          const int64_t f = nt.cols;
          Param<S>* p = nt.pref;
          const bool mark = p && p->sparse_rows;
          for (int64_t i = 0; i < n.rows; ++i) {
            const S* go = g + i * f;
            for (int c = 0; c < 8; ++c) {
              const int64_t row = pl.idx[i * 8 + c];
              const S wc = pl.w[i * 8 + c];
              if (mark) p->mark_row(row);
              S* dst = gt + row * f;
              for (int64_t k = 0; k < f; ++k) dst[k] += wc * go[k];
            }
          }
        }
        break;
      }
      case Op::ConcatCols: {
        int64_t off = 0;
        for (int x : n.in_list) {
          Node& nx = nodes_[x];
          if (S* gx = grad_of_input(x)) {
            for (int64_t r = 0; r < n.rows; ++r)
              for (int64_t c = 0; c < nx.cols; ++c)
                gx[r * nx.cols + c] += g[r * n.cols + off + c];
          }
          off += nx.cols;
        }
        break;
      }
      case Op::SliceCols: {
        Node& nx = nodes_[n.in[0]];
        if (S* gx = grad_of_input(n.in[0])) {
          for (int64_t r = 0; r < n.rows; ++r)
            for (int64_t c = 0; c < n.cols; ++c)
              gx[r * nx.cols + n.i0 + c] += g[r * n.cols + c];
        }
        break;
      }
      case Op::SliceRows: {
        Node& nx = nodes_[n.in[0]];
        if (S* gx = grad_of_input(n.in[0])) {
          for (int64_t i = 0; i < n.numel(); ++i)
            gx[static_cast<int64_t>(n.i0) * nx.cols + i] += g[i];
        }
        break;
      }
      case Op::GroupSum: {
        if (S* gx = grad_of_input(n.in[0])) {
          const int64_t m = n.i0;
          for (int64_t i = 0; i < n.rows; ++i)
            for (int64_t j = 0; j < m; ++j) gx[i * m + j] += g[i];
        }
        break;
      }
      case Op::GroupNormalize: {
        if (S* gx = grad_of_input(n.in[0])) {
          const int64_t m = n.i0;
          const int64_t groups = n.numel() / m;
          const S* y = n.val;
          for (int64_t i = 0; i < groups; ++i) {
            const S s = n.aux[i];
            if (s < n.a0) continue;  // invalid group: zero gradient
            S dot = 0;
            for (int64_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
            const S inv = S(1) / s;
            for (int64_t j = 0; j < m; ++j) gx[i * m + j] += (g[i * m + j] - dot) * inv;
          }
        }
        break;
      }
      case Op::GroupWeightedSum: {
        const Node& nv = nodes_[n.in[0]];
        const Node& nw = nodes_[n.in[1]];
        const int64_t m = n.i0;
        const int64_t d = n.cols;
        const S* vv = nv.val;
        const S* wv = nw.val;
        S* gv = grad_of_input(n.in[0]);
        S* gw = grad_of_input(n.in[1]);
        for (int64_t i = 0; i < n.rows; ++i) {
          const S* go = g + i * d;
          for (int64_t j = 0; j < m; ++j) {
            const int64_t row = i * m + j;
            if (gv) {
              const S w = wv[row];
              for (int64_t k = 0; k < d; ++k) gv[row * d + k] += w * go[k];
            }
            if (gw) {
              S acc = 0;
              for (int64_t k = 0; k < d; ++k) acc += vv[row * d + k] * go[k];
              gw[row] += acc;
            }
          }
        }
        break;
      }
      case Op::RowsL2Normalize: {
        if (S* gx = grad_of_input(n.in[0])) {
          const int64_t d = n.cols;
          const S* y = n.val;
          for (int64_t r = 0; r < n.rows; ++r) {
            const S nrm = n.aux[r];
            if (nrm <= kNormEps) continue;
            S dot = 0;
            for (int64_t k = 0; k < d; ++k) dot += g[r * d + k] * y[r * d + k];
            const S inv = S(1) / nrm;
            for (int64_t k = 0; k < d; ++k)
              gx[r * d + k] += (g[r * d + k] - dot * y[r * d + k]) * inv;
          }
        }
        break;
      }
      case Op::RowsCosine: {
        const Node& na = nodes_[n.in[0]];
        const int64_t d = na.cols;
        const S* av = nodes_[n.in[0]].val;
        const S* bv = nodes_[n.in[1]].val;
        S* ga = grad_of_input(n.in[0]);
        S* gb = grad_of_input(n.in[1]);
        for (int64_t r = 0; r < n.rows; ++r) {
          const S nrm_a = n.aux[r * 3], nrm_b = n.aux[r * 3 + 1], dot = n.aux[r * 3 + 2];
          if (nrm_a <= kNormEps || nrm_b <= kNormEps) continue;
          const S gr = g[r];
          const S inv_ab = S(1) / (nrm_a * nrm_b);
          if (ga) {
            const S ca = dot / (nrm_a * nrm_a);
            for (int64_t k = 0; k < d; ++k)
              ga[r * d + k] += gr * (bv[r * d + k] - ca * av[r * d + k]) * inv_ab;
          }
          if (gb) {
            const S cb = dot / (nrm_b * nrm_b);
            for (int64_t k = 0; k < d; ++k)
              gb[r * d + k] += gr * (av[r * d + k] - cb * bv[r * d + k]) * inv_ab;
          }
        }
        break;
      }
      case Op::RowsSoftmax: {
        if (S* gx = grad_of_input(n.in[0])) {
          const int64_t d = n.cols;
          const S* y = n.val;
          for (int64_t r = 0; r < n.rows; ++r) {
            S dot = 0;
            for (int64_t k = 0; k < d; ++k) dot += g[r * d + k] * y[r * d + k];
            for (int64_t k = 0; k < d; ++k)
              gx[r * d + k] += n.a0 * y[r * d + k] * (g[r * d + k] - dot);
          }
        }
        break;
      }
    }
  }

  ThreadPool* pool_;
  bool finite_checks_;
  std::vector<Node> nodes_;
  std::unordered_map<Param<S>*, int> param_nodes_;
  std::vector<std::unique_ptr<S[]>> blocks_;
  int64_t block_cap_ = 0;
  int64_t block_used_ = 0;
};

}  // namespace nlmap
