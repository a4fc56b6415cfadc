#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vkd/error.hpp"
#include "vkd/rng.hpp"

namespace vkd {

// Dense row-major tensor with reverse-mode autodiff, templated on the scalar
// so the same kernels run in float for training and in double for
// finite-difference shadow checks. Eigen backs the matrix products; everything
// else is explicit loops with a fixed reduction order, so identical inputs
// give bitwise-identical outputs.

enum class Source : uint8_t { Teacher, Student };

template <typename S>
struct TensorT;

template <typename S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

template <typename S>
struct TensorT {
  std::vector<int> dims;
  std::vector<S> data;
  bool requires_grad = false;
  std::vector<S> grad;  // empty until a backward pass touches this node

  // graph record: inputs this value was computed from, and the closure that
  // scatters this node's gradient into theirs
  std::vector<TensorPtrT<S>> parents;
  std::function<void()> backward_fn;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
  }
  int rank() const { return static_cast<int>(dims.size()); }
  int rows2d() const { return static_cast<int>(numel() / dims.back()); }
  int cols2d() const { return dims.back(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void clear_grad() {
    grad.clear();
    grad.shrink_to_fit();
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << "]";
    return os.str();
  }
};

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatX<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatX<S>>;

namespace detail {

inline int64_t product(const std::vector<int>& dims) {
  int64_t n = 1;
  for (int d : dims) {
    if (d <= 0) fail("shape-mismatch", "non-positive dimension");
    n *= d;
  }
  return n;
}

}  // namespace detail

template <typename S>
TensorPtrT<S> tensor(std::vector<int> dims, bool requires_grad = false) {
  auto t = std::make_shared<TensorT<S>>();
  t->dims = std::move(dims);
  t->data.assign(static_cast<size_t>(detail::product(t->dims)), S(0));
  t->requires_grad = requires_grad;
  return t;
}

template <typename S>
TensorPtrT<S> tensor(std::vector<int> dims, std::vector<S> values, bool requires_grad = false) {
  auto t = tensor<S>(std::move(dims), requires_grad);
  if (static_cast<int64_t>(values.size()) != t->numel())
    fail("shape-mismatch", "value count does not match dims");
  t->data = std::move(values);
  return t;
}

template <typename S>
TensorPtrT<S> scalar_tensor(S value, bool requires_grad = false) {
  return tensor<S>({1}, {value}, requires_grad);
}

template <typename S>
TensorPtrT<S> full(std::vector<int> dims, S value) {
  auto t = tensor<S>(std::move(dims));
  std::fill(t->data.begin(), t->data.end(), value);
  return t;
}

// Glorot-uniform fill over [-sqrt(6/(fan_in+fan_out)), +).
template <typename S>
void fill_xavier(TensorT<S>& t, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
  for (auto& x : t.data) x = static_cast<S>((rng.uniform() * 2.0 - 1.0) * limit);
}

template <typename S>
bool all_finite(const TensorT<S>& t) {
  for (S x : t.data)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// 2-D views (leading dims flattened into rows, last dim = columns)
template <typename S>
MatMap<S> as_matrix(TensorT<S>& t) {
  return MatMap<S>(t.data.data(), t.rows2d(), t.cols2d());
}
template <typename S>
ConstMatMap<S> as_matrix(const TensorT<S>& t) {
  return ConstMatMap<S>(t.data.data(), t.rows2d(), t.cols2d());
}
template <typename S>
MatMap<S> grad_matrix(TensorT<S>& t) {
  t.ensure_grad();
  return MatMap<S>(t.grad.data(), t.rows2d(), t.cols2d());
}

namespace detail {

template <typename S>
TensorPtrT<S> make_node(std::vector<int> dims, std::vector<TensorPtrT<S>> parents) {
  auto out = tensor<S>(std::move(dims));
  for (const auto& p : parents) out->requires_grad = out->requires_grad || p->requires_grad;
  if (out->requires_grad) out->parents = std::move(parents);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph traversal
// ---------------------------------------------------------------------------

// Topological order of the DAG below root (leaves first, root last). Each node
// appears exactly once; cycles are impossible because ops only link to
// already-built tensors.
template <typename S>
std::vector<TensorPtrT<S>> topo_order(const TensorPtrT<S>& root) {
  std::vector<TensorPtrT<S>> order;
  std::unordered_set<const TensorT<S>*> seen;
  std::vector<std::pair<TensorPtrT<S>, size_t>> stack;
  if (!seen.insert(root.get()).second) return order;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Reverse-mode sweep from a scalar root. Gradients of every node in the
// subgraph are reset first, then accumulated (shared inputs add up).
template <typename S>
void backward(const TensorPtrT<S>& root) {
  if (root->numel() != 1) fail("shape-mismatch", "backward root must be scalar");
  auto order = topo_order(root);
  for (auto& node : order) node->grad.assign(node->data.size(), S(0));
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
TensorPtrT<S> matmul(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->dims[1] != b->dims[0])
    fail("shape-mismatch", "matmul " + a->shape_str() + " x " + b->shape_str());
  auto out = detail::make_node<S>({a->dims[0], b->dims[1]}, {a, b});
  as_matrix(*out).noalias() = as_matrix(*a) * as_matrix(*b);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [a, b, o]() {
      ConstMatMap<S> g(o->grad.data(), o->dims[0], o->dims[1]);
      if (a->requires_grad) grad_matrix(*a).noalias() += g * as_matrix(*b).transpose();
      if (b->requires_grad) grad_matrix(*b).noalias() += as_matrix(*a).transpose() * g;
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> transpose2d(const TensorPtrT<S>& x) {
  if (x->rank() != 2) fail("shape-mismatch", "transpose2d wants rank 2, got " + x->shape_str());
  auto out = detail::make_node<S>({x->dims[1], x->dims[0]}, {x});
  as_matrix(*out) = as_matrix(*x).transpose();
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      ConstMatMap<S> g(o->grad.data(), o->dims[0], o->dims[1]);
      grad_matrix(*x) += g.transpose();
    };
  }
  return out;
}

// Batched matmul over leading dim: [B,m,k] x [B,k,n] -> [B,m,n]
template <typename S>
TensorPtrT<S> bmm(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
  if (a->rank() != 3 || b->rank() != 3 || a->dims[0] != b->dims[0] || a->dims[2] != b->dims[1])
    fail("shape-mismatch", "bmm " + a->shape_str() + " x " + b->shape_str());
  const int B = a->dims[0], m = a->dims[1], k = a->dims[2], n = b->dims[2];
  auto out = detail::make_node<S>({B, m, n}, {a, b});
  for (int i = 0; i < B; ++i) {
    ConstMatMap<S> am(a->data.data() + int64_t(i) * m * k, m, k);
    ConstMatMap<S> bm(b->data.data() + int64_t(i) * k * n, k, n);
    MatMap<S> om(out->data.data() + int64_t(i) * m * n, m, n);
    om.noalias() = am * bm;
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [a, b, o, B, m, k, n]() {
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      for (int i = 0; i < B; ++i) {
        ConstMatMap<S> g(o->grad.data() + int64_t(i) * m * n, m, n);
        ConstMatMap<S> am(a->data.data() + int64_t(i) * m * k, m, k);
        ConstMatMap<S> bm(b->data.data() + int64_t(i) * k * n, k, n);
        if (a->requires_grad) {
          MatMap<S> ag(a->grad.data() + int64_t(i) * m * k, m, k);
          ag.noalias() += g * bm.transpose();
        }
        if (b->requires_grad) {
          MatMap<S> bg(b->grad.data() + int64_t(i) * k * n, k, n);
          bg.noalias() += am.transpose() * g;
        }
      }
    };
  }
  return out;
}

// C = A * B^T per batch: [B,m,k] x [B,n,k] -> [B,m,n]
template <typename S>
TensorPtrT<S> bmm_nt(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
  if (a->rank() != 3 || b->rank() != 3 || a->dims[0] != b->dims[0] || a->dims[2] != b->dims[2])
    fail("shape-mismatch", "bmm_nt " + a->shape_str() + " x " + b->shape_str());
  const int B = a->dims[0], m = a->dims[1], k = a->dims[2], n = b->dims[1];
  auto out = detail::make_node<S>({B, m, n}, {a, b});
  for (int i = 0; i < B; ++i) {
    ConstMatMap<S> am(a->data.data() + int64_t(i) * m * k, m, k);
    ConstMatMap<S> bm(b->data.data() + int64_t(i) * n * k, n, k);
    MatMap<S> om(out->data.data() + int64_t(i) * m * n, m, n);
    om.noalias() = am * bm.transpose();
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [a, b, o, B, m, k, n]() {
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      for (int i = 0; i < B; ++i) {
        ConstMatMap<S> g(o->grad.data() + int64_t(i) * m * n, m, n);
        ConstMatMap<S> am(a->data.data() + int64_t(i) * m * k, m, k);
        ConstMatMap<S> bm(b->data.data() + int64_t(i) * n * k, n, k);
        if (a->requires_grad) {
          MatMap<S> ag(a->grad.data() + int64_t(i) * m * k, m, k);
          ag.noalias() += g * bm;
        }
        if (b->requires_grad) {
          MatMap<S> bg(b->grad.data() + int64_t(i) * n * k, n, k);
          bg.noalias() += g.transpose() * am;
        }
      }
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> add(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
  if (a->dims != b->dims) fail("shape-mismatch", "add " + a->shape_str() + " + " + b->shape_str());
  auto out = detail::make_node<S>(a->dims, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [a, b, o]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) b->grad[i] += o->grad[i];
      }
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> sub(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
  if (a->dims != b->dims) fail("shape-mismatch", "sub " + a->shape_str() + " - " + b->shape_str());
  auto out = detail::make_node<S>(a->dims, {a, b});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [a, b, o]() {
      if (a->requires_grad) {
        a->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) a->grad[i] += o->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) b->grad[i] -= o->grad[i];
      }
    };
  }
  return out;
}

// x[..., d] + bias[d], the only broadcast in the library
template <typename S>
TensorPtrT<S> add_bias(const TensorPtrT<S>& x, const TensorPtrT<S>& bias) {
  if (bias->rank() != 1 || bias->dims[0] != x->cols2d())
    fail("shape-mismatch", "add_bias " + x->shape_str() + " + " + bias->shape_str());
  const int rows = x->rows2d(), cols = x->cols2d();
  auto out = detail::make_node<S>(x->dims, {x, bias});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out->data[size_t(r) * cols + c] = x->data[size_t(r) * cols + c] + bias->data[c];
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, bias, o, rows, cols]() {
      if (x->requires_grad) {
        x->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i];
      }
      if (bias->requires_grad) {
        bias->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) bias->grad[c] += o->grad[size_t(r) * cols + c];
      }
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> scale(const TensorPtrT<S>& x, S factor) {
  auto out = detail::make_node<S>(x->dims, {x});
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * factor;
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o, factor]() {
      x->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i] * factor;
    };
  }
  return out;
}

// GELU, tanh approximation
template <typename S>
TensorPtrT<S> gelu(const TensorPtrT<S>& x) {
  constexpr double kAlpha = 0.7978845608028653558798921198687;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  auto out = detail::make_node<S>(x->dims, {x});
  for (size_t i = 0; i < out->data.size(); ++i) {
    const double v = static_cast<double>(x->data[i]);
    const double t = std::tanh(kAlpha * (v + kBeta * v * v * v));
    out->data[i] = static_cast<S>(0.5 * v * (1.0 + t));
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      x->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) {
        const double v = static_cast<double>(x->data[i]);
        const double u = kAlpha * (v + kBeta * v * v * v);
        const double t = std::tanh(u);
        const double du = kAlpha * (1.0 + 3.0 * kBeta * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        x->grad[i] += o->grad[i] * static_cast<S>(d);
      }
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> tanh_op(const TensorPtrT<S>& x) {
  auto out = detail::make_node<S>(x->dims, {x});
  for (size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = static_cast<S>(std::tanh(static_cast<double>(x->data[i])));
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      x->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) {
        const S t = o->data[i];
        x->grad[i] += o->grad[i] * (S(1) - t * t);
      }
    };
  }
  return out;
}

// Row-wise softmax over the last axis, max-subtracted for stability.
template <typename S>
TensorPtrT<S> softmax_rows(const TensorPtrT<S>& x) {
  const int rows = x->rows2d(), cols = x->cols2d();
  auto out = detail::make_node<S>(x->dims, {x});
  for (int r = 0; r < rows; ++r) {
    const S* in = x->data.data() + size_t(r) * cols;
    S* o = out->data.data() + size_t(r) * cols;
    S mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    S sum = S(0);
    for (int c = 0; c < cols; ++c) {
      o[c] = static_cast<S>(std::exp(static_cast<double>(in[c] - mx)));
      sum += o[c];
    }
    const S inv = S(1) / sum;
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o, rows, cols]() {
      x->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const S* s = o->data.data() + size_t(r) * cols;
        const S* g = o->grad.data() + size_t(r) * cols;
        S dot = S(0);
        for (int c = 0; c < cols; ++c) dot += s[c] * g[c];
        S* xg = x->grad.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) xg[c] += s[c] * (g[c] - dot);
      }
    };
  }
  return out;
}

// Per-row normalization over the last axis followed by the gain/bias affine.
template <typename S>
TensorPtrT<S> layer_norm(const TensorPtrT<S>& x, const TensorPtrT<S>& gain,
                         const TensorPtrT<S>& bias, S eps) {
  const int rows = x->rows2d(), cols = x->cols2d();
  if (gain->rank() != 1 || gain->dims[0] != cols || bias->rank() != 1 || bias->dims[0] != cols)
    fail("shape-mismatch", "layer_norm affine params must be [" + std::to_string(cols) + "]");
  if (eps <= S(0)) fail("shape-mismatch", "layer_norm eps must be positive");
  auto out = detail::make_node<S>(x->dims, {x, gain, bias});
  // inv std per row is cached for the backward pass
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  auto normed = std::make_shared<std::vector<S>>(x->data.size());
  for (int r = 0; r < rows; ++r) {
    const S* in = x->data.data() + size_t(r) * cols;
    S mean = S(0);
    for (int c = 0; c < cols; ++c) mean += in[c];
    mean /= S(cols);
    S var = S(0);
    for (int c = 0; c < cols; ++c) {
      const S d = in[c] - mean;
      var += d * d;
    }
    var /= S(cols);
    const S istd = S(1) / static_cast<S>(std::sqrt(static_cast<double>(var + eps)));
    (*inv_std)[r] = istd;
    S* nr = normed->data() + size_t(r) * cols;
    S* o = out->data.data() + size_t(r) * cols;
    for (int c = 0; c < cols; ++c) {
      nr[c] = (in[c] - mean) * istd;
      o[c] = nr[c] * gain->data[c] + bias->data[c];
    }
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, gain, bias, o, rows, cols, inv_std, normed]() {
      if (x->requires_grad) x->ensure_grad();
      if (gain->requires_grad) gain->ensure_grad();
      if (bias->requires_grad) bias->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const S* g = o->grad.data() + size_t(r) * cols;
        const S* nr = normed->data() + size_t(r) * cols;
        if (gain->requires_grad)
          for (int c = 0; c < cols; ++c) gain->grad[c] += g[c] * nr[c];
        if (bias->requires_grad)
          for (int c = 0; c < cols; ++c) bias->grad[c] += g[c];
        if (x->requires_grad) {
          // dx = (gy - mean(gy) - n * mean(gy*n)) * inv_std, gy = g * gain
          S mean_gy = S(0), mean_gyn = S(0);
          for (int c = 0; c < cols; ++c) {
            const S gy = g[c] * gain->data[c];
            mean_gy += gy;
            mean_gyn += gy * nr[c];
          }
          mean_gy /= S(cols);
          mean_gyn /= S(cols);
          S* xg = x->grad.data() + size_t(r) * cols;
          for (int c = 0; c < cols; ++c) {
            const S gy = g[c] * gain->data[c];
            xg[c] += (gy - mean_gy - nr[c] * mean_gyn) * (*inv_std)[r];
          }
        }
      }
    };
  }
  return out;
}

// rows of `table` selected by id; backward scatter-adds into the table
template <typename S>
TensorPtrT<S> embedding_lookup(const TensorPtrT<S>& table, const std::vector<int>& ids) {
  if (table->rank() != 2) fail("shape-mismatch", "embedding table must be rank 2");
  const int vocab = table->dims[0], dim = table->dims[1];
  for (int id : ids)
    if (id < 0 || id >= vocab)
      fail("bad-token-id", "id " + std::to_string(id) + " outside table " + table->shape_str());
  auto out = detail::make_node<S>({static_cast<int>(ids.size()), dim}, {table});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->data.data() + size_t(ids[i]) * dim, dim, out->data.data() + i * dim);
  if (out->requires_grad) {
    auto* o = out.get();
    auto idx = std::make_shared<std::vector<int>>(ids);
    out->backward_fn = [table, o, idx, dim]() {
      table->ensure_grad();
      for (size_t i = 0; i < idx->size(); ++i) {
        const S* g = o->grad.data() + i * dim;
        S* tg = table->grad.data() + size_t((*idx)[i]) * dim;
        for (int c = 0; c < dim; ++c) tg[c] += g[c];
      }
    };
  }
  return out;
}

// per-position routing between two embedding tables by source tag
template <typename S>
TensorPtrT<S> dual_embedding_lookup(const TensorPtrT<S>& teacher_table,
                                    const TensorPtrT<S>& student_table,
                                    const std::vector<int>& ids, const std::vector<Source>& tags) {
  if (teacher_table->rank() != 2 || student_table->rank() != 2 ||
      teacher_table->dims[1] != student_table->dims[1])
    fail("shape-mismatch", "dual lookup tables disagree on embedding dim");
  if (ids.size() != tags.size()) fail("shape-mismatch", "ids/tags length mismatch");
  const int dim = teacher_table->dims[1];
  for (size_t i = 0; i < ids.size(); ++i) {
    const int vocab = (tags[i] == Source::Teacher ? teacher_table : student_table)->dims[0];
    if (ids[i] < 0 || ids[i] >= vocab)
      fail("bad-token-id", "id " + std::to_string(ids[i]) + " outside routed table");
  }
  auto out = detail::make_node<S>({static_cast<int>(ids.size()), dim},
                                  {teacher_table, student_table});
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& table = tags[i] == Source::Teacher ? teacher_table : student_table;
    std::copy_n(table->data.data() + size_t(ids[i]) * dim, dim, out->data.data() + i * dim);
  }
  if (out->requires_grad) {
    auto* o = out.get();
    auto idx = std::make_shared<std::vector<int>>(ids);
    auto tg = std::make_shared<std::vector<Source>>(tags);
    out->backward_fn = [teacher_table, student_table, o, idx, tg, dim]() {
      teacher_table->ensure_grad();
      student_table->ensure_grad();
      for (size_t i = 0; i < idx->size(); ++i) {
        const auto& table = (*tg)[i] == Source::Teacher ? teacher_table : student_table;
        const S* g = o->grad.data() + i * dim;
        S* dst = table->grad.data() + size_t((*idx)[i]) * dim;
        for (int c = 0; c < dim; ++c) dst[c] += g[c];
      }
    };
  }
  return out;
}

enum class Reduction { Mean, Sum };

// mean (or sum) over rows of -log softmax(logits)[label]
template <typename S>
TensorPtrT<S> cross_entropy(const TensorPtrT<S>& logits, const std::vector<int>& labels,
                            Reduction reduction = Reduction::Mean) {
  if (logits->rank() != 2) fail("shape-mismatch", "cross_entropy wants [positions x classes]");
  const int rows = logits->dims[0], cols = logits->dims[1];
  if (static_cast<int>(labels.size()) != rows)
    fail("shape-mismatch", "label count does not match logit rows");
  for (int y : labels)
    if (y < 0 || y >= cols) fail("bad-label", "label " + std::to_string(y) + " outside classes");
  auto out = detail::make_node<S>({1}, {logits});
  auto probs = std::make_shared<std::vector<S>>(logits->data.size());
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const S* in = logits->data.data() + size_t(r) * cols;
    S* p = probs->data() + size_t(r) * cols;
    S mx = in[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      p[c] = static_cast<S>(std::exp(static_cast<double>(in[c] - mx)));
      sum += static_cast<double>(p[c]);
    }
    const S inv = static_cast<S>(1.0 / sum);
    for (int c = 0; c < cols; ++c) p[c] *= inv;
    total += -std::log(static_cast<double>(p[labels[r]]));
  }
  const double w = reduction == Reduction::Mean ? 1.0 / rows : 1.0;
  out->data[0] = static_cast<S>(total * w);
  if (out->requires_grad) {
    auto* o = out.get();
    auto lab = std::make_shared<std::vector<int>>(labels);
    out->backward_fn = [logits, o, lab, probs, rows, cols, w]() {
      logits->ensure_grad();
      const S gw = o->grad[0] * static_cast<S>(w);
      for (int r = 0; r < rows; ++r) {
        const S* p = probs->data() + size_t(r) * cols;
        S* g = logits->grad.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) g[c] += gw * p[c];
        g[(*lab)[r]] -= gw;
      }
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> sum_all(const TensorPtrT<S>& x) {
  auto out = detail::make_node<S>({1}, {x});
  double acc = 0.0;
  for (S v : x->data) acc += static_cast<double>(v);
  out->data[0] = static_cast<S>(acc);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      x->ensure_grad();
      const S g = o->grad[0];
      for (size_t i = 0; i < x->data.size(); ++i) x->grad[i] += g;
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> sum_squares(const TensorPtrT<S>& x) {
  auto out = detail::make_node<S>({1}, {x});
  double acc = 0.0;
  for (S v : x->data) acc += static_cast<double>(v) * static_cast<double>(v);
  out->data[0] = static_cast<S>(acc);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      x->ensure_grad();
      const S g = o->grad[0];
      for (size_t i = 0; i < x->data.size(); ++i) x->grad[i] += S(2) * g * x->data[i];
    };
  }
  return out;
}

template <typename S>
TensorPtrT<S> reshape(const TensorPtrT<S>& x, std::vector<int> dims) {
  if (detail::product(dims) != x->numel())
    fail("shape-mismatch", "reshape " + x->shape_str() + " to incompatible size");
  auto out = detail::make_node<S>(std::move(dims), {x});
  out->data = x->data;
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o]() {
      x->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) x->grad[i] += o->grad[i];
    };
  }
  return out;
}

// [B,S,D] -> [B*H,S,D/H], heads made contiguous for batched attention
template <typename S>
TensorPtrT<S> split_heads(const TensorPtrT<S>& x, int heads) {
  if (x->rank() != 3 || x->dims[2] % heads != 0)
    fail("shape-mismatch", "split_heads on " + x->shape_str());
  const int B = x->dims[0], T = x->dims[1], D = x->dims[2], hd = D / heads;
  auto out = detail::make_node<S>({B * heads, T, hd}, {x});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy_n(x->data.data() + (size_t(b) * T + t) * D + size_t(h) * hd, hd,
                    out->data.data() + ((size_t(b) * heads + h) * T + t) * hd);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o, B, T, D, hd, heads]() {
      x->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int h = 0; h < heads; ++h) {
            const S* g = o->grad.data() + ((size_t(b) * heads + h) * T + t) * hd;
            S* xg = x->grad.data() + (size_t(b) * T + t) * D + size_t(h) * hd;
            for (int c = 0; c < hd; ++c) xg[c] += g[c];
          }
    };
  }
  return out;
}

// inverse of split_heads: [B*H,S,hd] -> [B,S,H*hd]
template <typename S>
TensorPtrT<S> merge_heads(const TensorPtrT<S>& x, int heads) {
  if (x->rank() != 3 || x->dims[0] % heads != 0)
    fail("shape-mismatch", "merge_heads on " + x->shape_str());
  const int B = x->dims[0] / heads, T = x->dims[1], hd = x->dims[2], D = heads * hd;
  auto out = detail::make_node<S>({B, T, D}, {x});
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      for (int h = 0; h < heads; ++h)
        std::copy_n(x->data.data() + ((size_t(b) * heads + h) * T + t) * hd, hd,
                    out->data.data() + (size_t(b) * T + t) * D + size_t(h) * hd);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o, B, T, D, hd, heads]() {
      x->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int h = 0; h < heads; ++h) {
            const S* g = o->grad.data() + (size_t(b) * T + t) * D + size_t(h) * hd;
            S* xg = x->grad.data() + ((size_t(b) * heads + h) * T + t) * hd;
            for (int c = 0; c < hd; ++c) xg[c] += g[c];
          }
    };
  }
  return out;
}

// one sequence position from every batch row: [B,S,D] -> [B,D]
template <typename S>
TensorPtrT<S> select_position(const TensorPtrT<S>& x, int position) {
  if (x->rank() != 3 || position < 0 || position >= x->dims[1])
    fail("shape-mismatch", "select_position " + std::to_string(position) + " from " + x->shape_str());
  const int B = x->dims[0], T = x->dims[1], D = x->dims[2];
  auto out = detail::make_node<S>({B, D}, {x});
  for (int b = 0; b < B; ++b)
    std::copy_n(x->data.data() + (size_t(b) * T + position) * D, D, out->data.data() + size_t(b) * D);
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [x, o, B, T, D, position]() {
      x->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const S* g = o->grad.data() + size_t(b) * D;
        S* xg = x->grad.data() + (size_t(b) * T + position) * D;
        for (int c = 0; c < D; ++c) xg[c] += g[c];
      }
    };
  }
  return out;
}

// row gather from a rank-2 tensor; backward scatter-adds
template <typename S>
TensorPtrT<S> gather_rows(const TensorPtrT<S>& x, const std::vector<int>& rows) {
  if (x->rank() != 2) fail("shape-mismatch", "gather_rows wants rank 2, got " + x->shape_str());
  const int n = x->dims[0], d = x->dims[1];
  for (int r : rows)
    if (r < 0 || r >= n) fail("shape-mismatch", "gather_rows index out of range");
  auto out = detail::make_node<S>({static_cast<int>(rows.size()), d}, {x});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x->data.data() + size_t(rows[i]) * d, d, out->data.data() + i * d);
  if (out->requires_grad) {
    auto* o = out.get();
    auto idx = std::make_shared<std::vector<int>>(rows);
    out->backward_fn = [x, o, idx, d]() {
      x->ensure_grad();
      for (size_t i = 0; i < idx->size(); ++i) {
        const S* g = o->grad.data() + i * d;
        S* xg = x->grad.data() + size_t((*idx)[i]) * d;
        for (int c = 0; c < d; ++c) xg[c] += g[c];
      }
    };
  }
  return out;
}

// Additive attention bias: scores [B*H,S,S] plus per-key bias [B,S] expanded
// over heads and query rows. The bias is data, not a differentiable input.
template <typename S>
TensorPtrT<S> add_attention_bias(const TensorPtrT<S>& scores, const TensorPtrT<S>& bias,
                                 int heads) {
  if (scores->rank() != 3 || bias->rank() != 2 || scores->dims[0] != bias->dims[0] * heads ||
      scores->dims[2] != bias->dims[1])
    fail("shape-mismatch", "attention bias " + bias->shape_str() + " vs " + scores->shape_str());
  if (bias->requires_grad) fail("shape-mismatch", "attention bias must not require grad");
  const int BH = scores->dims[0], T = scores->dims[1], K = scores->dims[2];
  auto out = detail::make_node<S>(scores->dims, {scores});
  for (int bh = 0; bh < BH; ++bh) {
    const S* bi = bias->data.data() + size_t(bh / heads) * K;
    for (int t = 0; t < T; ++t) {
      const S* in = scores->data.data() + (size_t(bh) * T + t) * K;
      S* o = out->data.data() + (size_t(bh) * T + t) * K;
      for (int k = 0; k < K; ++k) o[k] = in[k] + bi[k];
    }
  }
  if (out->requires_grad) {
    auto* o = out.get();
    out->backward_fn = [scores, o]() {
      scores->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) scores->grad[i] += o->grad[i];
    };
  }
  return out;
}

// leaf copy sharing values but not gradient flow
template <typename S>
TensorPtrT<S> detach(const TensorPtrT<S>& x) {
  auto out = tensor<S>(x->dims);
  out->data = x->data;
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Max relative error between analytic and central-difference gradients of a
// scalar-valued function at x. Perturbs x in place and restores it; meant for
// the double instantiation where fp noise sits far below the tolerances.
template <typename S>
double gradient_check(const std::function<TensorPtrT<S>(const TensorPtrT<S>&)>& f,
                      const TensorPtrT<S>& x, double step) {
  if (step <= 0) fail("shape-mismatch", "gradient_check step must be positive");
  const bool saved = x->requires_grad;
  x->requires_grad = true;
  x->clear_grad();
  auto y = f(x);
  if (y->numel() != 1) fail("shape-mismatch", "gradient_check target must be scalar");
  if (!std::isfinite(static_cast<double>(y->data[0]))) fail("non-finite", "f(x) is not finite");
  backward(y);
  std::vector<double> analytic(x->data.size(), 0.0);
  for (size_t i = 0; i < x->grad.size(); ++i) analytic[i] = static_cast<double>(x->grad[i]);
  double worst = 0.0;
  for (size_t i = 0; i < x->data.size(); ++i) {
    const S keep = x->data[i];
    x->data[i] = keep + static_cast<S>(step);
    const double up = static_cast<double>(f(x)->data[0]);
    x->data[i] = keep - static_cast<S>(step);
    const double down = static_cast<double>(f(x)->data[0]);
    x->data[i] = keep;
    if (!std::isfinite(up) || !std::isfinite(down)) fail("non-finite", "f non-finite at probe");
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  x->requires_grad = saved;
  return worst;
}

}  // namespace vkd
