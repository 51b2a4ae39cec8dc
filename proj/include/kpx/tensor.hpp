#pragma once

// Dense n-dimensional arrays with define-by-run reverse-mode differentiation.
// The graph is rebuilt on every forward pass: each operation allocates a node
// holding its output values, references to its parents and a closure that
// pushes gradients back into them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace kpx {

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily, same size as values
  bool requires_grad = false;
  bool needs_grad = false;  // requires_grad or depends on such a node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<std::size_t> shape) {
    return filled(std::move(shape), T(0));
  }

  static Tensor filled(std::vector<std::size_t> shape, T v) {
    auto n = std::make_shared<Node>();
    std::size_t total = 1;
    for (auto d : shape) total *= d;
    n->shape = std::move(shape);
    n->values.assign(total, v);
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> vals) {
    std::size_t total = 1;
    for (auto d : shape) total *= d;
    if (total != vals.size())
      throw std::invalid_argument("tensor: " + shape_str(shape) + " needs " +
                                  std::to_string(total) + " values, got " +
                                  std::to_string(vals.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(vals);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool valid() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t size() const { return node_->values.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    node_->requires_grad = b;
    node_->needs_grad = b || node_->needs_grad;
    return *this;
  }
  void zero_grad() {
    node_->grad.assign(node_->values.size(), T(0));
  }
  std::shared_ptr<Node> node() const { return node_; }

  T item() const {
    if (size() != 1)
      throw std::invalid_argument("item(): tensor has " +
                                  std::to_string(size()) + " elements");
    return node_->values[0];
  }

 private:
  std::shared_ptr<Node> node_;
};

// Builds a graph node from explicit parents; forward values must already be
// computed. backward receives the node itself and pushes into parents' grads.
template <typename T>
Tensor<T> make_op_node(std::vector<std::size_t> shape, std::vector<T> values,
                       std::vector<std::shared_ptr<TensorNode<T>>> parents,
                       std::function<void(TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool needs = false;
  for (auto& p : parents) needs = needs || p->needs_grad;
  n->needs_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(Tensor<T> loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  using NodeP = TensorNode<T>*;
  std::vector<NodeP> order;
  std::unordered_set<NodeP> seen;
  // iterative post-order DFS
  std::vector<std::pair<NodeP, std::size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      NodeP p = n->parents[idx++].get();
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeP n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra operations

namespace detail {

// b may equal a's shape or be a trailing suffix of it (e.g. [N,C] op [C]).
template <typename T>
std::size_t broadcast_period(const Tensor<T>& a, const Tensor<T>& b,
                             const char* what) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() ||
      !std::equal(sb.rbegin(), sb.rend(), sa.rbegin()))
    throw std::invalid_argument(std::string(what) + ": shapes " +
                                shape_str(sa) + " and " + shape_str(sb) +
                                " are not trailing-broadcast compatible");
  return b.size();
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  const std::size_t period = detail::broadcast_period(a, b, "add");
  std::vector<T> out(a.size());
  const auto& va = a.values();
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i % period];
  auto an = a.node();
  auto bn = b.node();
  return make_op_node<T>(
      a.shape(), std::move(out), {an, bn},
      [an, bn, period](TensorNode<T>& n) {
        if (an->needs_grad)
          for (std::size_t i = 0; i < n.size(); ++i) an->grad[i] += n.grad[i];
        if (bn->needs_grad)
          for (std::size_t i = 0; i < n.size(); ++i)
            bn->grad[i % period] += n.grad[i];
      });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  const std::size_t period = detail::broadcast_period(a, b, "mul");
  std::vector<T> out(a.size());
  const auto& va = a.values();
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i % period];
  auto an = a.node();
  auto bn = b.node();
  return make_op_node<T>(
      a.shape(), std::move(out), {an, bn},
      [an, bn, period](TensorNode<T>& n) {
        if (an->needs_grad)
          for (std::size_t i = 0; i < n.size(); ++i)
            an->grad[i] += n.grad[i] * bn->values[i % period];
        if (bn->needs_grad)
          for (std::size_t i = 0; i < n.size(); ++i)
            bn->grad[i % period] += n.grad[i] * an->values[i];
      });
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  auto an = a.node();
  return make_op_node<T>(a.shape(), std::move(out), {an},
                         [an, s](TensorNode<T>& n) {
                           for (std::size_t i = 0; i < n.size(); ++i)
                             an->grad[i] += n.grad[i] * s;
                         });
}

template <typename T>
Tensor<T> leaky_relu(Tensor<T> a, T slope) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T x = a.values()[i];
    out[i] = x > T(0) ? x : slope * x;
  }
  auto an = a.node();
  return make_op_node<T>(a.shape(), std::move(out), {an},
                         [an, slope](TensorNode<T>& n) {
                           for (std::size_t i = 0; i < n.size(); ++i)
                             an->grad[i] += n.grad[i] * (an->values[i] > T(0)
                                                            ? T(1)
                                                            : slope);
                         });
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-a.values()[i]));
  auto an = a.node();
  return make_op_node<T>(a.shape(), std::move(out), {an},
                         [an](TensorNode<T>& n) {
                           for (std::size_t i = 0; i < n.size(); ++i) {
                             T s = n.values[i];
                             an->grad[i] += n.grad[i] * s * (T(1) - s);
                           }
                         });
}

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  std::vector<T> out(M * N, T(0));
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t k = 0; k < K; ++k) {
      T av = pa[m * K + k];
      const T* rb = pb + k * N;
      T* ro = out.data() + m * N;
      for (std::size_t nn = 0; nn < N; ++nn) ro[nn] += av * rb[nn];
    }
  auto an = a.node();
  auto bn = b.node();
  return make_op_node<T>(
      {M, N}, std::move(out), {an, bn},
      [an, bn, M, K, N](TensorNode<T>& n) {
        if (an->needs_grad) {
          // grad_a = grad_out * b^T
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
              T acc = T(0);
              const T* rg = n.grad.data() + m * N;
              const T* rb = bn->values.data() + k * N;
              for (std::size_t nn = 0; nn < N; ++nn) acc += rg[nn] * rb[nn];
              an->grad[m * K + k] += acc;
            }
        }
        if (bn->needs_grad) {
          // grad_b = a^T * grad_out
          for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
              T av = an->values[m * K + k];
              const T* rg = n.grad.data() + m * N;
              T* rb = bn->grad.data() + k * N;
              for (std::size_t nn = 0; nn < N; ++nn) rb[nn] += av * rg[nn];
            }
        }
      });
}

template <typename T>
Tensor<T> sum(Tensor<T> a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  auto an = a.node();
  return make_op_node<T>({1}, {acc}, {an}, [an](TensorNode<T>& n) {
    for (std::size_t i = 0; i < an->values.size(); ++i)
      an->grad[i] += n.grad[0];
  });
}

// Concatenate two [N x Ca] / [N x Cb] matrices along columns.
template <typename T>
Tensor<T> concat_cols(Tensor<T> a, Tensor<T> b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_cols: shapes " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const std::size_t N = a.shape()[0], Ca = a.shape()[1], Cb = b.shape()[1];
  std::vector<T> out(N * (Ca + Cb));
  for (std::size_t i = 0; i < N; ++i) {
    std::copy_n(a.values().data() + i * Ca, Ca, out.data() + i * (Ca + Cb));
    std::copy_n(b.values().data() + i * Cb, Cb,
                out.data() + i * (Ca + Cb) + Ca);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_node<T>(
      {N, Ca + Cb}, std::move(out), {an, bn},
      [an, bn, N, Ca, Cb](TensorNode<T>& n) {
        for (std::size_t i = 0; i < N; ++i) {
          const T* rg = n.grad.data() + i * (Ca + Cb);
          if (an->needs_grad)
            for (std::size_t c = 0; c < Ca; ++c) an->grad[i * Ca + c] += rg[c];
          if (bn->needs_grad)
            for (std::size_t c = 0; c < Cb; ++c)
              bn->grad[i * Cb + c] += rg[Ca + c];
        }
      });
}

// Per-row multiplicative mask with a constant factor per row ([N x C] input).
template <typename T>
Tensor<T> row_scale(Tensor<T> a, std::vector<T> factors) {
  if (a.shape().size() != 2 || a.shape()[0] != factors.size())
    throw std::invalid_argument("row_scale: shape " + shape_str(a.shape()) +
                                " vs " + std::to_string(factors.size()) +
                                " factors");
  const std::size_t N = a.shape()[0], C = a.shape()[1];
  std::vector<T> out(N * C);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c)
      out[i * C + c] = a.values()[i * C + c] * factors[i];
  auto an = a.node();
  return make_op_node<T>(a.shape(), std::move(out), {an},
                         [an, factors, N, C](TensorNode<T>& n) {
                           for (std::size_t i = 0; i < N; ++i)
                             for (std::size_t c = 0; c < C; ++c)
                               an->grad[i * C + c] +=
                                   n.grad[i * C + c] * factors[i];
                         });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BNState {
  Tensor<T> gamma;  // learnable scale
  Tensor<T> beta;   // learnable shift
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-6);

  static BNState make(std::size_t C) {
    BNState s;
    s.gamma = Tensor<T>::filled({C}, T(1));
    s.gamma.set_requires_grad();
    s.beta = Tensor<T>::zeros({C});
    s.beta.set_requires_grad();
    s.running_mean.assign(C, T(0));
    s.running_var.assign(C, T(1));
    return s;
  }
};

template <typename T>
Tensor<T> batch_norm(Tensor<T> x, BNState<T>& state, bool training) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("batch_norm: expected [N,C], got " +
                                shape_str(x.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  if (N == 0) throw std::invalid_argument("batch_norm: empty batch");
  if (state.gamma.size() != C)
    throw std::invalid_argument("batch_norm: state has " +
                                std::to_string(state.gamma.size()) +
                                " channels, input " + std::to_string(C));
  std::vector<T> mean(C), invstd(C);
  if (training) {
    std::vector<T> var(C, T(0));
    for (std::size_t c = 0; c < C; ++c) {
      T m = T(0);
      for (std::size_t i = 0; i < N; ++i) m += x.values()[i * C + c];
      m /= T(N);
      T v = T(0);
      for (std::size_t i = 0; i < N; ++i) {
        T d = x.values()[i * C + c] - m;
        v += d * d;
      }
      v /= T(N);
      mean[c] = m;
      var[c] = v;
      state.running_mean[c] =
          (T(1) - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] =
          (T(1) - state.momentum) * state.running_var[c] + state.momentum * v;
      invstd[c] = T(1) / std::sqrt(v + state.eps);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<T> xhat(N * C), out(N * C);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      T h = (x.values()[i * C + c] - mean[c]) * invstd[c];
      xhat[i * C + c] = h;
      out[i * C + c] = state.gamma.values()[c] * h + state.beta.values()[c];
    }
  auto xn = x.node();
  auto gn = state.gamma.node();
  auto bn = state.beta.node();
  auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
  auto is = std::make_shared<std::vector<T>>(std::move(invstd));
  return make_op_node<T>(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, xh, is, N, C, training](TensorNode<T>& n) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t i = 0; i < N; ++i) {
            sum_dy += n.grad[i * C + c];
            sum_dy_xhat += n.grad[i * C + c] * (*xh)[i * C + c];
          }
          if (gn->needs_grad) gn->grad[c] += sum_dy_xhat;
          if (bn->needs_grad) bn->grad[c] += sum_dy;
          if (xn->needs_grad) {
            T g = gn->values[c] * (*is)[c];
            for (std::size_t i = 0; i < N; ++i) {
              T dy = n.grad[i * C + c];
              if (training)
                xn->grad[i * C + c] +=
                    g * (dy - sum_dy / T(N) -
                         (*xh)[i * C + c] * sum_dy_xhat / T(N));
              else
                xn->grad[i * C + c] += g * dy;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Initialization helpers

template <typename T>
Tensor<T> randn(std::vector<std::size_t> shape, std::mt19937_64& rng,
                T stddev = T(1)) {
  std::normal_distribution<double> dist(0.0, 1.0);
  auto t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = T(dist(rng)) * stddev;
  return t;
}

template <typename T>
Tensor<T> rand_uniform(std::vector<std::size_t> shape, std::mt19937_64& rng,
                       T lo, T hi) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  auto t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = T(dist(rng));
  return t;
}

}  // namespace kpx
