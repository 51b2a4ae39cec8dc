#pragma once

// The kernel point operator family: influence computation, dense KPConv,
// depthwise KPConvD (full-sum and nearest-kernel), KPConvX with kernel
// attention, and KPInv. Influence values are constants in backward; no
// gradient flows to point coordinates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "kpx/kernel_points.hpp"
#include "kpx/sampling.hpp"
#include "kpx/tensor.hpp"

namespace kpx {

// Exact multiply-add counter, incremented by the operators when attached.
struct OpCounter {
  unsigned long long macs = 0;
};

enum class InfluenceMode { nearest, full_sum };

// Per-(query, neighbor) influence values. In nearest mode h is [N_q x H] and
// k_star holds the nearest kernel index (-1 for shadow slots). In full-sum
// mode h_full is a dense [N_q x H x K] array.
template <typename T>
struct InfluenceTable {
  InfluenceMode mode = InfluenceMode::nearest;
  std::size_t H = 0;
  std::size_t K = 0;
  std::vector<T> h;          // nearest mode, N_q x H
  std::vector<int> k_star;   // nearest mode, N_q x H, -1 = shadow
  std::vector<T> h_full;     // full-sum mode, N_q x H x K

  std::size_t queries() const {
    return H == 0 ? 0
                  : (mode == InfluenceMode::nearest ? h.size() / H
                                                    : h_full.size() / (H * K));
  }
};

// Computes influences once per layer; every block of the layer reuses the
// table. Neighbor offsets are rescaled by the layer cell size so they live in
// the disposition's units. sigma_override < 0 means use the disposition's.
template <typename T>
InfluenceTable<T> influence(const std::vector<Vec3>& queries,
                            const std::vector<Vec3>& supports,
                            const NeighborTable& table,
                            const KernelDisposition& disp, InfluenceMode mode,
                            double cell_size = 1.0,
                            double sigma_override = -1.0) {
  const double sigma = sigma_override > 0.0 ? sigma_override : disp.sigma;
  if (sigma <= 0.0) throw std::invalid_argument("influence: sigma must be > 0");
  if (table.shadow != supports.size())
    throw std::invalid_argument("influence: neighbor table does not match "
                                "support count");
  const std::size_t Nq = table.queries(), H = table.H, K = disp.K();
  InfluenceTable<T> out;
  out.mode = mode;
  out.H = H;
  out.K = K;
  if (mode == InfluenceMode::nearest) {
    out.h.assign(Nq * H, T(0));
    out.k_star.assign(Nq * H, -1);
  } else {
    out.h_full.assign(Nq * H * K, T(0));
  }
  for (std::size_t q = 0; q < Nq; ++q) {
    for (std::size_t j = 0; j < H; ++j) {
      std::size_t idx = table.indices[q * H + j];
      if (idx == table.shadow) continue;
      Vec3 off{(supports[idx][0] - queries[q][0]) / cell_size,
               (supports[idx][1] - queries[q][1]) / cell_size,
               (supports[idx][2] - queries[q][2]) / cell_size};
      if (mode == InfluenceMode::nearest) {
        int best = 0;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) {
          Vec3 d{off[0] - disp.positions[k][0], off[1] - disp.positions[k][1],
                 off[2] - disp.positions[k][2]};
          double d2 = dot3(d, d);
          if (d2 < best_d2) {  // ties keep the smaller kernel index
            best_d2 = d2;
            best = int(k);
          }
        }
        out.k_star[q * H + j] = best;
        out.h[q * H + j] =
            T(std::max(0.0, 1.0 - std::sqrt(best_d2) / sigma));
      } else {
        for (std::size_t k = 0; k < K; ++k) {
          Vec3 d{off[0] - disp.positions[k][0], off[1] - disp.positions[k][1],
                 off[2] - disp.positions[k][2]};
          out.h_full[(q * H + j) * K + k] =
              T(std::max(0.0, 1.0 - norm3(d) / sigma));
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernels

template <typename T>
struct DepthwiseKernel {
  Tensor<T> w;  // K x C

  static DepthwiseKernel make(std::size_t K, std::size_t C,
                              std::mt19937_64& rng) {
    DepthwiseKernel k;
    k.w = randn<T>({K, C}, rng, T(1) / std::sqrt(T(K)));
    k.w.set_requires_grad();
    return k;
  }
};

template <typename T>
struct DenseKernel {
  Tensor<T> W;  // K x C_in x C_out

  static DenseKernel make(std::size_t K, std::size_t C_in, std::size_t C_out,
                          std::mt19937_64& rng) {
    DenseKernel k;
    k.W = randn<T>({K, C_in, C_out}, rng,
                   T(1) / std::sqrt(T(K * C_in)));
    k.W.set_requires_grad();
    return k;
  }
};

// Two-layer MLP generating the kernel attention modulations from the central
// point's feature: C -> C hidden -> K*C_g, sigmoid output.
template <typename T>
struct ModulationHead {
  Tensor<T> w1, b1, w2, b2;
  std::size_t C = 0, K = 0, G = 0, Cg = 0;
  T slope = T(0.1);

  static ModulationHead make(std::size_t C, std::size_t K, std::size_t G,
                             std::mt19937_64& rng, T slope = T(0.1)) {
    if (G == 0 || C % G != 0)
      throw std::invalid_argument("ModulationHead: C=" + std::to_string(C) +
                                  " not divisible by G=" + std::to_string(G));
    ModulationHead h;
    h.C = C;
    h.K = K;
    h.G = G;
    h.Cg = C / G;
    h.slope = slope;
    h.w1 = randn<T>({C, C}, rng, T(1) / std::sqrt(T(C)));
    h.b1 = Tensor<T>::zeros({C});
    h.w2 = randn<T>({C, K * h.Cg}, rng, T(1) / std::sqrt(T(C)));
    h.b2 = Tensor<T>::zeros({K * h.Cg});
    for (auto* t : {&h.w1, &h.b1, &h.w2, &h.b2}) t->set_requires_grad();
    return h;
  }
};

template <typename T>
Tensor<T> generate_modulations(Tensor<T> center_features,
                               const ModulationHead<T>& head,
                               OpCounter* counter = nullptr) {
  if (center_features.shape().size() != 2 ||
      center_features.shape()[1] != head.C)
    throw std::invalid_argument("generate_modulations: features " +
                                shape_str(center_features.shape()) +
                                " vs head C=" + std::to_string(head.C));
  if (counter)
    counter->macs += center_features.shape()[0] *
                     (head.C * head.C + head.C * head.K * head.Cg);
  auto hidden = leaky_relu(add(matmul(center_features, head.w1), head.b1),
                           head.slope);
  return sigmoid(add(matmul(hidden, head.w2), head.b2));
}

// ---------------------------------------------------------------------------
// Nearest-kernel depthwise core, shared by KPConvD / KPConvX / KPInv.
// out[q,c] = sum_j h[q,j] * (m[q,k*,c/G] if m) * (w[k*,c] if w) * f[n(q,j),c]
// With the modulations fixed to one this is bit-identical to KPConvD.

namespace detail {

template <typename T>
Tensor<T> kp_nearest_core(Tensor<T> features, const NeighborTable& table,
                          const InfluenceTable<T>& infl, Tensor<T>* w,
                          Tensor<T>* m, std::size_t G, const char* name,
                          OpCounter* counter, std::size_t macs_per_channel) {
  if (infl.mode != InfluenceMode::nearest)
    throw std::invalid_argument(std::string(name) +
                                ": needs a nearest-mode influence table");
  if (features.shape().size() != 2 || features.shape()[0] != table.shadow)
    throw std::invalid_argument(std::string(name) + ": features " +
                                shape_str(features.shape()) +
                                " vs support count " +
                                std::to_string(table.shadow));
  const std::size_t Nq = table.queries(), H = table.H, C = features.shape()[1];
  if (w && (w->shape().size() != 2 || w->shape()[1] != C))
    throw std::invalid_argument(std::string(name) + ": kernel weights " +
                                shape_str(w->shape()) + " vs C=" +
                                std::to_string(C));
  std::size_t Cg = 0, Km = 0;
  if (m) {
    if (G == 0 || C % G != 0)
      throw std::invalid_argument(std::string(name) + ": C=" +
                                  std::to_string(C) + " not divisible by G=" +
                                  std::to_string(G));
    Cg = C / G;
    if (m->shape().size() != 2 || m->shape()[0] != Nq ||
        m->shape()[1] % Cg != 0)
      throw std::invalid_argument(std::string(name) + ": modulations " +
                                  shape_str(m->shape()));
    Km = m->shape()[1] / Cg;
  }
  std::vector<T> out(Nq * C, T(0));
  const T* fv = features.values().data();
  const T* wv = w ? w->values().data() : nullptr;
  const T* mv = m ? m->values().data() : nullptr;
  for (std::size_t q = 0; q < Nq; ++q) {
    T* row = out.data() + q * C;
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t idx = table.indices[q * H + j];
      if (idx == table.shadow) continue;
      const T hval = infl.h[q * H + j];
      const int k = infl.k_star[q * H + j];
      const T* frow = fv + idx * C;
      const T* wrow = wv ? wv + std::size_t(k) * C : nullptr;
      const T* mrow = mv ? mv + q * Km * Cg + std::size_t(k) * Cg : nullptr;
      for (std::size_t c = 0; c < C; ++c) {
        T wm = wrow ? wrow[c] : T(1);
        if (mrow) wm = mrow[c / G] * wm;
        row[c] += hval * wm * frow[c];
      }
      if (counter) counter->macs += macs_per_channel * C;
    }
  }

  std::vector<std::shared_ptr<TensorNode<T>>> parents{features.node()};
  auto wn = w ? w->node() : nullptr;
  auto mn = m ? m->node() : nullptr;
  if (wn) parents.push_back(wn);
  if (mn) parents.push_back(mn);
  auto fn = features.node();
  auto idxs = std::make_shared<std::vector<std::size_t>>(table.indices);
  auto hvals = std::make_shared<std::vector<T>>(infl.h);
  auto ks = std::make_shared<std::vector<int>>(infl.k_star);
  const std::size_t shadow = table.shadow;
  return make_op_node<T>(
      {Nq, C}, std::move(out), std::move(parents),
      [fn, wn, mn, idxs, hvals, ks, shadow, H, C, G, Cg, Km](
          TensorNode<T>& n) {
        const std::size_t Nq = n.shape[0];
        for (std::size_t q = 0; q < Nq; ++q) {
          const T* grow = n.grad.data() + q * C;
          for (std::size_t j = 0; j < H; ++j) {
            const std::size_t idx = (*idxs)[q * H + j];
            if (idx == shadow) continue;
            const T hval = (*hvals)[q * H + j];
            const std::size_t k = std::size_t((*ks)[q * H + j]);
            const T* frow = fn->values.data() + idx * C;
            const T* wrow = wn ? wn->values.data() + k * C : nullptr;
            const T* mrow =
                mn ? mn->values.data() + q * Km * Cg + k * Cg : nullptr;
            for (std::size_t c = 0; c < C; ++c) {
              const T g = grow[c];
              const T wc = wrow ? wrow[c] : T(1);
              const T mc = mrow ? mrow[c / G] : T(1);
              if (fn->needs_grad) fn->grad[idx * C + c] += g * hval * mc * wc;
              if (wn && wn->needs_grad)
                wn->grad[k * C + c] += g * hval * mc * frow[c];
              if (mn && mn->needs_grad)
                mn->grad[q * Km * Cg + k * Cg + c / G] +=
                    g * hval * wc * frow[c];
            }
          }
        }
      });
}

}  // namespace detail

// Eq. 4: nearest-kernel depthwise convolution; cost independent of K.
template <typename T>
Tensor<T> kpconvd(Tensor<T> features, const NeighborTable& table,
                  const InfluenceTable<T>& infl,
                  const DepthwiseKernel<T>& kernel,
                  OpCounter* counter = nullptr) {
  Tensor<T> w = kernel.w;
  return detail::kp_nearest_core(features, table, infl, &w, (Tensor<T>*)nullptr,
                                 0, "kpconvd", counter, 2);
}

// Eq. 5: KPConvD with modulations applied to the kernel weights through the
// grouped Hadamard product. Modulations come from generate_modulations on the
// central point's features (N_q x K*C_g).
template <typename T>
Tensor<T> kpconvx(Tensor<T> features, Tensor<T> modulations,
                  const NeighborTable& table, const InfluenceTable<T>& infl,
                  const DepthwiseKernel<T>& kernel, std::size_t G,
                  OpCounter* counter = nullptr) {
  Tensor<T> w = kernel.w;
  return detail::kp_nearest_core(features, table, infl, &w, &modulations, G,
                                 "kpconvx", counter, 3);
}

// Eq. 7: involution, modulations only.
template <typename T>
Tensor<T> kpinv(Tensor<T> features, Tensor<T> modulations,
                const NeighborTable& table, const InfluenceTable<T>& infl,
                std::size_t G, OpCounter* counter = nullptr) {
  return detail::kp_nearest_core(features, table, infl, (Tensor<T>*)nullptr,
                                 &modulations, G, "kpinv", counter, 2);
}

// Eq. 3: depthwise convolution with full kernel summation; cost scales with K.
template <typename T>
Tensor<T> kpconvd_fullsum(Tensor<T> features, const NeighborTable& table,
                          const InfluenceTable<T>& infl,
                          const DepthwiseKernel<T>& kernel,
                          OpCounter* counter = nullptr) {
  if (infl.mode != InfluenceMode::full_sum)
    throw std::invalid_argument(
        "kpconvd_fullsum: needs a full-sum influence table");
  if (features.shape().size() != 2 || features.shape()[0] != table.shadow)
    throw std::invalid_argument("kpconvd_fullsum: features " +
                                shape_str(features.shape()) +
                                " vs support count " +
                                std::to_string(table.shadow));
  const std::size_t Nq = table.queries(), H = table.H, K = infl.K;
  const std::size_t C = features.shape()[1];
  if (kernel.w.shape()[0] != K || kernel.w.shape()[1] != C)
    throw std::invalid_argument("kpconvd_fullsum: kernel " +
                                shape_str(kernel.w.shape()));
  std::vector<T> out(Nq * C, T(0));
  for (std::size_t q = 0; q < Nq; ++q)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t idx = table.indices[q * H + j];
      if (idx == table.shadow) continue;
      for (std::size_t k = 0; k < K; ++k) {
        const T hval = infl.h_full[(q * H + j) * K + k];
        for (std::size_t c = 0; c < C; ++c)
          out[q * C + c] +=
              hval * kernel.w.values()[k * C + c] * features.values()[idx * C + c];
        if (counter) counter->macs += 2 * C;
      }
    }
  auto fn = features.node();
  auto wn = kernel.w.node();
  auto idxs = std::make_shared<std::vector<std::size_t>>(table.indices);
  auto hvals = std::make_shared<std::vector<T>>(infl.h_full);
  const std::size_t shadow = table.shadow;
  return make_op_node<T>(
      {Nq, C}, std::move(out), {fn, wn},
      [fn, wn, idxs, hvals, shadow, H, K, C](TensorNode<T>& n) {
        const std::size_t Nq = n.shape[0];
        for (std::size_t q = 0; q < Nq; ++q)
          for (std::size_t j = 0; j < H; ++j) {
            const std::size_t idx = (*idxs)[q * H + j];
            if (idx == shadow) continue;
            for (std::size_t k = 0; k < K; ++k) {
              const T hval = (*hvals)[(q * H + j) * K + k];
              for (std::size_t c = 0; c < C; ++c) {
                const T g = n.grad[q * C + c];
                if (fn->needs_grad)
                  fn->grad[idx * C + c] += g * hval * wn->values[k * C + c];
                if (wn->needs_grad)
                  wn->grad[k * C + c] += g * hval * fn->values[idx * C + c];
              }
            }
          }
      });
}

// Eq. 1: the full standard KPConv, used by the stem and as an oracle target.
template <typename T>
Tensor<T> kpconv_dense(Tensor<T> features, const NeighborTable& table,
                       const InfluenceTable<T>& infl,
                       const DenseKernel<T>& kernel,
                       OpCounter* counter = nullptr) {
  if (infl.mode != InfluenceMode::full_sum)
    throw std::invalid_argument("kpconv_dense: needs a full-sum influence "
                                "table");
  if (features.shape().size() != 2 || features.shape()[0] != table.shadow)
    throw std::invalid_argument("kpconv_dense: features " +
                                shape_str(features.shape()) +
                                " vs support count " +
                                std::to_string(table.shadow));
  const std::size_t Nq = table.queries(), H = table.H, K = infl.K;
  const std::size_t C_in = features.shape()[1];
  if (kernel.W.shape()[0] != K || kernel.W.shape()[1] != C_in)
    throw std::invalid_argument("kpconv_dense: kernel " +
                                shape_str(kernel.W.shape()) + " vs K=" +
                                std::to_string(K) + ", C_in=" +
                                std::to_string(C_in));
  const std::size_t C_out = kernel.W.shape()[2];
  std::vector<T> out(Nq * C_out, T(0));
  const T* Wv = kernel.W.values().data();
  for (std::size_t q = 0; q < Nq; ++q)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t idx = table.indices[q * H + j];
      if (idx == table.shadow) continue;
      const T* frow = features.values().data() + idx * C_in;
      for (std::size_t k = 0; k < K; ++k) {
        const T hval = infl.h_full[(q * H + j) * K + k];
        if (hval == T(0)) {
          if (counter) counter->macs += C_in * C_out + C_out;
          continue;
        }
        for (std::size_t c = 0; c < C_in; ++c) {
          const T hf = hval * frow[c];
          const T* wr = Wv + (k * C_in + c) * C_out;
          T* orow = out.data() + q * C_out;
          for (std::size_t o = 0; o < C_out; ++o) orow[o] += hf * wr[o];
        }
        if (counter) counter->macs += C_in * C_out + C_out;
      }
    }
  auto fn = features.node();
  auto wn = kernel.W.node();
  auto idxs = std::make_shared<std::vector<std::size_t>>(table.indices);
  auto hvals = std::make_shared<std::vector<T>>(infl.h_full);
  const std::size_t shadow = table.shadow;
  return make_op_node<T>(
      {Nq, C_out}, std::move(out), {fn, wn},
      [fn, wn, idxs, hvals, shadow, H, K, C_in, C_out](TensorNode<T>& n) {
        const std::size_t Nq = n.shape[0];
        for (std::size_t q = 0; q < Nq; ++q)
          for (std::size_t j = 0; j < H; ++j) {
            const std::size_t idx = (*idxs)[q * H + j];
            if (idx == shadow) continue;
            for (std::size_t k = 0; k < K; ++k) {
              const T hval = (*hvals)[(q * H + j) * K + k];
              if (hval == T(0)) continue;
              for (std::size_t c = 0; c < C_in; ++c) {
                const T fv = fn->values[idx * C_in + c];
                const T* wr = wn->values.data() + (k * C_in + c) * C_out;
                const T* grow = n.grad.data() + q * C_out;
                T acc = T(0);
                for (std::size_t o = 0; o < C_out; ++o) {
                  const T g = grow[o];
                  acc += g * wr[o];
                  if (wn->needs_grad)
                    wn->grad[(k * C_in + c) * C_out + o] += g * hval * fv;
                }
                if (fn->needs_grad) fn->grad[idx * C_in + c] += hval * acc;
              }
            }
          }
      });
}

}  // namespace kpx
