#pragma once

// Stacked-batch point cloud representation, grid subsampling / upsampling and
// fixed-width radius-truncated nearest-neighbor search with shadow padding.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "kpx/kernel_points.hpp"  // Vec3
#include "kpx/tensor.hpp"

namespace kpx {

// Variable-length point clouds concatenated along the point axis.
struct StackedCloud {
  std::vector<Vec3> points;
  std::vector<float> features;  // row-major N x feature_dim
  std::size_t feature_dim = 0;
  std::vector<int> labels;      // optional, empty or size N
  std::vector<std::size_t> lengths;

  std::size_t total() const { return points.size(); }
  std::size_t elements() const { return lengths.size(); }
  bool has_labels() const { return !labels.empty(); }

  void check() const {
    std::size_t sum = 0;
    for (auto l : lengths) sum += l;
    if (sum != points.size())
      throw std::invalid_argument("StackedCloud: lengths sum to " +
                                  std::to_string(sum) + ", have " +
                                  std::to_string(points.size()) + " points");
    if (feature_dim > 0 && features.size() != points.size() * feature_dim)
      throw std::invalid_argument("StackedCloud: feature array size mismatch");
    if (!labels.empty() && labels.size() != points.size())
      throw std::invalid_argument("StackedCloud: label array size mismatch");
  }
};

// One output point per occupied grid cell; upsampling is a pure gather.
struct PoolMap {
  std::vector<std::size_t> cell_of_point;  // input point -> output point index
  std::size_t n_out = 0;
};

// Fixed-width neighbor table. Real neighbors come first in each row, sorted by
// ascending distance (ties broken by smaller support index); remaining slots
// hold the shadow index (== total support count).
struct NeighborTable {
  std::vector<std::size_t> indices;  // N_query x H
  std::size_t H = 0;
  std::size_t shadow = 0;

  std::size_t queries() const { return H ? indices.size() / H : 0; }
};

namespace detail {

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey& o) const {
    return x == o.x && y == o.y && z == o.z;
  }
};

struct CellHash {
  std::uint64_t salt = 0;
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = salt * 0x9e3779b97f4a7c15ull;
    auto mix = [&h](std::uint64_t v) {
      h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    };
    mix(std::uint64_t(k.x));
    mix(std::uint64_t(k.y));
    mix(std::uint64_t(k.z));
    return std::size_t(h);
  }
};

}  // namespace detail

// Merges points falling in the same cubic cell (per batch element): positions
// become centroids, features are max-pooled per channel, labels take the
// majority with ties resolved to the smallest label id.
inline std::pair<StackedCloud, PoolMap> grid_subsample(const StackedCloud& in,
                                                       double cell) {
  if (cell <= 0.0) throw std::invalid_argument("grid_subsample: cell <= 0");
  in.check();
  StackedCloud out;
  out.feature_dim = in.feature_dim;
  PoolMap map;
  map.cell_of_point.resize(in.total());

  std::size_t base = 0;
  for (std::size_t e = 0; e < in.elements(); ++e) {
    const std::size_t len = in.lengths[e];
    std::unordered_map<detail::CellKey, std::size_t, detail::CellHash> cells(
        0, detail::CellHash{e + 1});
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < len; ++i) {
      const Vec3& p = in.points[base + i];
      detail::CellKey key{std::int64_t(std::floor(p[0] / cell)),
                          std::int64_t(std::floor(p[1] / cell)),
                          std::int64_t(std::floor(p[2] / cell))};
      auto [it, inserted] = cells.try_emplace(key, members.size());
      if (inserted) members.emplace_back();
      members[it->second].push_back(base + i);
      map.cell_of_point[base + i] = map.n_out + it->second;
    }
    for (const auto& m : members) {
      Vec3 centroid{0, 0, 0};
      for (auto idx : m)
        for (int a = 0; a < 3; ++a) centroid[a] += in.points[idx][a];
      for (int a = 0; a < 3; ++a) centroid[a] /= double(m.size());
      out.points.push_back(centroid);
      if (in.feature_dim > 0) {
        for (std::size_t c = 0; c < in.feature_dim; ++c) {
          float mx = -std::numeric_limits<float>::infinity();
          for (auto idx : m)
            mx = std::max(mx, in.features[idx * in.feature_dim + c]);
          out.features.push_back(mx);
        }
      }
      if (in.has_labels()) {
        std::map<int, std::size_t> votes;  // ordered: ties -> smallest label
        for (auto idx : m) votes[in.labels[idx]]++;
        int best = votes.begin()->first;
        std::size_t best_n = votes.begin()->second;
        for (const auto& [lab, n] : votes)
          if (n > best_n) {
            best = lab;
            best_n = n;
          }
        out.labels.push_back(best);
      }
    }
    out.lengths.push_back(members.size());
    map.n_out += members.size();
    base += len;
  }
  return {out, map};
}

// Brute-force per-element search: up to H nearest supports within radius r,
// ascending by distance, ties by smaller support index, padded with shadows.
inline NeighborTable knn_truncated(const std::vector<Vec3>& queries,
                                   const std::vector<Vec3>& supports,
                                   const std::vector<std::size_t>& lengths_q,
                                   const std::vector<std::size_t>& lengths_s,
                                   std::size_t H, double r) {
  if (H < 1) throw std::invalid_argument("knn_truncated: H >= 1 required");
  if (r <= 0.0) throw std::invalid_argument("knn_truncated: r > 0 required");
  if (lengths_q.size() != lengths_s.size())
    throw std::invalid_argument("knn_truncated: batch element count mismatch");
  NeighborTable table;
  table.H = H;
  table.shadow = supports.size();
  table.indices.assign(queries.size() * H, table.shadow);

  const double r2 = r * r;
  std::size_t qbase = 0, sbase = 0;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t e = 0; e < lengths_q.size(); ++e) {
    for (std::size_t qi = 0; qi < lengths_q[e]; ++qi) {
      const Vec3& q = queries[qbase + qi];
      cand.clear();
      for (std::size_t si = 0; si < lengths_s[e]; ++si) {
        const Vec3& s = supports[sbase + si];
        double d2 = (q[0] - s[0]) * (q[0] - s[0]) +
                    (q[1] - s[1]) * (q[1] - s[1]) +
                    (q[2] - s[2]) * (q[2] - s[2]);
        if (d2 <= r2) cand.emplace_back(d2, sbase + si);
      }
      std::size_t take = std::min(H, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
      for (std::size_t j = 0; j < take; ++j)
        table.indices[(qbase + qi) * H + j] = cand[j].second;
    }
    qbase += lengths_q[e];
    sbase += lengths_s[e];
  }
  return table;
}

// ---------------------------------------------------------------------------
// Differentiable gathers

// Gathers neighbor features into [N_q, H, C]; shadow slots yield zeros.
// Backward scatters additively, skipping shadows.
template <typename T>
Tensor<T> shadow_gather(Tensor<T> features, const NeighborTable& table) {
  if (features.shape().size() != 2 || features.shape()[0] != table.shadow)
    throw std::invalid_argument(
        "shadow_gather: features " + shape_str(features.shape()) +
        " vs support count " + std::to_string(table.shadow));
  const std::size_t Nq = table.queries(), H = table.H, C = features.shape()[1];
  for (auto idx : table.indices)
    if (idx > table.shadow)
      throw std::invalid_argument("shadow_gather: neighbor index " +
                                  std::to_string(idx) + " out of range");
  std::vector<T> out(Nq * H * C, T(0));
  for (std::size_t i = 0; i < Nq * H; ++i) {
    std::size_t idx = table.indices[i];
    if (idx == table.shadow) continue;
    std::copy_n(features.values().data() + idx * C, C, out.data() + i * C);
  }
  auto fn = features.node();
  auto indices = std::make_shared<std::vector<std::size_t>>(table.indices);
  auto shadow = table.shadow;
  return make_op_node<T>(
      {Nq, H, C}, std::move(out), {fn},
      [fn, indices, shadow, C](TensorNode<T>& n) {
        for (std::size_t i = 0; i < indices->size(); ++i) {
          std::size_t idx = (*indices)[i];
          if (idx == shadow) continue;
          for (std::size_t c = 0; c < C; ++c)
            fn->grad[idx * C + c] += n.grad[i * C + c];
        }
      });
}

// Fine point i receives, verbatim, the feature of its coarse cell point.
template <typename T>
Tensor<T> grid_upsample(Tensor<T> coarse, const PoolMap& map) {
  if (coarse.shape().size() != 2 || coarse.shape()[0] != map.n_out)
    throw std::invalid_argument("grid_upsample: features " +
                                shape_str(coarse.shape()) + " vs map with " +
                                std::to_string(map.n_out) + " cells");
  const std::size_t N = map.cell_of_point.size(), C = coarse.shape()[1];
  std::vector<T> out(N * C);
  for (std::size_t i = 0; i < N; ++i)
    std::copy_n(coarse.values().data() + map.cell_of_point[i] * C, C,
                out.data() + i * C);
  auto cn = coarse.node();
  auto assign = std::make_shared<std::vector<std::size_t>>(map.cell_of_point);
  return make_op_node<T>({N, C}, std::move(out), {cn},
                         [cn, assign, C](TensorNode<T>& n) {
                           for (std::size_t i = 0; i < assign->size(); ++i)
                             for (std::size_t c = 0; c < C; ++c)
                               cn->grad[(*assign)[i] * C + c] +=
                                   n.grad[i * C + c];
                         });
}

// Per-cell max over fine features; backward routes to the argmax rows.
template <typename T>
Tensor<T> pool_max(Tensor<T> fine, const PoolMap& map) {
  if (fine.shape().size() != 2 ||
      fine.shape()[0] != map.cell_of_point.size())
    throw std::invalid_argument("pool_max: features " +
                                shape_str(fine.shape()) + " vs map over " +
                                std::to_string(map.cell_of_point.size()) +
                                " points");
  const std::size_t N = map.cell_of_point.size(), C = fine.shape()[1];
  const std::size_t M = map.n_out;
  std::vector<T> out(M * C, -std::numeric_limits<T>::infinity());
  auto arg = std::make_shared<std::vector<std::size_t>>(M * C, N);
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t o = map.cell_of_point[i];
    for (std::size_t c = 0; c < C; ++c) {
      T v = fine.values()[i * C + c];
      if (v > out[o * C + c]) {
        out[o * C + c] = v;
        (*arg)[o * C + c] = i;
      }
    }
  }
  auto fn = fine.node();
  return make_op_node<T>({M, C}, std::move(out), {fn},
                         [fn, arg, C, N](TensorNode<T>& n) {
                           for (std::size_t j = 0; j < arg->size(); ++j) {
                             std::size_t i = (*arg)[j];
                             if (i < N) fn->grad[i * C + j % C] += n.grad[j];
                           }
                         });
}

// Mean over each batch element's rows -> [elements, C].
template <typename T>
Tensor<T> global_average_pool(Tensor<T> x,
                              const std::vector<std::size_t>& lengths) {
  const std::size_t C = x.shape()[1];
  const std::size_t B = lengths.size();
  std::vector<T> out(B * C, T(0));
  std::size_t base = 0;
  for (std::size_t e = 0; e < B; ++e) {
    if (lengths[e] == 0)
      throw std::invalid_argument("global_average_pool: empty batch element " +
                                  std::to_string(e));
    for (std::size_t i = 0; i < lengths[e]; ++i)
      for (std::size_t c = 0; c < C; ++c)
        out[e * C + c] += x.values()[(base + i) * C + c];
    for (std::size_t c = 0; c < C; ++c) out[e * C + c] /= T(lengths[e]);
    base += lengths[e];
  }
  auto xn = x.node();
  auto lens = std::make_shared<std::vector<std::size_t>>(lengths);
  return make_op_node<T>(
      {B, C}, std::move(out), {xn}, [xn, lens, C](TensorNode<T>& n) {
        std::size_t base = 0;
        for (std::size_t e = 0; e < lens->size(); ++e) {
          for (std::size_t i = 0; i < (*lens)[e]; ++i)
            for (std::size_t c = 0; c < C; ++c)
              xn->grad[(base + i) * C + c] += n.grad[e * C + c] / T((*lens)[e]);
          base += (*lens)[e];
        }
      });
}

}  // namespace kpx
