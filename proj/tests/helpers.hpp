#pragma once

// Shared test utilities: central finite-difference gradient checking and
// small random geometry fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "kpx/kernel_points.hpp"
#include "kpx/sampling.hpp"
#include "kpx/tensor.hpp"

namespace testutil {

// Central finite differences on every (or a sampled subset of) leaf entries.
// forward() must rebuild the graph from the same leaf tensors so that value
// mutations are observed. Returns the max relative error, with the
// denominator floored to keep near-zero gradients from exploding the ratio.
//
// Each entry is scored with the best agreement over the supplied step sizes:
// the ideal step depends on local curvature (too large crosses activation
// kinks or picks up normalization curvature, too small amplifies roundoff),
// while a wrong analytic gradient disagrees at every step.
inline double max_rel_grad_error_multistep(
    const std::function<kpx::Tensor<double>()>& forward,
    std::vector<kpx::Tensor<double>> leaves, const std::vector<double>& steps,
    std::size_t max_entries_per_leaf = 0, std::uint64_t sample_seed = 0) {
  for (auto& l : leaves) l.zero_grad();
  kpx::Tensor<double> loss = forward();
  kpx::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  std::mt19937_64 rng(sample_seed);
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<std::size_t> idxs(leaf.size());
    for (std::size_t i = 0; i < idxs.size(); ++i) idxs[i] = i;
    if (max_entries_per_leaf && idxs.size() > max_entries_per_leaf) {
      std::shuffle(idxs.begin(), idxs.end(), rng);
      idxs.resize(max_entries_per_leaf);
    }
    for (auto i : idxs) {
      const double x = leaf.values()[i];
      const double a = analytic[li][i];
      double best = std::numeric_limits<double>::infinity();
      for (double h : steps) {
        const double step = h * std::max(1.0, std::abs(x));
        leaf.values()[i] = x + step;
        const double fp = forward().item();
        leaf.values()[i] = x - step;
        const double fm = forward().item();
        leaf.values()[i] = x;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
        best = std::min(best, std::abs(a - numeric) / denom);
      }
      worst = std::max(worst, best);
    }
  }
  return worst;
}

inline double max_rel_grad_error(
    const std::function<kpx::Tensor<double>()>& forward,
    std::vector<kpx::Tensor<double>> leaves, double h = 1e-5,
    std::size_t max_entries_per_leaf = 0, std::uint64_t sample_seed = 0) {
  return max_rel_grad_error_multistep(forward, std::move(leaves), {h},
                                      max_entries_per_leaf, sample_seed);
}

// Random single-element cloud with a self neighbor table, sized so most
// queries have both real and shadow slots.
struct SmallScene {
  std::vector<kpx::Vec3> points;
  std::vector<std::size_t> lengths;
  kpx::NeighborTable table;
};

inline SmallScene small_scene(std::size_t n, std::size_t H, double radius,
                              std::mt19937_64& rng) {
  SmallScene s;
  std::uniform_real_distribution<double> u(0.0, 2.0);
  s.points.resize(n);
  for (auto& p : s.points) p = {u(rng), u(rng), u(rng)};
  s.lengths = {n};
  s.table = kpx::knn_truncated(s.points, s.points, s.lengths, s.lengths, H,
                               radius);
  return s;
}

}  // namespace testutil
