#pragma once

// Operator micro-benchmarks: closed-form multiply-add predictions audited
// against the instrumented counters, and median wall-time over repeated
// trials with a warm-up run. Influence-table construction is timed apart
// from the operator itself.

#include <chrono>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpx/kpops.hpp"
#include "kpx/sampling.hpp"

namespace kpx {

enum class BenchOp { kpconvd, kpconvx, kpinv, kpconvd_fullsum, kpconv_dense };

inline const char* to_string(BenchOp op) {
  switch (op) {
    case BenchOp::kpconvd: return "kpconvd";
    case BenchOp::kpconvx: return "kpconvx";
    case BenchOp::kpinv: return "kpinv";
    case BenchOp::kpconvd_fullsum: return "kpconvd_fullsum";
    case BenchOp::kpconv_dense: return "kpconv_dense";
  }
  return "?";
}

inline BenchOp bench_op_from_string(const std::string& s) {
  for (BenchOp op : {BenchOp::kpconvd, BenchOp::kpconvx, BenchOp::kpinv,
                     BenchOp::kpconvd_fullsum, BenchOp::kpconv_dense})
    if (s == to_string(op)) return op;
  throw std::invalid_argument("unknown operator '" + s + "'");
}

// Closed-form multiply-add count. real_pairs counts non-shadow (query,
// neighbor) slots; nq is the query count (modulation generation is per
// query, not per neighbor).
inline unsigned long long predicted_macs(BenchOp op, std::size_t real_pairs,
                                         std::size_t nq, std::size_t C,
                                         std::size_t K, std::size_t Cg,
                                         std::size_t C_out = 0) {
  const unsigned long long rp = real_pairs, q = nq;
  switch (op) {
    case BenchOp::kpconvd:
      return 2ull * C * rp;
    case BenchOp::kpconvx:
      return 3ull * C * rp + q * (1ull * C * C + 1ull * C * K * Cg);
    case BenchOp::kpinv:
      return 2ull * C * rp + q * (1ull * C * C + 1ull * C * K * Cg);
    case BenchOp::kpconvd_fullsum:
      return 2ull * C * K * rp;
    case BenchOp::kpconv_dense:
      return (1ull * C * C_out + C_out) * K * rp;
  }
  return 0;
}

struct BenchResult {
  BenchOp op = BenchOp::kpconvd;
  std::size_t N = 0, H = 0, C = 0, K = 0, G = 0;
  std::size_t real_pairs = 0;
  double op_ms = 0.0;         // median over trials
  double influence_ms = 0.0;  // one-off table construction
  unsigned long long macs = 0;           // instrumented
  unsigned long long predicted = 0;      // closed form
};

// Shared fixture: N points of unit density in a cube, self-neighborhoods.
struct BenchScene {
  std::vector<Vec3> points;
  std::vector<std::size_t> lengths;
  NeighborTable table;
  std::size_t real_pairs = 0;
};

inline BenchScene make_bench_scene(std::size_t N, std::size_t H, double radius,
                                   std::uint64_t seed) {
  BenchScene s;
  std::mt19937_64 rng(seed);
  const double side = std::cbrt(double(N));
  std::uniform_real_distribution<double> u(0.0, side);
  s.points.resize(N);
  for (auto& p : s.points) p = {u(rng), u(rng), u(rng)};
  s.lengths = {N};
  s.table = knn_truncated(s.points, s.points, s.lengths, s.lengths, H, radius);
  for (auto idx : s.table.indices) s.real_pairs += idx != s.table.shadow;
  return s;
}

template <typename T>
BenchResult bench_operator(BenchOp op, const BenchScene& scene,
                           const KernelDisposition& disp, std::size_t C,
                           std::size_t G, std::size_t trials,
                           std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("bench: trials >= 1");
  using clock = std::chrono::steady_clock;
  const std::size_t N = scene.points.size(), K = disp.K();
  std::mt19937_64 rng(seed);
  Tensor<T> f = randn<T>({N, C}, rng);
  DepthwiseKernel<T> dk = DepthwiseKernel<T>::make(K, C, rng);
  DenseKernel<T> dense = DenseKernel<T>::make(K, C, C, rng);
  ModulationHead<T> head = ModulationHead<T>::make(C, K, G, rng);

  const bool full = op == BenchOp::kpconvd_fullsum || op == BenchOp::kpconv_dense;
  auto t0 = clock::now();
  InfluenceTable<T> infl =
      influence<T>(scene.points, scene.points, scene.table, disp,
                   full ? InfluenceMode::full_sum : InfluenceMode::nearest);
  auto t1 = clock::now();

  BenchResult r;
  r.op = op;
  r.N = N;
  r.H = scene.table.H;
  r.C = C;
  r.K = K;
  r.G = G;
  r.real_pairs = scene.real_pairs;
  r.influence_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

  auto run = [&](OpCounter* counter) {
    switch (op) {
      case BenchOp::kpconvd:
        return kpconvd(f, scene.table, infl, dk, counter);
      case BenchOp::kpconvx: {
        Tensor<T> m = generate_modulations(f, head, counter);
        return kpconvx(f, m, scene.table, infl, dk, G, counter);
      }
      case BenchOp::kpinv: {
        Tensor<T> m = generate_modulations(f, head, counter);
        return kpinv(f, m, scene.table, infl, G, counter);
      }
      case BenchOp::kpconvd_fullsum:
        return kpconvd_fullsum(f, scene.table, infl, dk, counter);
      case BenchOp::kpconv_dense:
        return kpconv_dense(f, scene.table, infl, dense, counter);
    }
    throw std::logic_error("bench: unreachable");
  };

  OpCounter counter;
  run(&counter);  // warm-up, also fills the instrumented count
  r.macs = counter.macs;
  r.predicted = predicted_macs(op, r.real_pairs, N, C, K, head.Cg, C);

  std::vector<double> times(trials);
  for (auto& t : times) {
    auto a = clock::now();
    volatile T sink = run(nullptr).values()[0];
    (void)sink;
    auto b = clock::now();
    t = std::chrono::duration<double, std::milli>(b - a).count();
  }
  std::sort(times.begin(), times.end());
  r.op_ms = times[trials / 2];
  return r;
}

}  // namespace kpx
