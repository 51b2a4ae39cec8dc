#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "kpx/sampling.hpp"

using kpx::StackedCloud;
using kpx::Tensor;
using kpx::Vec3;

namespace {

StackedCloud random_cloud(std::size_t n, std::mt19937_64& rng,
                          std::size_t feature_dim = 0, bool labels = false) {
  StackedCloud c;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  c.points.resize(n);
  for (auto& p : c.points) p = {u(rng), u(rng), u(rng)};
  c.lengths = {n};
  c.feature_dim = feature_dim;
  for (std::size_t i = 0; i < n * feature_dim; ++i)
    c.features.push_back(float(u(rng)));
  if (labels)
    for (std::size_t i = 0; i < n; ++i) c.labels.push_back(int(rng() % 3));
  return c;
}

}  // namespace

TEST_CASE("grid_subsample merges cells into centroids") {
  StackedCloud in;
  in.points = {{0.2, 0.1, 0.1}, {0.8, 0.3, 0.1}, {1.2, 0.1, 0.1}};
  in.lengths = {3};
  in.feature_dim = 1;
  in.features = {1.0f, 5.0f, 2.0f};
  in.labels = {0, 2, 1};
  auto [out, map] = kpx::grid_subsample(in, 1.0);
  REQUIRE(out.total() == 2);
  REQUIRE(map.n_out == 2);
  REQUIRE(map.cell_of_point[0] == map.cell_of_point[1]);
  REQUIRE(map.cell_of_point[2] != map.cell_of_point[0]);
  std::size_t merged = map.cell_of_point[0];
  REQUIRE_THAT(out.points[merged][0], Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(out.points[merged][1], Catch::Matchers::WithinAbs(0.2, 1e-12));
  // features are max-pooled per channel
  REQUIRE(out.features[merged] == 5.0f);
  // two-way label tie resolves to the smaller id
  REQUIRE(out.labels[merged] == 0);
}

TEST_CASE("grid_subsample label majority wins over tie rule") {
  StackedCloud in;
  in.points = {{0.1, 0, 0}, {0.2, 0, 0}, {0.3, 0, 0}};
  in.lengths = {3};
  in.labels = {2, 2, 1};
  auto [out, map] = kpx::grid_subsample(in, 1.0);
  REQUIRE(out.labels == std::vector<int>{2});
}

TEST_CASE("grid_subsample matches a naive occupied-cell count") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_cloud(120, rng);
    auto b = random_cloud(80, rng);
    StackedCloud in = a;
    in.points.insert(in.points.end(), b.points.begin(), b.points.end());
    in.lengths = {120, 80};
    const double cell = 0.35;
    auto [out, map] = kpx::grid_subsample(in, cell);

    std::size_t expected = 0;
    std::size_t base = 0;
    for (auto len : in.lengths) {
      std::set<std::array<std::int64_t, 3>> keys;
      for (std::size_t i = 0; i < len; ++i) {
        const Vec3& p = in.points[base + i];
        keys.insert({std::int64_t(std::floor(p[0] / cell)),
                     std::int64_t(std::floor(p[1] / cell)),
                     std::int64_t(std::floor(p[2] / cell))});
      }
      expected += keys.size();
      base += len;
    }
    REQUIRE(out.total() == expected);
    REQUIRE(out.lengths.size() == 2);
  }
}

TEST_CASE("grid_subsample is idempotent at fixed cell size") {
  std::mt19937_64 rng(5);
  auto in = random_cloud(200, rng);
  auto [once, m1] = kpx::grid_subsample(in, 0.4);
  // centroids stay inside their (convex) cells, so a second pass is identity
  auto [twice, m2] = kpx::grid_subsample(once, 0.4);
  REQUIRE(twice.total() == once.total());
  for (std::size_t i = 0; i < once.total(); ++i) {
    std::size_t j = m2.cell_of_point[i];
    for (int a = 0; a < 3; ++a)
      REQUIRE(twice.points[j][a] == once.points[i][a]);
  }
}

TEST_CASE("grid_subsample input validation") {
  StackedCloud bad;
  bad.points = {{0, 0, 0}};
  bad.lengths = {2};
  REQUIRE_THROWS_WITH(kpx::grid_subsample(bad, 1.0),
                      Catch::Matchers::ContainsSubstring("lengths"));
  StackedCloud ok;
  ok.points = {{0, 0, 0}};
  ok.lengths = {1};
  REQUIRE_THROWS_AS(kpx::grid_subsample(ok, 0.0), std::invalid_argument);
}

TEST_CASE("knn on collinear points") {
  std::vector<Vec3> pts = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  std::vector<std::size_t> len = {4};
  auto t = kpx::knn_truncated(pts, pts, len, len, 3, 2.5);
  REQUIRE(t.shadow == 4);
  // each query lists itself first, then ascending by distance
  REQUIRE(std::vector<std::size_t>(t.indices.begin(), t.indices.begin() + 3) ==
          std::vector<std::size_t>{0, 1, 2});
  REQUIRE(std::vector<std::size_t>(t.indices.begin() + 3,
                                   t.indices.begin() + 6) ==
          std::vector<std::size_t>{1, 0, 2});
  REQUIRE(std::vector<std::size_t>(t.indices.begin() + 9, t.indices.end()) ==
          std::vector<std::size_t>{3, 2, 1});
}

TEST_CASE("knn pads isolated queries with shadows") {
  std::vector<Vec3> q = {{100, 100, 100}};
  std::vector<Vec3> s = {{0, 0, 0}, {1, 0, 0}};
  auto t = kpx::knn_truncated(q, s, {1}, {2}, 4, 1.5);
  REQUIRE(t.indices == std::vector<std::size_t>(4, 2));
}

TEST_CASE("knn never crosses batch element boundaries") {
  // two elements occupying the same region of space
  std::vector<Vec3> pts;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 40; ++i) pts.push_back({u(rng), u(rng), u(rng)});
  std::vector<std::size_t> len = {25, 15};
  auto t = kpx::knn_truncated(pts, pts, len, len, 6, 10.0);
  for (std::size_t q = 0; q < 40; ++q)
    for (std::size_t h = 0; h < 6; ++h) {
      std::size_t idx = t.indices[q * 6 + h];
      if (idx == t.shadow) continue;
      REQUIRE((q < 25) == (idx < 25));
    }
}

TEST_CASE("knn is translation equivariant") {
  std::mt19937_64 rng(13);
  auto scene = testutil::small_scene(30, 5, 1.2, rng);
  auto moved = scene.points;
  for (auto& p : moved) {
    p[0] += 17.25;
    p[1] -= 3.5;
    p[2] += 0.125;
  }
  auto t2 = kpx::knn_truncated(moved, moved, scene.lengths, scene.lengths, 5,
                               1.2);
  REQUIRE(t2.indices == scene.table.indices);
}

TEST_CASE("shadow_gather matches a naive gather and zeros shadows") {
  std::mt19937_64 rng(31);
  auto scene = testutil::small_scene(12, 5, 0.9, rng);
  auto f = kpx::randn<double>({12, 3}, rng);
  auto g = kpx::shadow_gather(f, scene.table);
  REQUIRE(g.shape() == std::vector<std::size_t>{12, 5, 3});
  for (std::size_t i = 0; i < 12 * 5; ++i) {
    std::size_t idx = scene.table.indices[i];
    for (std::size_t c = 0; c < 3; ++c) {
      double expect = idx == scene.table.shadow ? 0.0
                                                : f.values()[idx * 3 + c];
      REQUIRE(g.values()[i * 3 + c] == expect);
    }
  }
}

TEST_CASE("shadow_gather rejects bad tables") {
  auto f = Tensor<double>::zeros({3, 2});
  kpx::NeighborTable t;
  t.H = 2;
  t.shadow = 3;
  t.indices = {0, 1, 5, 3, 2, 2};  // 5 > shadow
  REQUIRE_THROWS_WITH(kpx::shadow_gather(f, t),
                      Catch::Matchers::ContainsSubstring("out of range"));
  auto wrong = Tensor<double>::zeros({4, 2});
  t.indices = {0, 1, 2, 3, 2, 2};
  REQUIRE_THROWS_AS(kpx::shadow_gather(wrong, t), std::invalid_argument);
}

TEST_CASE("gather and pooling gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 200);
    auto scene = testutil::small_scene(10, 4, 1.0, rng);
    auto f = kpx::randn<double>({10, 3}, rng);
    f.set_requires_grad();
    auto fwd = [&]() {
      auto g = kpx::shadow_gather(f, scene.table);
      return kpx::sum(kpx::mul(g, g));
    };
    REQUIRE(testutil::max_rel_grad_error(fwd, {f}) < 1e-4);
  }
}

TEST_CASE("grid_upsample copies coarse features and routes gradients") {
  std::mt19937_64 rng(77);
  auto in = random_cloud(60, rng);
  auto [coarse, map] = kpx::grid_subsample(in, 0.5);
  auto f = kpx::randn<double>({map.n_out, 2}, rng);
  f.set_requires_grad();
  auto up = kpx::grid_upsample(f, map);
  REQUIRE(up.shape() == std::vector<std::size_t>{60, 2});
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      REQUIRE(up.values()[i * 2 + c] ==
              f.values()[map.cell_of_point[i] * 2 + c]);

  // d sum(up) / d coarse[j] = population of cell j
  kpx::backward(kpx::sum(up));
  std::vector<double> pop(map.n_out, 0.0);
  for (auto c : map.cell_of_point) pop[c] += 1.0;
  for (std::size_t j = 0; j < map.n_out; ++j)
    for (std::size_t c = 0; c < 2; ++c)
      REQUIRE(f.grad()[j * 2 + c] == pop[j]);
}

TEST_CASE("pool_max picks per-cell channel maxima") {
  kpx::PoolMap map;
  map.cell_of_point = {0, 0, 1};
  map.n_out = 2;
  auto f = Tensor<double>::from({3, 2}, {1, 9, 4, 2, 7, 3});
  auto p = kpx::pool_max(f, map);
  REQUIRE(p.values() == std::vector<double>{4, 9, 7, 3});
}

TEST_CASE("pool_max and global_average_pool gradients") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 400);
    auto in = random_cloud(24, rng);
    auto [coarse, map] = kpx::grid_subsample(in, 0.8);
    auto f = kpx::randn<double>({24, 3}, rng);
    f.set_requires_grad();
    auto fwd_max = [&]() {
      auto p = kpx::pool_max(f, map);
      return kpx::sum(kpx::mul(p, p));
    };
    REQUIRE(testutil::max_rel_grad_error(fwd_max, {f}) < 1e-4);

    f.zero_grad();
    std::vector<std::size_t> lens = {10, 14};
    auto fwd_gap = [&]() {
      auto p = kpx::global_average_pool(f, lens);
      return kpx::sum(kpx::mul(p, p));
    };
    REQUIRE(testutil::max_rel_grad_error(fwd_gap, {f}) < 1e-4);
  }
}

TEST_CASE("global_average_pool hand case and empty-element error") {
  auto f = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto p = kpx::global_average_pool(f, {2, 1});
  REQUIRE(p.values() == std::vector<double>{2, 3, 5, 6});
  REQUIRE_THROWS_AS(kpx::global_average_pool(f, {3, 0}),
                    std::invalid_argument);
}
