#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "kpx/kernel_points.hpp"

using kpx::KernelDisposition;
using kpx::Vec3;

TEST_CASE("shell radii follow the regular distribution") {
  auto r = kpx::shell_radii(2.1, 2);
  REQUIRE_THAT(r[0], Catch::Matchers::WithinAbs(0.84, 1e-12));
  REQUIRE_THAT(r[1], Catch::Matchers::WithinAbs(1.68, 1e-12));
  auto r1 = kpx::shell_radii(1.0, 1);
  REQUIRE_THAT(r1[0], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
  // homogeneity in the radius
  auto r5 = kpx::shell_radii(5.0, 1);
  REQUIRE_THAT(r5[0], Catch::Matchers::WithinAbs(5.0 * r1[0], 1e-12));
  REQUIRE_THROWS_AS(kpx::shell_radii(1.0, 0), std::invalid_argument);
}

TEST_CASE("two shell points become antipodal") {
  auto d = kpx::optimize_disposition({1, 2}, 1.0, 5);
  REQUIRE(d.K() == 3);
  const auto& a = d.positions[1];
  const auto& b = d.positions[2];
  double r1 = d.shell_radii[0];
  REQUIRE_THAT(kpx::dot3(a, b), Catch::Matchers::WithinAbs(-r1 * r1, 1e-4));
}

TEST_CASE("six shell points converge to an octahedron") {
  auto d = kpx::optimize_disposition({1, 6}, 2.1, 3);
  REQUIRE(d.converged);
  // each point has 4 neighbors at 90 degrees and one antipode at 180
  std::size_t right_angles = 0;
  for (std::size_t i = 1; i <= 6; ++i)
    for (std::size_t j = i + 1; j <= 6; ++j) {
      double c = kpx::dot3(d.positions[i], d.positions[j]) /
                 (kpx::norm3(d.positions[i]) * kpx::norm3(d.positions[j]));
      double ang = std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
      if (std::abs(ang - 180.0) > 1.0) {
        REQUIRE_THAT(ang, Catch::Matchers::WithinAbs(90.0, 1.0));
        ++right_angles;
      }
    }
  REQUIRE(right_angles == 12);
  // min pairwise distance is center-to-shell: r1 < sqrt(2) * r1 (shell edge)
  auto rep = kpx::verify_disposition(d);
  REQUIRE_THAT(rep.min_pairwise_distance,
               Catch::Matchers::WithinAbs(d.shell_radii[0], 1e-3));
}

TEST_CASE("large disposition satisfies the invariants") {
  auto d = kpx::optimize_disposition({1, 14, 28}, 2.1, 42);
  REQUIRE(d.K() == 43);
  auto rep = kpx::verify_disposition(d);
  REQUIRE(rep.shell_error_max < 1e-6);
  REQUIRE(rep.center_offset == 0.0);
  REQUIRE(rep.min_pairwise_distance > 0.0);
}

TEST_CASE("min pairwise distance is stable across seeds") {
  std::vector<double> mins;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto d = kpx::optimize_disposition({1, 14, 28}, 2.1, seed);
    mins.push_back(kpx::verify_disposition(d).min_pairwise_distance);
  }
  double lo = *std::min_element(mins.begin(), mins.end());
  double hi = *std::max_element(mins.begin(), mins.end());
  REQUIRE((hi - lo) / hi < 0.05);
}

TEST_CASE("optimization is exactly scale equivariant") {
  auto a = kpx::optimize_disposition({1, 6}, 1.0, 9);
  auto b = kpx::optimize_disposition({1, 6}, 3.5, 9);
  for (std::size_t k = 0; k < a.K(); ++k)
    for (int c = 0; c < 3; ++c)
      REQUIRE_THAT(b.positions[k][c],
                   Catch::Matchers::WithinAbs(3.5 * a.positions[k][c], 1e-6));
}

TEST_CASE("energy is non-increasing over accepted steps") {
  kpx::KernelOptimizerOptions opts;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t iters = 10; iters <= 60; iters += 10) {
    opts.max_iters = iters;
    kpx::KernelOptimizerState st;
    kpx::optimize_disposition({1, 10}, 1.0, 17, opts, &st);
    REQUIRE(st.energy <= prev + 1e-9);
    prev = st.energy;
  }
}

TEST_CASE("rotating a converged disposition preserves the energy") {
  auto d = kpx::optimize_disposition({1, 6}, 1.0, 2);
  auto energy = [](const std::vector<Vec3>& x) {
    double e = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = i + 1; j < x.size(); ++j) {
        Vec3 diff{x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]};
        e += 2.0 / kpx::norm3(diff);
      }
    return e;
  };
  const double c = std::cos(0.7), s = std::sin(0.7);
  std::vector<Vec3> rotated;
  for (const auto& p : d.positions)
    rotated.push_back({c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]});
  REQUIRE_THAT(energy(rotated),
               Catch::Matchers::WithinAbs(energy(d.positions), 1e-9));
}

TEST_CASE("verify_disposition detects an off-shell point") {
  auto d = kpx::optimize_disposition({1, 6}, 1.0, 4);
  Vec3& p = d.positions[3];
  double n = kpx::norm3(p);
  for (int c = 0; c < 3; ++c) p[c] *= (n + 0.01) / n;
  REQUIRE_THAT(kpx::verify_disposition(d).shell_error_max,
               Catch::Matchers::WithinAbs(0.01, 1e-6));
}

TEST_CASE("nearest-kernel regions") {
  auto d = kpx::optimize_disposition({1, 6}, 2.1, 3);
  REQUIRE(kpx::nearest_kernel_index(d, {0, 0, 0}) == 0);
  // probe exactly at a shell point
  REQUIRE(kpx::nearest_kernel_index(d, d.positions[4]) == 4);
  REQUIRE_THROWS_AS(kpx::nearest_kernel_regions(d, 4), std::invalid_argument);

  // octahedral symmetry: the 6 shell regions have equal volume within 2%
  auto probes = kpx::nearest_kernel_regions(d, 96);
  std::vector<std::size_t> count(d.K(), 0);
  for (const auto& pr : probes) count[pr.kernel_index]++;
  double mean = 0;
  for (std::size_t k = 1; k <= 6; ++k) mean += double(count[k]);
  mean /= 6.0;
  for (std::size_t k = 1; k <= 6; ++k)
    REQUIRE(std::abs(double(count[k]) - mean) / mean < 0.02);
}

TEST_CASE("disposition text round trip") {
  auto d = kpx::optimize_disposition({1, 6, 12}, 2.1, 8);
  std::stringstream ss;
  kpx::save_disposition(d, ss);
  auto back = kpx::load_disposition(ss);
  REQUIRE(back.K() == d.K());
  REQUIRE(back.shell_counts == d.shell_counts);
  REQUIRE_THAT(back.sigma, Catch::Matchers::WithinAbs(d.sigma, 1e-9));
  for (std::size_t k = 0; k < d.K(); ++k)
    for (int c = 0; c < 3; ++c)
      REQUIRE_THAT(back.positions[k][c],
                   Catch::Matchers::WithinRel(d.positions[k][c], 1e-7) ||
                       Catch::Matchers::WithinAbs(d.positions[k][c], 1e-8));
}

TEST_CASE("malformed disposition files are rejected") {
  std::stringstream empty("");
  REQUIRE_THROWS_AS(kpx::load_disposition(empty), std::runtime_error);
  std::stringstream truncated("3 1 1.0 1.0\n1 2\n0 0 0 0\n");
  REQUIRE_THROWS_WITH(kpx::load_disposition(truncated),
                      Catch::Matchers::ContainsSubstring("truncated"));
}
