#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <random>

#include "kpx/checkpoint.hpp"
#include "kpx/network.hpp"
#include "kpx/ply.hpp"

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("ply round trip preserves labels exactly and coordinates closely") {
  kpx::StackedCloud cloud;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 25; ++i) {
    cloud.points.push_back({u(rng), u(rng), u(rng)});
    cloud.labels.push_back(int(rng() % 5));
  }
  cloud.lengths = {25};
  TempFile tmp("io_roundtrip.ply");
  kpx::write_ply(cloud, tmp.path);
  auto back = kpx::read_ply(tmp.path);
  REQUIRE(back.total() == 25);
  REQUIRE(back.labels == cloud.labels);
  for (std::size_t i = 0; i < 25; ++i)
    for (int d = 0; d < 3; ++d)
      REQUIRE_THAT(back.points[i][d],
                   Catch::Matchers::WithinAbs(cloud.points[i][d], 1e-6));
}

TEST_CASE("ply rgb features survive a round trip") {
  kpx::StackedCloud cloud;
  cloud.points = {{0, 0, 0}, {1, 1, 1}};
  cloud.feature_dim = 3;
  cloud.features = {10, 20, 30, 200, 150, 100};
  cloud.lengths = {2};
  TempFile tmp("io_rgb.ply");
  kpx::write_ply(cloud, tmp.path);
  auto back = kpx::read_ply(tmp.path);
  REQUIRE(back.feature_dim == 3);
  REQUIRE(back.features == cloud.features);
}

TEST_CASE("ply reader skips unknown properties") {
  TempFile tmp("io_unknown.ply");
  {
    std::ofstream f(tmp.path);
    f << "ply\nformat ascii 1.0\nelement vertex 2\n"
         "property float x\nproperty float y\nproperty float z\n"
         "property float intensity\nend_header\n"
         "0 0 0 99\n1 2 3 42\n";
  }
  auto cloud = kpx::read_ply(tmp.path);
  REQUIRE(cloud.total() == 2);
  REQUIRE(cloud.points[1][2] == 3.0);
  REQUIRE(cloud.feature_dim == 0);
}

TEST_CASE("ply reader rejects broken files") {
  SECTION("truncated body") {
    TempFile tmp("io_trunc.ply");
    {
      std::ofstream f(tmp.path);
      f << "ply\nformat ascii 1.0\nelement vertex 3\n"
           "property float x\nproperty float y\nproperty float z\n"
           "end_header\n0 0 0\n";
    }
    REQUIRE_THROWS_WITH(kpx::read_ply(tmp.path),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("binary format") {
    TempFile tmp("io_binary.ply");
    {
      std::ofstream f(tmp.path);
      f << "ply\nformat binary_little_endian 1.0\nelement vertex 0\n"
           "end_header\n";
    }
    REQUIRE_THROWS_WITH(kpx::read_ply(tmp.path),
                        Catch::Matchers::ContainsSubstring("ascii"));
  }
  SECTION("missing coordinates") {
    TempFile tmp("io_noz.ply");
    {
      std::ofstream f(tmp.path);
      f << "ply\nformat ascii 1.0\nelement vertex 1\n"
           "property float x\nproperty float y\nend_header\n0 0\n";
    }
    REQUIRE_THROWS_WITH(kpx::read_ply(tmp.path),
                        Catch::Matchers::ContainsSubstring("x/y/z"));
  }
  SECTION("not a ply at all") {
    TempFile tmp("io_notply.ply");
    {
      std::ofstream f(tmp.path);
      f << "obj\n";
    }
    REQUIRE_THROWS_AS(kpx::read_ply(tmp.path), std::runtime_error);
  }
}

TEST_CASE("checkpoint entries and metadata round trip") {
  std::vector<kpx::CheckpointEntry> entries(2);
  entries[0].name = "a.w";
  entries[0].shape = {2, 3};
  entries[0].values = {1, 2, 3, 4, 5, 6.5f};
  entries[1].name = "b.bias";
  entries[1].shape = {4};
  entries[1].values = {-1, 0, 0.25f, 9};
  TempFile tmp("io_ckpt.bin");
  kpx::save_checkpoint(tmp.path, entries, "{\"k\":1}");
  std::string meta;
  auto back = kpx::load_checkpoint(tmp.path, &meta);
  REQUIRE(meta == "{\"k\":1}");
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(back[i].name == entries[i].name);
    REQUIRE(back[i].shape == entries[i].shape);
    REQUIRE(back[i].values == entries[i].values);
  }
}

TEST_CASE("checkpoint loader rejects foreign files") {
  TempFile tmp("io_ckpt_bad.bin");
  {
    std::ofstream f(tmp.path, std::ios::binary);
    f << "NOPE and then some bytes";
  }
  REQUIRE_THROWS_WITH(kpx::load_checkpoint(tmp.path),
                      Catch::Matchers::ContainsSubstring("magic"));
}

TEST_CASE("architecture config json round trip") {
  auto cfg = kpx::preset_config("kpconvx-s");
  cfg.double_shortcut = true;
  cfg.groups = 16;
  auto j = kpx::to_json(cfg);
  auto back = kpx::config_from_json(j);
  REQUIRE(back.name == cfg.name);
  REQUIRE(back.op == cfg.op);
  REQUIRE(back.head == cfg.head);
  REQUIRE(back.blocks_per_layer == cfg.blocks_per_layer);
  REQUIRE(back.channels == cfg.channels);
  REQUIRE(back.neighbors == cfg.neighbors);
  REQUIRE(back.shell_counts == cfg.shell_counts);
  REQUIRE(back.groups == 16);
  REQUIRE(back.double_shortcut);
  REQUIRE(back.cell0 == cfg.cell0);
  REQUIRE_THROWS_AS(kpx::preset_config("nope"), std::invalid_argument);
}
