#pragma once

// Synthetic geometric-primitive dataset and training-time augmentation.
// Four surface classes (flat patch, sphere cap, straight edge, trihedral
// corner) that a local-geometry operator can separate.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "kpx/sampling.hpp"

namespace kpx {

constexpr std::size_t kSynthClasses = 4;

inline const char* synth_class_name(int c) {
  switch (c) {
    case 0: return "plane";
    case 1: return "sphere";
    case 2: return "edge";
    case 3: return "corner";
  }
  return "?";
}

namespace detail {

// All primitives fit in a ~0.5 m box centered on the origin and carry a
// small surface noise so they are not degenerate after subsampling.
inline void emit_primitive(int cls, std::size_t n, std::mt19937_64& rng,
                           const Vec3& center, double noise_sigma,
                           std::vector<Vec3>& out) {
  std::uniform_real_distribution<double> u(-0.25, 0.25);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p{0, 0, 0};
    switch (cls) {
      case 0: {  // flat patch
        p = {u(rng), u(rng), noise(rng)};
        break;
      }
      case 1: {  // sphere cap, radius 0.25, upper hemisphere
        double phi = u01(rng) * 2.0 * M_PI;
        double ct = u01(rng);  // cos(theta) in [0,1]
        double st = std::sqrt(1.0 - ct * ct);
        double r = 0.25 + noise(rng);
        p = {r * st * std::cos(phi), r * st * std::sin(phi), r * ct};
        break;
      }
      case 2: {  // two half-planes meeting along the y axis
        double a = u(rng), b = u(rng);
        if (u01(rng) < 0.5)
          p = {std::abs(a), b, noise(rng)};
        else
          p = {noise(rng), b, std::abs(a)};
        break;
      }
      case 3: {  // three quarter-planes meeting at the origin
        double a = std::abs(u(rng)), b = std::abs(u(rng));
        double w = u01(rng);
        if (w < 1.0 / 3.0)
          p = {a, b, noise(rng)};
        else if (w < 2.0 / 3.0)
          p = {a, noise(rng), b};
        else
          p = {noise(rng), a, b};
        break;
      }
    }
    out.push_back({p[0] + center[0], p[1] + center[1], p[2] + center[2]});
  }
}

}  // namespace detail

// Segmentation scenes: every element contains one instance of each class,
// placed on a 2x2 grid with ~1 m spacing, labels per point. Classes are
// exactly balanced in expectation and within a few percent per scene.
inline StackedCloud synth_segmentation(std::size_t elements,
                                       std::size_t points_per_primitive,
                                       std::uint64_t seed,
                                       double noise_sigma = 0.0) {
  if (elements == 0) throw std::invalid_argument("synth: elements must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> jitter_n(
      points_per_primitive * 9 / 10, points_per_primitive * 11 / 10);
  StackedCloud cloud;
  for (std::size_t e = 0; e < elements; ++e) {
    std::size_t len = 0;
    for (int cls = 0; cls < int(kSynthClasses); ++cls) {
      Vec3 center{double(cls % 2), double(cls / 2), 0.0};
      std::size_t n = jitter_n(rng);
      detail::emit_primitive(cls, n, rng, center, noise_sigma, cloud.points);
      cloud.labels.insert(cloud.labels.end(), n, cls);
      len += n;
    }
    cloud.lengths.push_back(len);
  }
  cloud.check();
  return cloud;
}

// Classification set: one primitive per element, element label = class,
// classes assigned round-robin so counts differ by at most one.
inline StackedCloud synth_classification(std::size_t elements,
                                         std::size_t points_per_primitive,
                                         std::uint64_t seed,
                                         std::vector<int>* element_labels,
                                         double noise_sigma = 0.0) {
  if (elements == 0) throw std::invalid_argument("synth: elements must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> jitter_n(
      points_per_primitive * 9 / 10, points_per_primitive * 11 / 10);
  StackedCloud cloud;
  element_labels->clear();
  for (std::size_t e = 0; e < elements; ++e) {
    int cls = int(e % kSynthClasses);
    std::size_t n = jitter_n(rng);
    detail::emit_primitive(cls, n, rng, {0, 0, 0}, noise_sigma, cloud.points);
    cloud.lengths.push_back(n);
    element_labels->push_back(cls);
  }
  cloud.check();
  return cloud;
}

// Default input features: a constant one plus the (post-augmentation) height.
inline void attach_height_features(StackedCloud& cloud) {
  cloud.feature_dim = 2;
  cloud.features.resize(cloud.total() * 2);
  for (std::size_t i = 0; i < cloud.total(); ++i) {
    cloud.features[i * 2] = 1.0f;
    cloud.features[i * 2 + 1] = float(cloud.points[i][2]);
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double scale_lo = 0.9, scale_hi = 1.1;
  double flip_prob = 0.5;     // mirror of the first axis
  double jitter_sigma = 0.005;
  bool rotate = true;         // uniform rotation about the vertical axis
  bool normalize_unit_sphere = false;  // classification: applied first
};

inline void rotate_z(StackedCloud& cloud, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (auto& p : cloud.points) {
    double x = c * p[0] - s * p[1];
    double y = s * p[0] + c * p[1];
    p[0] = x;
    p[1] = y;
  }
}

// Applies, per batch element and in this order: unit-sphere normalization
// (when enabled), isotropic scale, first-axis flip, Gaussian jitter, vertical
// axis rotation.
inline void augment(StackedCloud& cloud, const AugmentationConfig& cfg,
                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> us(cfg.scale_lo, cfg.scale_hi);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_real_distribution<double> uang(0.0, 2.0 * M_PI);
  std::normal_distribution<double> jit(0.0, 1.0);
  std::size_t base = 0;
  for (std::size_t e = 0; e < cloud.elements(); ++e) {
    const std::size_t len = cloud.lengths[e];
    if (cfg.normalize_unit_sphere && len > 0) {
      Vec3 c{0, 0, 0};
      for (std::size_t i = 0; i < len; ++i)
        for (int a = 0; a < 3; ++a) c[a] += cloud.points[base + i][a];
      for (int a = 0; a < 3; ++a) c[a] /= double(len);
      double rmax = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        Vec3 d{cloud.points[base + i][0] - c[0],
               cloud.points[base + i][1] - c[1],
               cloud.points[base + i][2] - c[2]};
        rmax = std::max(rmax, norm3(d));
      }
      if (rmax == 0.0) rmax = 1.0;
      for (std::size_t i = 0; i < len; ++i)
        for (int a = 0; a < 3; ++a)
          cloud.points[base + i][a] =
              (cloud.points[base + i][a] - c[a]) / rmax;
    }
    const double s = us(rng);
    const bool flip = u01(rng) < cfg.flip_prob;
    for (std::size_t i = 0; i < len; ++i) {
      auto& p = cloud.points[base + i];
      for (int a = 0; a < 3; ++a) p[a] *= s;
      if (flip) p[0] = -p[0];
      if (cfg.jitter_sigma > 0.0)
        for (int a = 0; a < 3; ++a) p[a] += cfg.jitter_sigma * jit(rng);
    }
    if (cfg.rotate) {
      const double ang = uang(rng);
      const double ca = std::cos(ang), sa = std::sin(ang);
      for (std::size_t i = 0; i < len; ++i) {
        auto& p = cloud.points[base + i];
        double x = ca * p[0] - sa * p[1];
        double y = sa * p[0] + ca * p[1];
        p[0] = x;
        p[1] = y;
      }
    }
    base += len;
  }
}

// Slice one batch element out of a stacked cloud.
inline StackedCloud slice_element(const StackedCloud& in, std::size_t e) {
  if (e >= in.elements())
    throw std::out_of_range("slice_element: index out of range");
  std::size_t base = 0;
  for (std::size_t i = 0; i < e; ++i) base += in.lengths[i];
  StackedCloud out;
  out.feature_dim = in.feature_dim;
  const std::size_t len = in.lengths[e];
  out.points.assign(in.points.begin() + base, in.points.begin() + base + len);
  if (in.feature_dim)
    out.features.assign(in.features.begin() + base * in.feature_dim,
                        in.features.begin() + (base + len) * in.feature_dim);
  if (in.has_labels())
    out.labels.assign(in.labels.begin() + base,
                      in.labels.begin() + base + len);
  out.lengths.push_back(len);
  return out;
}

// Concatenate elements into one stacked batch.
inline StackedCloud stack_clouds(const std::vector<StackedCloud>& parts) {
  StackedCloud out;
  if (parts.empty()) return out;
  out.feature_dim = parts[0].feature_dim;
  for (const auto& p : parts) {
    p.check();
    if (p.feature_dim != out.feature_dim)
      throw std::invalid_argument("stack_clouds: feature dim mismatch");
    out.points.insert(out.points.end(), p.points.begin(), p.points.end());
    out.features.insert(out.features.end(), p.features.begin(),
                        p.features.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.lengths.insert(out.lengths.end(), p.lengths.begin(), p.lengths.end());
  }
  out.check();
  return out;
}

}  // namespace kpx
