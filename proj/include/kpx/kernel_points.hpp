#pragma once

// Multi-shell kernel point dispositions: construction by constrained
// repulsion, verification and text serialization. Positions are expressed in
// multiples of the layer subsampling cell size.

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpx {

using Vec3 = std::array<double, 3>;

inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

struct KernelDisposition {
  std::vector<Vec3> positions;       // K x 3, positions[0] = origin
  std::vector<std::size_t> shell_counts;  // [1, N1, ..., Ns]
  std::vector<double> shell_radii;   // [r_1, ..., r_s]
  double radius = 0.0;
  double sigma = 0.0;
  bool converged = true;

  std::size_t K() const { return positions.size(); }
  std::size_t shells() const { return shell_counts.size() - 1; }

  // shell index of kernel point k (0 = center)
  std::size_t shell_of(std::size_t k) const {
    std::size_t acc = 0;
    for (std::size_t j = 0; j < shell_counts.size(); ++j) {
      acc += shell_counts[j];
      if (k < acc) return j;
    }
    throw std::out_of_range("shell_of: kernel index " + std::to_string(k));
  }
};

// Shell radii regularly distributed along the kernel radius: r_j = 2j/(2s+1)*r
inline std::vector<double> shell_radii(double r, std::size_t s) {
  if (r <= 0.0) throw std::invalid_argument("shell_radii: radius must be > 0");
  if (s == 0)
    throw std::invalid_argument(
        "shell_radii: need at least one shell (the center point is not a "
        "shell)");
  std::vector<double> out(s);
  for (std::size_t j = 1; j <= s; ++j)
    out[j - 1] = (2.0 * double(j)) / (2.0 * double(s) + 1.0) * r;
  return out;
}

struct KernelOptimizerOptions {
  double step = 1e-2;          // relative to kernel radius
  double clip = 0.1;           // max move per point per step, relative
  double grad_tol = 1e-5;      // per-point tangent gradient norm, unit radius
  std::size_t max_iters = 10000;
};

struct KernelOptimizerState {
  double step = 0.0;
  std::size_t iterations = 0;
  double energy = 0.0;
  std::vector<Vec3> forces;
};

namespace detail {

inline double repulsion_energy(const std::vector<Vec3>& x) {
  double e = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k)
    for (std::size_t l = k + 1; l < x.size(); ++l) {
      Vec3 d{x[k][0] - x[l][0], x[k][1] - x[l][1], x[k][2] - x[l][2]};
      e += 2.0 / norm3(d);  // E^tot counts each ordered pair
    }
  return e;
}

}  // namespace detail

// Minimizes the pairwise 1/d repulsion with every non-center point constrained
// to its shell sphere. Works at unit radius internally so the step schedule is
// scale free; the result is rescaled by r, which makes
// optimize([..], a*r, seed) == a * optimize([..], r, seed) exactly.
inline KernelDisposition optimize_disposition(
    const std::vector<std::size_t>& shell_counts, double r, std::uint64_t seed,
    const KernelOptimizerOptions& opts = {},
    KernelOptimizerState* state_out = nullptr) {
  if (shell_counts.size() < 2 || shell_counts[0] != 1)
    throw std::invalid_argument(
        "optimize_disposition: shell counts must start with the single center "
        "point, e.g. [1,14,28]");
  for (auto c : shell_counts)
    if (c < 1)
      throw std::invalid_argument(
          "optimize_disposition: every shell needs at least one point");
  if (r <= 0.0)
    throw std::invalid_argument("optimize_disposition: radius must be > 0");

  const std::size_t s = shell_counts.size() - 1;
  const std::vector<double> radii_unit = shell_radii(1.0, s);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<Vec3> x;           // unit-radius coordinates
  std::vector<double> rad_of;    // shell radius per point, 0 for center
  x.push_back({0.0, 0.0, 0.0});
  rad_of.push_back(0.0);
  for (std::size_t j = 1; j <= s; ++j)
    for (std::size_t i = 0; i < shell_counts[j]; ++i) {
      Vec3 v{gauss(rng), gauss(rng), gauss(rng)};
      double n = norm3(v);
      while (n < 1e-12) {
        v = {gauss(rng), gauss(rng), gauss(rng)};
        n = norm3(v);
      }
      double rj = radii_unit[j - 1];
      x.push_back({v[0] / n * rj, v[1] / n * rj, v[2] / n * rj});
      rad_of.push_back(rj);
    }
  const std::size_t K = x.size();

  double step = opts.step;
  double energy = detail::repulsion_energy(x);
  std::vector<Vec3> forces(K, Vec3{0, 0, 0});
  std::size_t iter = 0;
  bool converged = false;

  for (; iter < opts.max_iters; ++iter) {
    // descent direction: F_k = sum_{l != k} (x_k - x_l) / d^3
    bool rejitter = false;
    for (std::size_t k = 0; k < K; ++k) forces[k] = {0, 0, 0};
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = k + 1; l < K; ++l) {
        Vec3 d{x[k][0] - x[l][0], x[k][1] - x[l][1], x[k][2] - x[l][2]};
        double dist = norm3(d);
        if (dist < 1e-12) {
          rejitter = true;
          continue;
        }
        double inv3 = 1.0 / (dist * dist * dist);
        for (int a = 0; a < 3; ++a) {
          forces[k][a] += d[a] * inv3;
          forces[l][a] -= d[a] * inv3;
        }
      }
    if (rejitter) {
      for (std::size_t k = 1; k < K; ++k) {
        Vec3 v{x[k][0] + 1e-3 * gauss(rng), x[k][1] + 1e-3 * gauss(rng),
               x[k][2] + 1e-3 * gauss(rng)};
        double n = norm3(v);
        x[k] = {v[0] / n * rad_of[k], v[1] / n * rad_of[k],
                v[2] / n * rad_of[k]};
      }
      energy = detail::repulsion_energy(x);
      continue;
    }

    // constrain motion to the shell spheres: project onto tangent planes
    forces[0] = {0, 0, 0};  // center point is immovable
    double max_tangent = 0.0;
    for (std::size_t k = 1; k < K; ++k) {
      Vec3 nrm{x[k][0] / rad_of[k], x[k][1] / rad_of[k], x[k][2] / rad_of[k]};
      double along = dot3(forces[k], nrm);
      for (int a = 0; a < 3; ++a) forces[k][a] -= along * nrm[a];
      max_tangent = std::max(max_tangent, norm3(forces[k]));
    }
    if (max_tangent < opts.grad_tol) {
      converged = true;
      break;
    }

    // trial step with clipping, renormalized back to the shell radius;
    // reject steps that raise the energy and retry with a smaller step
    bool accepted = false;
    double trial = step;
    for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
      std::vector<Vec3> cand = x;
      for (std::size_t k = 1; k < K; ++k) {
        Vec3 mv{forces[k][0] * trial, forces[k][1] * trial,
                forces[k][2] * trial};
        double mn = norm3(mv);
        if (mn > opts.clip) {
          double f = opts.clip / mn;
          mv = {mv[0] * f, mv[1] * f, mv[2] * f};
        }
        Vec3 p{x[k][0] + mv[0], x[k][1] + mv[1], x[k][2] + mv[2]};
        double pn = norm3(p);
        cand[k] = {p[0] / pn * rad_of[k], p[1] / pn * rad_of[k],
                   p[2] / pn * rad_of[k]};
      }
      double e_new = detail::repulsion_energy(cand);
      if (e_new <= energy + 1e-12) {
        x = std::move(cand);
        energy = e_new;
        accepted = true;
      } else {
        trial *= 0.5;
      }
    }
    if (!accepted) break;  // no descent direction at any step size
    step = std::min(opts.step, trial * 1.5);
  }

  KernelDisposition d;
  d.shell_counts = shell_counts;
  d.shell_radii = shell_radii(r, s);
  d.radius = r;
  d.sigma = r;  // large influence radius, non-overlapping nearest-kernel areas
  d.converged = converged;
  d.positions.resize(K);
  for (std::size_t k = 0; k < K; ++k)
    d.positions[k] = {x[k][0] * r, x[k][1] * r, x[k][2] * r};
  if (state_out) {
    state_out->step = step;
    state_out->iterations = iter;
    state_out->energy = energy;  // unit-radius energy
    state_out->forces = forces;
  }
  return d;
}

struct DispositionReport {
  double shell_error_max = 0.0;
  double min_pairwise_distance = 0.0;
  double center_offset = 0.0;
};

inline DispositionReport verify_disposition(const KernelDisposition& d) {
  DispositionReport rep;
  rep.center_offset = norm3(d.positions[0]);
  rep.min_pairwise_distance = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < d.K(); ++k) {
    std::size_t sh = d.shell_of(k);
    if (sh > 0) {
      double err = std::abs(norm3(d.positions[k]) - d.shell_radii[sh - 1]);
      rep.shell_error_max = std::max(rep.shell_error_max, err);
    }
    for (std::size_t l = k + 1; l < d.K(); ++l) {
      Vec3 diff{d.positions[k][0] - d.positions[l][0],
                d.positions[k][1] - d.positions[l][1],
                d.positions[k][2] - d.positions[l][2]};
      rep.min_pairwise_distance = std::min(rep.min_pairwise_distance,
                                           norm3(diff));
    }
  }
  return rep;
}

struct RegionProbe {
  Vec3 position;
  std::size_t kernel_index;
};

inline std::size_t nearest_kernel_index(const KernelDisposition& d,
                                        const Vec3& p) {
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < d.K(); ++k) {
    Vec3 diff{p[0] - d.positions[k][0], p[1] - d.positions[k][1],
              p[2] - d.positions[k][2]};
    double d2 = dot3(diff, diff);
    if (d2 < best_d2) {  // ties keep the smaller kernel index
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

// Nearest-kernel assignment sampled on a cubic grid restricted to the kernel
// sphere. Used for diagnostics and the regions CSV export.
inline std::vector<RegionProbe> nearest_kernel_regions(
    const KernelDisposition& d, std::size_t resolution) {
  if (resolution < 8)
    throw std::invalid_argument("nearest_kernel_regions: resolution >= 8");
  std::vector<RegionProbe> probes;
  const double r = d.radius;
  for (std::size_t ix = 0; ix < resolution; ++ix)
    for (std::size_t iy = 0; iy < resolution; ++iy)
      for (std::size_t iz = 0; iz < resolution; ++iz) {
        Vec3 p{(-1.0 + (2.0 * ix + 1.0) / resolution) * r,
               (-1.0 + (2.0 * iy + 1.0) / resolution) * r,
               (-1.0 + (2.0 * iz + 1.0) / resolution) * r};
        if (dot3(p, p) > r * r) continue;
        probes.push_back({p, nearest_kernel_index(d, p)});
      }
  return probes;
}

// Text format: line 1 "K s r sigma", line 2 shell counts, then K lines
// "x y z shell_index" with 9 significant digits.
inline void save_disposition(const KernelDisposition& d, std::ostream& os) {
  os.precision(9);
  os << d.K() << " " << d.shells() << " " << d.radius << " " << d.sigma
     << "\n";
  for (std::size_t j = 0; j < d.shell_counts.size(); ++j)
    os << (j ? " " : "") << d.shell_counts[j];
  os << "\n";
  for (std::size_t k = 0; k < d.K(); ++k)
    os << d.positions[k][0] << " " << d.positions[k][1] << " "
       << d.positions[k][2] << " " << d.shell_of(k) << "\n";
}

inline void save_disposition(const KernelDisposition& d,
                             const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  save_disposition(d, f);
}

inline KernelDisposition load_disposition(std::istream& is) {
  KernelDisposition d;
  std::size_t K = 0, s = 0;
  if (!(is >> K >> s >> d.radius >> d.sigma))
    throw std::runtime_error("disposition file: malformed header");
  d.shell_counts.resize(s + 1);
  for (auto& c : d.shell_counts)
    if (!(is >> c))
      throw std::runtime_error("disposition file: malformed shell counts");
  d.shell_radii = shell_radii(d.radius, s);
  d.positions.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t shell;
    if (!(is >> d.positions[k][0] >> d.positions[k][1] >> d.positions[k][2] >>
          shell))
      throw std::runtime_error("disposition file: expected " +
                               std::to_string(K) + " points, truncated at " +
                               std::to_string(k));
  }
  std::size_t total = 0;
  for (auto c : d.shell_counts) total += c;
  if (total != K)
    throw std::runtime_error("disposition file: shell counts sum to " +
                             std::to_string(total) + ", header says " +
                             std::to_string(K));
  return d;
}

inline KernelDisposition load_disposition(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return load_disposition(f);
}

}  // namespace kpx
