#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"

namespace vesselforge {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

// Physical sampling of a dense volume. Voxel (x, y, z) sits at
// origin + (x, y, z) * spacing, x varying fastest in memory.
struct Grid {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  Index3 coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  bool same_shape(const Grid& o) const { return dims == o.dims; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw ShapeError("volume dims must be positive");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw ShapeError("volume spacing must be positive and finite");
    }
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

template <typename T>
struct Volume {
  Grid grid;
  std::vector<T> data;

  Volume() : data(1, T{}) {}
  explicit Volume(const Grid& g, T fill = T{}) : grid(g), data(g.size(), fill) { g.validate(); }
  Volume(const Grid& g, std::vector<T> values) : grid(g), data(std::move(values)) {
    g.validate();
    if (data.size() != g.size()) throw SizeMismatchError("volume data length does not match dims");
  }

  const Index3& dims() const { return grid.dims; }
  std::size_t size() const { return data.size(); }
  T& at(int x, int y, int z) { return data[grid.index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data[grid.index(x, y, z)]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using Volume3D = Volume<float>;
using Mask = Volume<std::uint8_t>;
using LabelMap = Volume<std::uint32_t>;

template <typename T>
std::size_t count_nonzero(const Volume<T>& v) {
  return static_cast<std::size_t>(
      std::count_if(v.data.begin(), v.data.end(), [](T x) { return x != T{}; }));
}

// Trilinear sample at continuous voxel coordinates, clamping to the edge.
template <typename T>
double sample_trilinear(const Volume<T>& v, double x, double y, double z) {
  const auto& d = v.grid.dims;
  const double p[3] = {std::clamp(x, 0.0, double(d[0] - 1)), std::clamp(y, 0.0, double(d[1] - 1)),
                       std::clamp(z, 0.0, double(d[2] - 1))};
  int lo[3], hi[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = static_cast<int>(std::floor(p[a]));
    hi[a] = std::min(lo[a] + 1, d[a] - 1);
    f[a] = p[a] - lo[a];
  }
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int ix = (c & 1) ? hi[0] : lo[0];
    const int iy = (c & 2) ? hi[1] : lo[1];
    const int iz = (c & 4) ? hi[2] : lo[2];
    const double w = ((c & 1) ? f[0] : 1 - f[0]) * ((c & 2) ? f[1] : 1 - f[1]) *
                     ((c & 4) ? f[2] : 1 - f[2]);
    if (w != 0.0) acc += w * static_cast<double>(v.at(ix, iy, iz));
  }
  return acc;
}

inline Index3 resampled_dims(const Grid& g, const Vec3& target_spacing) {
  Index3 out{};
  for (int a = 0; a < 3; ++a)
    out[a] = std::max(1, static_cast<int>(std::lround(g.dims[a] * g.spacing[a] / target_spacing[a])));
  return out;
}

// Output voxel i maps to physical origin + i * target_spacing; that position is
// looked up in the source grid.
inline Volume3D resample_trilinear(const Volume3D& v, const Vec3& target_spacing) {
  for (double s : target_spacing)
    if (!(s > 0.0)) throw ConfigError("target spacing must be positive");
  Grid out_grid{resampled_dims(v.grid, target_spacing), target_spacing, v.grid.origin};
  Volume3D out(out_grid);
  const auto& dims = out_grid.dims;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const double sx = x * target_spacing[0] / v.grid.spacing[0];
        const double sy = y * target_spacing[1] / v.grid.spacing[1];
        const double sz = z * target_spacing[2] / v.grid.spacing[2];
        out.at(x, y, z) = static_cast<float>(sample_trilinear(v, sx, sy, sz));
      }
  return out;
}

// Nearest-neighbour transfer of a mask onto another grid sharing the origin.
inline Mask resample_nearest(const Mask& m, const Grid& target) {
  Mask out(target);
  const auto& d = m.grid.dims;
  for (int z = 0; z < target.dims[2]; ++z)
    for (int y = 0; y < target.dims[1]; ++y)
      for (int x = 0; x < target.dims[0]; ++x) {
        const int sx = std::clamp(int(std::lround(x * target.spacing[0] / m.grid.spacing[0])), 0, d[0] - 1);
        const int sy = std::clamp(int(std::lround(y * target.spacing[1] / m.grid.spacing[1])), 0, d[1] - 1);
        const int sz = std::clamp(int(std::lround(z * target.spacing[2] / m.grid.spacing[2])), 0, d[2] - 1);
        out.at(x, y, z) = m.at(sx, sy, sz);
      }
  return out;
}

inline void z_normalize_inplace(std::span<float> values) {
  if (values.empty()) return;
  double mean = 0.0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (float v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(values.size()));
  if (sd < 1e-8) {
    std::fill(values.begin(), values.end(), 0.0f);
    return;
  }
  for (float& v : values) v = static_cast<float>((v - mean) / sd);
}

inline Volume3D z_normalize(const Volume3D& v) {
  Volume3D out = v;
  z_normalize_inplace(out.data);
  return out;
}

// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------------------
// Binary morphology
// ---------------------------------------------------------------------------

enum class Connectivity { six = 6, eighteen = 18, twenty_six = 26 };

inline Connectivity connectivity_from_int(int n) {
  switch (n) {
    case 6: return Connectivity::six;
    case 18: return Connectivity::eighteen;
    case 26: return Connectivity::twenty_six;
    default: throw ConfigError("connectivity must be 6, 18 or 26, got " + std::to_string(n));
  }
}

// Neighbour offsets preceding the current voxel in raster order.
inline std::vector<Index3> backward_offsets(Connectivity c) {
  std::vector<Index3> out;
  for (int dz = -1; dz <= 0; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (c == Connectivity::six && manhattan > 1) continue;
        if (c == Connectivity::eighteen && manhattan > 2) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

struct Components {
  LabelMap labels;                 // 0 background, ids dense from 1
  std::vector<std::size_t> sizes;  // sizes[id - 1]
  std::size_t count() const { return sizes.size(); }
};

namespace detail {

struct DisjointSet {
  std::vector<std::uint32_t> parent;
  std::uint32_t make() {
    parent.push_back(static_cast<std::uint32_t>(parent.size()));
    return parent.back();
  }
  std::uint32_t find(std::uint32_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent[b] = a; else parent[a] = b;
  }
};

}  // namespace detail

// Two-pass union-find labeling of voxels whose value equals `value`. Ids are
// assigned in raster order of each component's first voxel.
template <typename T>
Components label_where(const Volume<T>& m, T value, Connectivity conn) {
  const Grid& g = m.grid;
  const auto offsets = backward_offsets(conn);
  std::vector<std::uint32_t> provisional(g.size(), 0);
  detail::DisjointSet sets;
  sets.make();  // slot 0 is background
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const std::size_t i = g.index(x, y, z);
        if (m.data[i] != value) continue;
        std::uint32_t lbl = 0;
        for (const auto& o : offsets) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!g.contains(nx, ny, nz)) continue;
          const std::uint32_t nl = provisional[g.index(nx, ny, nz)];
          if (nl == 0) continue;
          if (lbl == 0) lbl = nl; else sets.unite(lbl, nl);
        }
        provisional[i] = lbl ? lbl : sets.make();
      }

  Components out{LabelMap(g), {}};
  std::vector<std::uint32_t> dense(sets.parent.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (provisional[i] == 0) continue;
    const std::uint32_t root = sets.find(provisional[i]);
    if (dense[root] == 0) {
      out.sizes.push_back(0);
      dense[root] = static_cast<std::uint32_t>(out.sizes.size());
    }
    out.labels.data[i] = dense[root];
    ++out.sizes[dense[root] - 1];
  }
  return out;
}

inline Components connected_components(const Mask& m, Connectivity conn = Connectivity::twenty_six) {
  return label_where<std::uint8_t>(m, 1, conn);
}

inline Mask remove_small_components(const Mask& m, std::size_t min_voxels,
                                    Connectivity conn = Connectivity::twenty_six) {
  if (min_voxels < 1) throw ConfigError("min_voxels must be >= 1");
  const Components cc = connected_components(m, conn);
  Mask out = m;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto id = cc.labels.data[i];
    if (id != 0 && cc.sizes[id - 1] < min_voxels) out.data[i] = 0;
  }
  return out;
}

// Background components (6-connected) that never reach the volume border are
// turned into foreground.
inline Mask fill_holes(const Mask& m) {
  const Components bg = label_where<std::uint8_t>(m, 0, Connectivity::six);
  std::vector<char> touches_border(bg.count() + 1, 0);
  const auto& d = m.grid.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const bool border = x == 0 || y == 0 || z == 0 || x == d[0] - 1 || y == d[1] - 1 || z == d[2] - 1;
        if (border) touches_border[bg.labels.at(x, y, z)] = 1;
      }
  Mask out = m;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto id = bg.labels.data[i];
    if (id != 0 && !touches_border[id]) out.data[i] = 1;
  }
  return out;
}

}  // namespace vesselforge
