#pragma once

#include <algorithm>
#include <bit>
#include <optional>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cube.hpp"
#include "phantom.hpp"
#include "volume.hpp"

namespace vesselforge {

struct Patch {
  int size = 0;
  std::vector<float> image;
  std::vector<float> vessel;
  std::vector<std::uint8_t> label;
  bool is_positive = false;
  std::string subject_id;
  Index3 center{};  // cube centre in source voxel coordinates

  friend bool operator==(const Patch&, const Patch&) = default;
};

// Lower corner of a cube of side s centred on c, shifted to stay inside dims.
inline Index3 cube_origin(const Index3& c, int s, const Index3& dims) {
  Index3 o{};
  for (int a = 0; a < 3; ++a) o[a] = std::clamp(c[a] - s / 2, 0, dims[a] - s);
  return o;
}

template <typename T>
std::vector<T> crop_cube(const Volume<T>& v, const Index3& origin, int s) {
  std::vector<T> out(cube::volume(s));
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y) {
      const T* row = &v.at(origin[0], origin[1] + y, origin[2] + z);
      std::copy(row, row + s, out.begin() + static_cast<std::ptrdiff_t>(cube::index(0, y, z, s)));
    }
  return out;
}

inline void check_patch_fits(const Grid& g, int s) {
  if (s < 1) throw ConfigError("patch size must be positive");
  for (int a = 0; a < 3; ++a)
    if (g.dims[a] < s) throw ShapeError("patch size " + std::to_string(s) + " exceeds volume dims");
}

// Cuts the three cubes around `center` (clamped in-bounds) and z-normalises the
// image cube. A default-constructed label volume yields an all-zero label.
inline Patch make_patch(const Volume3D& image, const Volume3D& vessel, const Mask* label, const Index3& center,
                        int s, const std::string& subject_id) {
  check_patch_fits(image.grid, s);
  const Index3 o = cube_origin(center, s, image.grid.dims);
  Patch p;
  p.size = s;
  p.image = crop_cube(image, o, s);
  z_normalize_inplace(p.image);
  p.vessel = crop_cube(vessel, o, s);
  p.label = label ? crop_cube(*label, o, s) : std::vector<std::uint8_t>(cube::volume(s), 0);
  p.is_positive = std::any_of(p.label.begin(), p.label.end(), [](std::uint8_t v) { return v != 0; });
  p.subject_id = subject_id;
  p.center = {o[0] + s / 2, o[1] + s / 2, o[2] + s / 2};
  return p;
}

struct PatchSet {
  std::vector<Patch> patches;
  std::size_t skipped = 0;  // warnings: requested patches that could not be produced
};

struct PositivePatchOptions {
  int per_site = 8;
  int patch_size = 64;
  int max_offset = 16;
};

inline Index3 round_center(const Vec3& c) {
  return {static_cast<int>(std::lround(c[0])), static_cast<int>(std::lround(c[1])),
          static_cast<int>(std::lround(c[2]))};
}

// Per site: the centred cube plus per_site-1 randomly offset cubes.
inline PatchSet extract_positive_patches(const Volume3D& image, const Volume3D& vessel, const Mask& weak,
                                         const std::vector<AneurysmSite>& sites, const PositivePatchOptions& opt,
                                         Rng& rng, const std::string& subject_id = "") {
  check_patch_fits(image.grid, opt.patch_size);
  if (opt.per_site < 1 || opt.max_offset < 0) throw ConfigError("positive patch options out of range");
  PatchSet out;
  const long long side = 2LL * opt.max_offset + 1;
  const long long distinct = side * side * side;
  for (const auto& site : sites) {
    const Index3 c = round_center(site.center);
    std::vector<Index3> offsets{{0, 0, 0}};
    std::set<Index3> seen{{0, 0, 0}};
    while (static_cast<int>(offsets.size()) < opt.per_site) {
      Index3 o{};
      for (int a = 0; a < 3; ++a) o[a] = static_cast<int>(rng.uniform_int(-opt.max_offset, opt.max_offset));
      if (seen.insert(o).second || static_cast<long long>(seen.size()) >= distinct) offsets.push_back(o);
    }
    for (const auto& o : offsets) {
      Patch p = make_patch(image, vessel, &weak, {c[0] + o[0], c[1] + o[1], c[2] + o[2]}, opt.patch_size, subject_id);
      if (!p.is_positive) {
        ++out.skipped;
        continue;
      }
      out.patches.push_back(std::move(p));
    }
  }
  return out;
}

struct NegativeMix {
  double vessel_like = 1.0 / 3.0;
  double landmark = 1.0 / 3.0;
  double random = 1.0 / 3.0;
};

struct NegativePatchOptions {
  int count = 50;
  int patch_size = 64;
  NegativeMix mix;
  int retries = 200;  // redraws per patch before giving up
};

// Summed-volume table for O(1) box counts.
class BoxCounter {
 public:
  explicit BoxCounter(const Mask& m) : d_(m.grid.dims) {
    table_.assign(static_cast<std::size_t>(d_[0] + 1) * (d_[1] + 1) * (d_[2] + 1), 0);
    for (int z = 0; z < d_[2]; ++z)
      for (int y = 0; y < d_[1]; ++y)
        for (int x = 0; x < d_[0]; ++x)
          at(x + 1, y + 1, z + 1) = (m.at(x, y, z) ? 1 : 0) + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) +
                                    at(x + 1, y + 1, z) - at(x, y, z + 1) - at(x, y + 1, z) - at(x + 1, y, z) +
                                    at(x, y, z);
  }

  // Foreground voxels in [lo, lo + s) per axis.
  long long count(const Index3& lo, int s) const {
    const int x0 = lo[0], y0 = lo[1], z0 = lo[2], x1 = lo[0] + s, y1 = lo[1] + s, z1 = lo[2] + s;
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0) +
           at(x1, y0, z0) - at(x0, y0, z0);
  }

 private:
  long long& at(int x, int y, int z) { return table_[(static_cast<std::size_t>(z) * (d_[1] + 1) + y) * (d_[0] + 1) + x]; }
  long long at(int x, int y, int z) const {
    return table_[(static_cast<std::size_t>(z) * (d_[1] + 1) + y) * (d_[0] + 1) + x];
  }
  Index3 d_;
  std::vector<long long> table_;
};

// Centres of cubes that fit without clamping lie in [s/2, dim - s + s/2].
inline bool center_fits(const Index3& c, int s, const Index3& dims) {
  for (int a = 0; a < 3; ++a)
    if (c[a] < s / 2 || c[a] > dims[a] - s + s / 2) return false;
  return true;
}

inline std::vector<Vec3> vessel_landmarks(const Volume3D& vessel) {
  std::vector<double> values(vessel.data.begin(), vessel.data.end());
  const double cut = percentile(values, 95.0);
  Mask m(vessel.grid);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = vessel.data[i] > cut && vessel.data[i] > 0.0f;
  const Components cc = connected_components(m);
  std::vector<Vec3> sums(cc.count(), Vec3{0, 0, 0});
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto id = cc.labels.data[i];
    if (!id) continue;
    const auto p = vessel.grid.coords(i);
    for (int a = 0; a < 3; ++a) sums[id - 1][a] += p[a];
  }
  std::vector<Vec3> out;
  for (std::size_t k = 0; k < sums.size(); ++k) {
    if (cc.sizes[k] < 5) continue;
    Vec3 c{};
    for (int a = 0; a < 3; ++a) c[a] = sums[k][a] / double(cc.sizes[k]);
    out.push_back(c);
  }
  return out;
}

// Vessel-like, landmark-jittered and uniform random cubes, none touching the weak label.
inline PatchSet extract_negative_patches(const Volume3D& image, const Volume3D& vessel, const Mask& weak,
                                         const NegativePatchOptions& opt, Rng& rng,
                                         const std::string& subject_id = "") {
  const int s = opt.patch_size;
  check_patch_fits(image.grid, s);
  const auto& mix = opt.mix;
  if (mix.vessel_like < 0 || mix.landmark < 0 || mix.random < 0 ||
      std::abs(mix.vessel_like + mix.landmark + mix.random - 1.0) > 1e-6)
    throw ConfigError("negative patch mix fractions must be nonnegative and sum to 1");
  const Index3& dims = image.grid.dims;
  const BoxCounter weak_count(weak);

  std::vector<double> values(vessel.data.begin(), vessel.data.end());
  const double p99 = percentile(values, 99.0);
  std::vector<Index3> vessel_candidates;
  for (std::size_t i = 0; i < vessel.size(); ++i) {
    if (vessel.data[i] < p99) continue;
    const auto p = vessel.grid.coords(i);
    if (center_fits(p, s, dims)) vessel_candidates.push_back(p);
  }
  const auto landmarks = vessel_landmarks(vessel);

  const int n_vessel = static_cast<int>(std::lround(opt.count * mix.vessel_like));
  const int n_landmark = std::min(opt.count - n_vessel, static_cast<int>(std::lround(opt.count * mix.landmark)));
  const int n_random = std::max(0, opt.count - n_vessel - n_landmark);

  auto random_center = [&] {
    Index3 c{};
    for (int a = 0; a < 3; ++a) c[a] = static_cast<int>(rng.uniform_int(s / 2, dims[a] - s + s / 2));
    return c;
  };
  enum class Kind { vessel_like, landmark, random };
  auto draw = [&](Kind kind) -> std::optional<Index3> {
    switch (kind) {
      case Kind::vessel_like:
        if (vessel_candidates.empty()) return std::nullopt;
        return vessel_candidates[rng.uniform_int(0, static_cast<std::int64_t>(vessel_candidates.size()) - 1)];
      case Kind::landmark: {
        if (landmarks.empty()) return random_center();
        const auto& l = landmarks[rng.uniform_int(0, static_cast<std::int64_t>(landmarks.size()) - 1)];
        Index3 c{};
        for (int a = 0; a < 3; ++a) {
          const double j = rng.uniform(-s / 4.0, s / 4.0);
          c[a] = std::clamp(static_cast<int>(std::lround(l[a] + j)), s / 2, dims[a] - s + s / 2);
        }
        return c;
      }
      case Kind::random: return random_center();
    }
    return std::nullopt;
  };

  PatchSet out;
  auto produce = [&](Kind kind, int n) {
    for (int i = 0; i < n; ++i) {
      bool done = false;
      for (int attempt = 0; attempt < opt.retries && !done; ++attempt) {
        const auto c = draw(kind);
        if (!c) break;
        const Index3 o = cube_origin(*c, s, dims);
        if (weak_count.count(o, s) > 0) continue;
        out.patches.push_back(make_patch(image, vessel, &weak, *c, s, subject_id));
        done = true;
      }
      if (!done) ++out.skipped;
    }
  };
  produce(Kind::vessel_like, n_vessel);
  produce(Kind::landmark, n_landmark);
  produce(Kind::random, n_random);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

enum class Augmentation { gaussian_noise, contrast_gamma, intensity_shift, rot90, flip, zoom };

struct AugmentOptions {
  int min_ops = 2;
  int max_ops = 5;
  std::array<double, 2> noise_std{0.01, 0.1};  // fraction of patch std
  std::array<double, 2> gamma{0.7, 1.5};
  std::array<double, 2> shift{-0.1, 0.1};  // fraction of intensity range
  std::array<double, 2> zoom{0.9, 1.1};
};

namespace detail {

inline void zoom_cube(Patch& p, double scale) {
  const int s = p.size;
  const double c = (s - 1) / 2.0;
  const Grid g{{s, s, s}, {1, 1, 1}, {0, 0, 0}};
  const Volume3D img(g, p.image), ves(g, p.vessel);
  const Mask lbl(g, p.label);
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double sx = c + (x - c) / scale, sy = c + (y - c) / scale, sz = c + (z - c) / scale;
        const auto i = cube::index(x, y, z, s);
        p.image[i] = static_cast<float>(sample_trilinear(img, sx, sy, sz));
        p.vessel[i] = static_cast<float>(sample_trilinear(ves, sx, sy, sz));
        const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, s - 1);
        const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, s - 1);
        const int nz = std::clamp(static_cast<int>(std::lround(sz)), 0, s - 1);
        p.label[i] = lbl.at(nx, ny, nz);
      }
}

inline void apply_augmentation(Patch& p, Augmentation a, Rng& rng, const AugmentOptions& opt) {
  const int s = p.size;
  auto [lo_it, hi_it] = std::minmax_element(p.image.begin(), p.image.end());
  const double lo = *lo_it, hi = *hi_it, range = hi - lo;
  switch (a) {
    case Augmentation::gaussian_noise: {
      double mean = 0, var = 0;
      for (float v : p.image) mean += v;
      mean /= double(p.image.size());
      for (float v : p.image) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / double(p.image.size())) * rng.uniform(opt.noise_std[0], opt.noise_std[1]);
      for (float& v : p.image) v = static_cast<float>(v + sd * rng.normal());
      break;
    }
    case Augmentation::contrast_gamma: {
      const double gamma = rng.uniform(opt.gamma[0], opt.gamma[1]);
      if (range <= 0.0) break;
      for (float& v : p.image) v = static_cast<float>(lo + range * std::pow((v - lo) / range, gamma));
      break;
    }
    case Augmentation::intensity_shift: {
      const double shift = rng.uniform(opt.shift[0], opt.shift[1]) * range;
      for (float& v : p.image) v = static_cast<float>(v + shift);
      break;
    }
    case Augmentation::rot90: {
      static constexpr int planes[3][2] = {{0, 1}, {1, 2}, {0, 2}};
      const auto& pl = planes[rng.uniform_int(0, 2)];
      const int k = static_cast<int>(rng.uniform_int(1, 3));
      cube::rot90(std::span(p.image), s, pl[0], pl[1], k);
      cube::rot90(std::span(p.vessel), s, pl[0], pl[1], k);
      cube::rot90(std::span(p.label), s, pl[0], pl[1], k);
      break;
    }
    case Augmentation::flip: {
      const int axis = static_cast<int>(rng.uniform_int(0, 2));
      cube::flip(std::span(p.image), s, axis);
      cube::flip(std::span(p.vessel), s, axis);
      cube::flip(std::span(p.label), s, axis);
      break;
    }
    case Augmentation::zoom: zoom_cube(p, rng.uniform(opt.zoom[0], opt.zoom[1])); break;
  }
}

}  // namespace detail

// Draws 2..5 distinct augmentations and applies them in draw order.
inline Patch augment_patch(Patch p, Rng& rng, const AugmentOptions& opt = {}) {
  std::vector<Augmentation> menu{Augmentation::gaussian_noise, Augmentation::contrast_gamma,
                                 Augmentation::intensity_shift, Augmentation::rot90,
                                 Augmentation::flip,           Augmentation::zoom};
  const int m = static_cast<int>(rng.uniform_int(opt.min_ops, std::min<int>(opt.max_ops, int(menu.size()))));
  for (int i = 0; i < m; ++i) {
    const auto j = rng.uniform_int(i, static_cast<std::int64_t>(menu.size()) - 1);
    std::swap(menu[i], menu[j]);
    detail::apply_augmentation(p, menu[i], rng, opt);
  }
  z_normalize_inplace(p.image);
  p.is_positive = std::any_of(p.label.begin(), p.label.end(), [](std::uint8_t v) { return v != 0; });
  return p;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

class WeightedSampler {
 public:
  WeightedSampler(std::vector<double> weights, std::uint64_t seed) : weights_(std::move(weights)), rng_(seed) {
    if (weights_.empty()) throw ConfigError("sampler needs at least one weight");
    double acc = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("sampler weights must be positive");
      acc += w;
      cumulative_.push_back(acc);
    }
  }

  std::size_t next() {
    const double u = rng_.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), weights_.size() - 1);
  }

  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<double> weights_;
  std::vector<double> cumulative_;
  Rng rng_;
};

// Positives carry N_neg / N_pos, negatives 1.
inline std::vector<double> default_sampler_weights(const std::vector<Patch>& patches) {
  std::size_t pos = 0;
  for (const auto& p : patches) pos += p.is_positive ? 1 : 0;
  const std::size_t neg = patches.size() - pos;
  const double wpos = (pos > 0 && neg > 0) ? double(neg) / double(pos) : 1.0;
  std::vector<double> w;
  w.reserve(patches.size());
  for (const auto& p : patches) w.push_back(p.is_positive ? wpos : 1.0);
  return w;
}

// Greedy non-maximum suppression over 26-neighbourhood local maxima of the
// vesselness map, strongest first.
inline std::vector<Index3> select_inference_centers(const Volume3D& vessel, int n, int patch, double nms_radius) {
  if (n <= 0) return {};
  check_patch_fits(vessel.grid, patch);
  const Grid& g = vessel.grid;
  std::vector<std::pair<float, std::size_t>> maxima;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const float v = vessel.at(x, y, z);
        if (!(v > 0.0f)) continue;
        bool is_max = true;
        for (int dz = -1; dz <= 1 && is_max; ++dz)
          for (int dy = -1; dy <= 1 && is_max; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (!dx && !dy && !dz) continue;
              if (g.contains(x + dx, y + dy, z + dz) && vessel.at(x + dx, y + dy, z + dz) > v) {
                is_max = false;
                break;
              }
            }
        if (is_max) maxima.emplace_back(v, g.index(x, y, z));
      }
  std::stable_sort(maxima.begin(), maxima.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Index3> out;
  const double r2 = nms_radius * nms_radius;
  for (const auto& [v, i] : maxima) {
    const auto p = g.coords(i);
    bool keep = true;
    for (const auto& q : out) {
      const double d2 = double(p[0] - q[0]) * (p[0] - q[0]) + double(p[1] - q[1]) * (p[1] - q[1]) +
                        double(p[2] - q[2]) * (p[2] - q[2]);
      if (d2 < r2) {
        keep = false;
        break;
      }
    }
    if (!keep) continue;
    out.push_back(p);
    if (static_cast<int>(out.size()) == n) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch cache: "VFPATCH\0", u32 version, u32 size, u32 flags, i32 centre[3],
// u32 id length, id bytes, then image f32, vessel f32, label u8 cubes.
// All little-endian.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "patch cache assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("truncated patch blob", static_cast<std::size_t>(std::max<std::streamoff>(0, in.tellg())));
  return v;
}

}  // namespace detail

inline void write_patch_blob(const Patch& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("VFPATCH", 8);
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.size));
  detail::put_le<std::uint32_t>(out, p.is_positive ? 1u : 0u);
  for (int a = 0; a < 3; ++a) detail::put_le<std::int32_t>(out, p.center[a]);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.subject_id.size()));
  out.write(p.subject_id.data(), static_cast<std::streamsize>(p.subject_id.size()));
  out.write(reinterpret_cast<const char*>(p.image.data()), static_cast<std::streamsize>(p.image.size() * 4));
  out.write(reinterpret_cast<const char*>(p.vessel.data()), static_cast<std::streamsize>(p.vessel.size() * 4));
  out.write(reinterpret_cast<const char*>(p.label.data()), static_cast<std::streamsize>(p.label.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Patch read_patch_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "VFPATCH", 8) != 0) throw FormatError("bad patch blob magic", 0);
  if (detail::get_le<std::uint32_t>(in) != 1) throw FormatError("unsupported patch blob version", 8);
  Patch p;
  p.size = static_cast<int>(detail::get_le<std::uint32_t>(in));
  if (p.size < 1 || p.size > 1024) throw FormatError("implausible patch size", 12);
  p.is_positive = (detail::get_le<std::uint32_t>(in) & 1u) != 0;
  for (int a = 0; a < 3; ++a) p.center[a] = detail::get_le<std::int32_t>(in);
  const auto id_len = detail::get_le<std::uint32_t>(in);
  if (id_len > 4096) throw FormatError("implausible subject id length", 32);
  p.subject_id.resize(id_len);
  in.read(p.subject_id.data(), id_len);
  const auto n = cube::volume(p.size);
  p.image.resize(n);
  p.vessel.resize(n);
  p.label.resize(n);
  in.read(reinterpret_cast<char*>(p.image.data()), static_cast<std::streamsize>(n * 4));
  in.read(reinterpret_cast<char*>(p.vessel.data()), static_cast<std::streamsize>(n * 4));
  in.read(reinterpret_cast<char*>(p.label.data()), static_cast<std::streamsize>(n));
  if (!in) throw SizeMismatchError("patch blob payload truncated in " + path.string());
  return p;
}

}  // namespace vesselforge
