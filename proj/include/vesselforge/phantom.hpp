#pragma once

#include <array>
#include <numeric>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nifti.hpp"
#include "vesselness.hpp"
#include "volume.hpp"

namespace vesselforge {

struct PhantomSpec {
  Index3 dims{48, 48, 48};
  Vec3 spacing{0.5, 0.5, 0.5};
  int n_vessels = 3;
  std::array<double, 2> vessel_radius_range{1.5, 2.5};  // voxels
  int n_aneurysms = 1;
  std::array<double, 2> aneurysm_radius_range{2.0, 3.5};  // voxels
  double intensity_vessel = 1.0;
  double intensity_background = 0.1;
  double noise_std = 0.03;
  double psf_sigma = 0.6;  // voxels
  std::uint64_t seed = 42;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 32) throw ConfigError("phantom dims must be >= 32 per axis");
      if (!(spacing[a] > 0.0)) throw ConfigError("phantom spacing must be > 0");
    }
    if (n_vessels < 1) throw ConfigError("phantom needs at least one vessel");
    if (n_aneurysms < 0) throw ConfigError("n_aneurysms must be >= 0");
    for (const auto& r : {vessel_radius_range, aneurysm_radius_range}) {
      if (!(r[0] > 0.0) || r[0] > r[1]) throw ConfigError("phantom radius ranges must be positive and ordered");
    }
    if (noise_std < 0.0 || psf_sigma < 0.0) throw ConfigError("noise_std and psf_sigma must be >= 0");
  }
};

struct AneurysmSite {
  Vec3 center{};  // voxel coordinates
  double radius = 0.0;
  int parent_vessel = 0;
  friend bool operator==(const AneurysmSite&, const AneurysmSite&) = default;
};

struct Phantom {
  Volume3D image;
  Mask precise;
  Mask weak;
  Mask vessels;
  std::vector<AneurysmSite> sites;
};

// Weak spheres are this many times the aneurysm radius.
inline constexpr double kWeakRadiusFactor = 1.5;

namespace detail {

inline Vec3 catmull_rom(const Vec3& p0, const Vec3& p1, const Vec3& p2, const Vec3& p3, double t) {
  Vec3 out{};
  const double t2 = t * t, t3 = t2 * t;
  for (int a = 0; a < 3; ++a)
    out[a] = 0.5 * (2 * p1[a] + (-p0[a] + p2[a]) * t + (2 * p0[a] - 5 * p1[a] + 4 * p2[a] - p3[a]) * t2 +
                    (-p0[a] + 3 * p1[a] - 3 * p2[a] + p3[a]) * t3);
  return out;
}

inline double dist(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

// Densely sampled centreline through random waypoints crossing the volume.
inline std::vector<Vec3> random_centerline(const Index3& dims, Rng& rng) {
  const int axis = static_cast<int>(rng.uniform_int(0, 2));
  const int waypoints = 5;
  std::vector<Vec3> pts;
  Vec3 start{}, end{};
  for (int a = 0; a < 3; ++a) {
    if (a == axis) {
      start[a] = -2.0;
      end[a] = dims[a] + 1.0;
    } else {
      start[a] = rng.uniform(0.2, 0.8) * (dims[a] - 1);
      end[a] = rng.uniform(0.2, 0.8) * (dims[a] - 1);
    }
  }
  for (int w = 0; w < waypoints; ++w) {
    const double t = double(w) / (waypoints - 1);
    Vec3 p{};
    for (int a = 0; a < 3; ++a) {
      p[a] = start[a] + t * (end[a] - start[a]);
      if (a != axis && w > 0 && w < waypoints - 1)
        p[a] = std::clamp(p[a] + rng.normal() * 0.08 * dims[a], 0.15 * dims[a], 0.85 * dims[a]);
    }
    pts.push_back(p);
  }
  std::vector<Vec3> samples;
  for (int s = 0; s + 1 < waypoints; ++s) {
    const Vec3& p0 = pts[std::max(0, s - 1)];
    const Vec3& p1 = pts[s];
    const Vec3& p2 = pts[s + 1];
    const Vec3& p3 = pts[std::min(waypoints - 1, s + 2)];
    const int steps = std::max(4, static_cast<int>(std::ceil(dist(p1, p2) / 0.25)));
    for (int i = 0; i < steps; ++i) samples.push_back(catmull_rom(p0, p1, p2, p3, double(i) / steps));
  }
  samples.push_back(pts.back());
  return samples;
}

inline void stamp_ball(Mask& m, const Vec3& c, double r) {
  const auto& d = m.grid.dims;
  const int lo[3] = {std::max(0, int(std::floor(c[0] - r))), std::max(0, int(std::floor(c[1] - r))),
                     std::max(0, int(std::floor(c[2] - r)))};
  const int hi[3] = {std::min(d[0] - 1, int(std::ceil(c[0] + r))), std::min(d[1] - 1, int(std::ceil(c[1] + r))),
                     std::min(d[2] - 1, int(std::ceil(c[2] + r)))};
  const double r2 = r * r;
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const double dx = x - c[0], dy = y - c[1], dz = z - c[2];
        if (dx * dx + dy * dy + dz * dz <= r2) m.at(x, y, z) = 1;
      }
}

inline void gaussian_blur_voxels(Volume3D& v, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernels(sigma, 1.0)[0];
  std::vector<double> buf(v.data.begin(), v.data.end());
  for (int axis = 0; axis < 3; ++axis) buf = convolve_axis(buf, v.grid.dims, axis, k);
  for (std::size_t i = 0; i < buf.size(); ++i) v.data[i] = static_cast<float>(buf[i]);
}

}  // namespace detail

// Tubes along smoothed random centrelines with saccular blobs whose centre sits
// on a vessel wall. Deterministic in spec.seed.
inline Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed));
  const Grid grid{spec.dims, spec.spacing, {0.0, 0.0, 0.0}};
  Phantom ph{Volume3D(grid), Mask(grid), Mask(grid), Mask(grid), {}};

  std::vector<std::vector<Vec3>> centerlines;
  std::vector<double> radii;
  for (int v = 0; v < spec.n_vessels; ++v) {
    centerlines.push_back(detail::random_centerline(spec.dims, rng));
    radii.push_back(rng.uniform(spec.vessel_radius_range[0], spec.vessel_radius_range[1]));
    for (const auto& p : centerlines.back()) detail::stamp_ball(ph.vessels, p, radii.back());
  }

  constexpr int kMaxAttempts = 500;
  for (int n = 0; n < spec.n_aneurysms; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const int vid = static_cast<int>(rng.uniform_int(0, spec.n_vessels - 1));
      const auto& line = centerlines[vid];
      const auto count = static_cast<std::int64_t>(line.size());
      const auto s = rng.uniform_int(count / 6, count - 1 - count / 6);
      const Vec3& p = line[s];
      const Vec3& prev = line[std::max<std::int64_t>(0, s - 2)];
      const Vec3& next = line[std::min<std::int64_t>(count - 1, s + 2)];
      Vec3 tangent{next[0] - prev[0], next[1] - prev[1], next[2] - prev[2]};
      const double tn = std::sqrt(tangent[0] * tangent[0] + tangent[1] * tangent[1] + tangent[2] * tangent[2]);
      if (tn < 1e-9) continue;
      for (double& t : tangent) t /= tn;
      Vec3 u{rng.normal(), rng.normal(), rng.normal()};
      const double along = u[0] * tangent[0] + u[1] * tangent[1] + u[2] * tangent[2];
      for (int a = 0; a < 3; ++a) u[a] -= along * tangent[a];
      const double un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      if (un < 1e-9) continue;
      const double radius = rng.uniform(spec.aneurysm_radius_range[0], spec.aneurysm_radius_range[1]);
      Vec3 c{};
      for (int a = 0; a < 3; ++a) c[a] = p[a] + radii[vid] * u[a] / un;

      const double weak_r = kWeakRadiusFactor * radius;
      bool inside = true;
      for (int a = 0; a < 3; ++a)
        if (c[a] - weak_r < 0.0 || c[a] + weak_r > spec.dims[a] - 1) inside = false;
      if (!inside) continue;
      bool clear = true;
      for (const auto& o : ph.sites)
        if (detail::dist(o.center, c) <= kWeakRadiusFactor * (o.radius + radius) + 1.0) clear = false;
      if (!clear) continue;

      Mask blob(grid);
      detail::stamp_ball(blob, c, radius);
      if (count_nonzero(blob) < 5) continue;
      for (std::size_t i = 0; i < blob.size(); ++i) ph.precise.data[i] |= blob.data[i];
      detail::stamp_ball(ph.weak, c, weak_r);
      ph.sites.push_back({c, radius, vid});
      placed = true;
    }
    if (!placed)
      throw CapacityError("could not place aneurysm " + std::to_string(n + 1) + " of " +
                          std::to_string(spec.n_aneurysms) + " after " + std::to_string(kMaxAttempts) + " attempts");
  }

  for (std::size_t i = 0; i < ph.image.size(); ++i) {
    const bool bright = ph.vessels.data[i] || ph.precise.data[i];
    ph.image.data[i] = static_cast<float>(spec.intensity_background + (bright ? spec.intensity_vessel : 0.0));
  }
  detail::gaussian_blur_voxels(ph.image, spec.psf_sigma);
  if (spec.noise_std > 0.0)
    for (float& x : ph.image.data) x = static_cast<float>(x + spec.noise_std * rng.normal());
  return ph;
}

// ---------------------------------------------------------------------------
// Datasets on disk
// ---------------------------------------------------------------------------

struct DatasetOptions {
  double control_fraction = 0.2;
  int min_aneurysms = 1;
  int max_aneurysms = 2;
  double test_fraction = 0.2;
  double val_fraction = 0.1;  // of the non-test subjects

  void validate() const {
    if (control_fraction < 0.0 || control_fraction > 1.0) throw ConfigError("control_fraction must be in [0,1]");
    if (test_fraction < 0.0 || test_fraction >= 1.0) throw ConfigError("test_fraction must be in [0,1)");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0,1)");
    if (min_aneurysms < 1 || max_aneurysms < min_aneurysms) throw ConfigError("aneurysm count range invalid");
  }
};

struct SubjectEntry {
  std::string id;
  std::string image_file;
  std::string precise_file;
  std::string weak_file;
  std::string split;
  std::vector<AneurysmSite> sites;
};

struct Manifest {
  std::filesystem::path root;  // directory the file paths are relative to
  std::uint64_t seed = 0;
  std::vector<SubjectEntry> subjects;

  std::vector<const SubjectEntry*> split(const std::string& name) const {
    std::vector<const SubjectEntry*> out;
    for (const auto& s : subjects)
      if (s.split == name) out.push_back(&s);
    return out;
  }
  std::filesystem::path path_of(const std::string& file) const { return root / file; }
};

inline nlohmann::json to_json(const AneurysmSite& s) {
  return {{"center", {s.center[0], s.center[1], s.center[2]}}, {"radius", s.radius}, {"parent_vessel", s.parent_vessel}};
}

inline AneurysmSite site_from_json(const nlohmann::json& j) {
  AneurysmSite s;
  for (int a = 0; a < 3; ++a) s.center[a] = j.at("center").at(a).get<double>();
  s.radius = j.at("radius").get<double>();
  s.parent_vessel = j.value("parent_vessel", 0);
  return s;
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  return {{"dims", s.dims},
          {"spacing", s.spacing},
          {"n_vessels", s.n_vessels},
          {"vessel_radius_range", s.vessel_radius_range},
          {"n_aneurysms", s.n_aneurysms},
          {"aneurysm_radius_range", s.aneurysm_radius_range},
          {"intensity_vessel", s.intensity_vessel},
          {"intensity_background", s.intensity_background},
          {"noise_std", s.noise_std},
          {"psf_sigma", s.psf_sigma},
          {"seed", s.seed}};
}

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : m.subjects) {
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& site : s.sites) sites.push_back(to_json(site));
    subjects.push_back({{"id", s.id},
                        {"files", {{"image", s.image_file}, {"precise", s.precise_file}, {"weak", s.weak_file}}},
                        {"split", s.split},
                        {"n_aneurysms", s.sites.size()},
                        {"sites", sites}});
  }
  return {{"format", "vesselforge-dataset"}, {"version", 1}, {"seed", m.seed}, {"subjects", subjects}};
}

inline Manifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root) {
  Manifest m;
  m.root = root;
  m.seed = j.value("seed", std::uint64_t{0});
  for (const auto& s : j.at("subjects")) {
    SubjectEntry e;
    e.id = s.at("id").get<std::string>();
    e.image_file = s.at("files").at("image").get<std::string>();
    e.precise_file = s.at("files").value("precise", "");
    e.weak_file = s.at("files").value("weak", "");
    e.split = s.at("split").get<std::string>();
    for (const auto& site : s.value("sites", nlohmann::json::array())) e.sites.push_back(site_from_json(site));
    m.subjects.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return manifest_from_json(j, path.parent_path());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
}

inline void save_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string subject_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%03d", i);
  return buf;
}

// Writes image/precise/weak volumes for each subject plus manifest.json.
inline Manifest make_dataset(int n_subjects, const PhantomSpec& tmpl, const std::filesystem::path& out_dir,
                             const DatasetOptions& opts = {}) {
  tmpl.validate();
  opts.validate();
  if (n_subjects < 1) throw ConfigError("n_subjects must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Rng plan(mix_seed(tmpl.seed, 0xDA7A));
  std::vector<int> order(n_subjects);
  std::iota(order.begin(), order.end(), 0);
  shuffle(order.begin(), order.end(), plan);
  const int n_controls = static_cast<int>(std::lround(n_subjects * opts.control_fraction));
  std::vector<char> is_control(n_subjects, 0);
  for (int i = 0; i < n_controls; ++i) is_control[order[i]] = 1;

  std::vector<int> aneurysm_counts(n_subjects, 0);
  for (int i = 0; i < n_subjects; ++i)
    if (!is_control[i]) aneurysm_counts[i] = static_cast<int>(plan.uniform_int(opts.min_aneurysms, opts.max_aneurysms));

  shuffle(order.begin(), order.end(), plan);
  const int n_test = static_cast<int>(std::lround(n_subjects * opts.test_fraction));
  const int rest = n_subjects - n_test;
  const int n_val = rest >= 2 ? std::max(1, static_cast<int>(std::lround(rest * opts.val_fraction))) : 0;
  std::vector<std::string> split(n_subjects, "train");
  for (int i = 0; i < n_test; ++i) split[order[i]] = "test";
  for (int i = n_test; i < n_test + n_val; ++i) split[order[i]] = "val";

  Manifest m;
  m.root = out_dir;
  m.seed = tmpl.seed;
  m.subjects.resize(n_subjects);
  parallel_for(static_cast<std::size_t>(n_subjects), [&](std::size_t i) {
    PhantomSpec s = tmpl;
    s.seed = mix_seed(tmpl.seed, i + 1);
    s.n_aneurysms = aneurysm_counts[i];
    const Phantom ph = generate_phantom(s);
    SubjectEntry e;
    e.id = subject_id(static_cast<int>(i));
    e.image_file = e.id + "_image.nii";
    e.precise_file = e.id + "_precise.nii";
    e.weak_file = e.id + "_weak.nii";
    e.split = split[i];
    e.sites = ph.sites;
    nifti::write_volume(ph.image, out_dir / e.image_file);
    nifti::write_volume(ph.precise, out_dir / e.precise_file);
    nifti::write_volume(ph.weak, out_dir / e.weak_file);
    m.subjects[i] = std::move(e);
  });
  save_json(to_json(m), out_dir / "manifest.json");
  return m;
}

}  // namespace vesselforge
