#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "volume.hpp"

namespace vesselforge {

enum class VesselnessMeasure { sato, frangi };

inline VesselnessMeasure measure_from_string(const std::string& s) {
  if (s == "sato") return VesselnessMeasure::sato;
  if (s == "frangi") return VesselnessMeasure::frangi;
  throw ConfigError("unknown vesselness measure '" + s + "' (expected sato or frangi)");
}

inline std::string to_string(VesselnessMeasure m) { return m == VesselnessMeasure::sato ? "sato" : "frangi"; }

struct VesselnessParams {
  double sigma = 1.0;  // mm
  double alpha1 = 0.5;
  double alpha2 = 2.0;
  VesselnessMeasure measure = VesselnessMeasure::sato;
  double frangi_a = 0.5;
  double frangi_b = 0.5;
  double frangi_c = 0.5;
  bool normalize = true;
  // Extra scales for the max-over-sigma variant; empty means single scale.
  std::vector<double> extra_sigmas;

  void validate() const {
    if (!(sigma > 0.0)) throw ConfigError("vesselness sigma must be > 0");
    if (!(alpha1 > 0.0) || !(alpha2 > 0.0)) throw ConfigError("vesselness alpha1/alpha2 must be > 0");
    if (alpha1 > alpha2) throw ConfigError("vesselness alpha1 must not exceed alpha2");
    for (double s : extra_sigmas)
      if (!(s > 0.0)) throw ConfigError("vesselness extra sigmas must be > 0");
  }
};

// Symmetric 3x3 matrix in (xx, yy, zz, xy, xz, yz) order.
struct SymMat3 {
  double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;
};

enum HessianChannel { kXX = 0, kYY, kZZ, kXY, kXZ, kYZ };

struct HessianField {
  Grid grid;
  std::array<std::vector<float>, 6> channels;

  SymMat3 at(std::size_t i) const {
    return {channels[kXX][i], channels[kYY][i], channels[kZZ][i],
            channels[kXY][i], channels[kXZ][i], channels[kYZ][i]};
  }
};

namespace detail {

// d c b a | a b c d | d c b a
inline int reflect_index(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// Sampled Gaussian derivative kernels of order 0, 1, 2 at physical positions
// i * spacing. Moments are fixed so that constants, ramps and parabolas are
// differentiated exactly: sum g = 1, sum u g' = -1, sum g'' = 0, sum u^2 g'' = 2.
inline std::array<std::vector<double>, 3> gaussian_kernels(double sigma, double spacing) {
  const int radius = static_cast<int>(std::ceil(4.0 * sigma / spacing));
  const int n = 2 * radius + 1;
  std::array<std::vector<double>, 3> k{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  const double s2 = sigma * sigma;
  double sum0 = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double u = i * spacing;
    const double g = std::exp(-u * u / (2.0 * s2));
    k[0][i + radius] = g;
    k[1][i + radius] = -u / s2 * g;
    k[2][i + radius] = (u * u / s2 - 1.0) / s2 * g;
    sum0 += g;
  }
  for (auto& v : k[0]) v /= sum0;
  double m1 = 0.0;
  for (int i = -radius; i <= radius; ++i) m1 += i * spacing * k[1][i + radius];
  for (auto& v : k[1]) v *= -1.0 / m1;
  double sum2 = 0.0;
  for (double v : k[2]) sum2 += v;
  for (int i = 0; i < n; ++i) k[2][i] -= sum2 * k[0][i];
  double m2 = 0.0;
  for (int i = -radius; i <= radius; ++i) m2 += (i * spacing) * (i * spacing) * k[2][i + radius];
  for (auto& v : k[2]) v *= 2.0 / m2;
  return k;
}

// out[j] = sum_i in[reflect(j - i)] * k[i] along one axis.
inline std::vector<double> convolve_axis(const std::vector<double>& in, const Index3& dims, int axis,
                                         const std::vector<double>& kernel) {
  std::vector<double> out(in.size(), 0.0);
  const int radius = static_cast<int>(kernel.size() / 2);
  const int n = dims[axis];
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? std::size_t(dims[0]) : std::size_t(dims[0]) * dims[1];
  std::vector<double> line(n), result(n);
  const int other_a = axis == 0 ? 1 : 0;
  const int other_b = axis == 2 ? 1 : 2;
  for (int b = 0; b < dims[other_b]; ++b)
    for (int a = 0; a < dims[other_a]; ++a) {
      Index3 c{0, 0, 0};
      c[other_a] = a;
      c[other_b] = b;
      const std::size_t base = (static_cast<std::size_t>(c[2]) * dims[1] + c[1]) * dims[0] + c[0];
      for (int j = 0; j < n; ++j) line[j] = in[base + j * stride];
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += line[reflect_index(j - i, n)] * kernel[i + radius];
        result[j] = acc;
      }
      for (int j = 0; j < n; ++j) out[base + j * stride] = result[j];
    }
  return out;
}

}  // namespace detail

// Scale-normalised (sigma^2) Gaussian-derivative Hessian; sigma in mm.
inline HessianField gaussian_hessian(const Volume3D& v, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("hessian sigma must be > 0");
  const Grid& g = v.grid;
  std::array<std::array<std::vector<double>, 3>, 3> k;
  for (int a = 0; a < 3; ++a) k[a] = detail::gaussian_kernels(sigma, g.spacing[a]);

  const std::vector<double> src(v.data.begin(), v.data.end());
  // Derivative orders (x, y, z) per output channel.
  static constexpr int orders[6][3] = {{2, 0, 0}, {0, 2, 0}, {0, 0, 2}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};

  std::array<std::vector<double>, 3> along_z;
  parallel_for(3, [&](std::size_t o) { along_z[o] = detail::convolve_axis(src, g.dims, 2, k[2][o]); });

  HessianField h;
  h.grid = g;
  const double scale = sigma * sigma;
  parallel_for(6, [&](std::size_t c) {
    const auto& ord = orders[c];
    auto yz = detail::convolve_axis(along_z[ord[2]], g.dims, 1, k[1][ord[1]]);
    auto xyz = detail::convolve_axis(yz, g.dims, 0, k[0][ord[0]]);
    auto& out = h.channels[c];
    out.resize(xyz.size());
    for (std::size_t i = 0; i < xyz.size(); ++i) out[i] = static_cast<float>(xyz[i] * scale);
  });
  return h;
}

namespace detail {

// Cyclic Jacobi sweeps; used when the closed form is ill-conditioned.
inline std::array<double, 3> jacobi_eigvals(const SymMat3& m) {
  double a[3][3] = {{m.xx, m.xy, m.xz}, {m.xy, m.yy, m.yz}, {m.xz, m.yz, m.zz}};
  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    const double diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
    if (off <= 1e-300 || off <= 1e-34 * diag) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int r = 0; r < 3; ++r) {
          const double arp = a[r][p], arq = a[r][q];
          a[r][p] = c * arp - s * arq;
          a[r][q] = s * arp + c * arq;
        }
        for (int r = 0; r < 3; ++r) {
          const double apr = a[p][r], aqr = a[q][r];
          a[p][r] = c * apr - s * aqr;
          a[q][r] = s * apr + c * aqr;
        }
      }
  }
  std::array<double, 3> e{a[0][0], a[1][1], a[2][2]};
  std::sort(e.begin(), e.end(), std::greater<>());
  return e;
}

}  // namespace detail

// Eigenvalues sorted by signed value, descending.
inline std::array<double, 3> eigvals_sym3(const SymMat3& m) {
  const double p1 = m.xy * m.xy + m.xz * m.xz + m.yz * m.yz;
  if (p1 == 0.0) {
    std::array<double, 3> e{m.xx, m.yy, m.zz};
    std::sort(e.begin(), e.end(), std::greater<>());
    return e;
  }
  const double q = (m.xx + m.yy + m.zz) / 3.0;
  const double dx = m.xx - q, dy = m.yy - q, dz = m.zz - q;
  const double p2 = dx * dx + dy * dy + dz * dz + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  if (!(p > 1e-150)) return detail::jacobi_eigvals(m);
  const double bxx = dx / p, byy = dy / p, bzz = dz / p;
  const double bxy = m.xy / p, bxz = m.xz / p, byz = m.yz / p;
  const double det = bxx * (byy * bzz - byz * byz) - bxy * (bxy * bzz - byz * bxz) + bxz * (bxy * byz - byy * bxz);
  const double r = det / 2.0;
  // acos loses precision as |r| -> 1 (two eigenvalues nearly equal).
  if (1.0 - std::abs(r) < 1e-6) return detail::jacobi_eigvals(m);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  std::array<double, 3> e{e1, e2, e3};
  std::sort(e.begin(), e.end(), std::greater<>());
  return e;
}

// Asymmetric line measure on eigenvalues l1 >= l2 >= l3.
inline double sato_response(const std::array<double, 3>& l, double alpha1, double alpha2) {
  if (l[1] >= 0.0 || l[2] >= 0.0) return 0.0;
  const double lc = std::sqrt(l[1] * l[2]);
  if (lc < 1e-12) return 0.0;
  const double alpha = l[0] <= 0.0 ? alpha1 : alpha2;
  const double d = alpha * lc;
  return lc * std::exp(-(l[0] * l[0]) / (2.0 * d * d));
}

// Classic bright-tube measure.
inline double frangi_response(const std::array<double, 3>& l, double a, double b, double c) {
  std::array<double, 3> m = l;
  std::sort(m.begin(), m.end(), [](double u, double v) { return std::abs(u) < std::abs(v); });
  if (m[1] > 0.0 || m[2] > 0.0) return 0.0;
  if (m[2] == 0.0 || m[1] == 0.0) return 0.0;
  const double ra = std::abs(m[1]) / std::abs(m[2]);
  const double rb = std::abs(m[0]) / std::sqrt(std::abs(m[1] * m[2]));
  const double s = std::sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2]);
  return (1.0 - std::exp(-ra * ra / (2 * a * a))) * std::exp(-rb * rb / (2 * b * b)) *
         (1.0 - std::exp(-s * s / (2 * c * c)));
}

inline double vesselness_response(const std::array<double, 3>& l, const VesselnessParams& p) {
  return p.measure == VesselnessMeasure::sato ? sato_response(l, p.alpha1, p.alpha2)
                                              : frangi_response(l, p.frangi_a, p.frangi_b, p.frangi_c);
}

inline Volume3D vesselness_map(const Volume3D& v, const VesselnessParams& p) {
  p.validate();
  std::vector<double> sigmas{p.sigma};
  sigmas.insert(sigmas.end(), p.extra_sigmas.begin(), p.extra_sigmas.end());
  Volume3D out(v.grid, 0.0f);
  for (double sigma : sigmas) {
    const HessianField h = gaussian_hessian(v, sigma);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = vesselness_response(eigvals_sym3(h.at(i)), p);
      out.data[i] = std::max(out.data[i], static_cast<float>(r));
    }
  }
  if (p.normalize) {
    const float mx = *std::max_element(out.data.begin(), out.data.end());
    if (mx > 1e-12f)
      for (float& x : out.data) x /= mx;
  }
  return out;
}

}  // namespace vesselforge
