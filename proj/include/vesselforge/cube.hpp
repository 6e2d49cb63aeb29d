#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"

// Voxel permutations on S^3 cubes stored x-fastest. Shared by augmentation
// and test-time augmentation.
namespace vesselforge::cube {

inline std::size_t index(int x, int y, int z, int s) {
  return (static_cast<std::size_t>(z) * s + y) * s + x;
}

inline std::size_t volume(int s) { return static_cast<std::size_t>(s) * s * s; }

// Source coordinate read by destination p under a rotation by 90 degrees, k
// times, in the plane (a, b).
inline std::array<int, 3> rot90_source(std::array<int, 3> p, int a, int b, int k, int s) {
  k = ((k % 4) + 4) % 4;
  for (int i = 0; i < k; ++i) {
    const int pa = p[a];
    p[a] = p[b];
    p[b] = s - 1 - pa;
  }
  return p;
}

template <typename T>
void flip(std::span<T> cube, int s, int axis) {
  std::vector<T> src(cube.begin(), cube.end());
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        std::array<int, 3> q{x, y, z};
        q[axis] = s - 1 - q[axis];
        cube[index(x, y, z, s)] = src[index(q[0], q[1], q[2], s)];
      }
}

template <typename T>
void rot90(std::span<T> cube, int s, int a, int b, int k) {
  if (((k % 4) + 4) % 4 == 0) return;
  std::vector<T> src(cube.begin(), cube.end());
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const auto q = rot90_source({x, y, z}, a, b, k, s);
        cube[index(x, y, z, s)] = src[index(q[0], q[1], q[2], s)];
      }
}

// Geometric transforms used at test time; each has an exact inverse.
enum class Transform { identity, flip_x, flip_y, flip_z, rot90_xy, rot90_yz, rot90_xz };

inline const std::vector<Transform>& default_transforms() {
  static const std::vector<Transform> all{Transform::identity, Transform::flip_x,   Transform::flip_y,
                                          Transform::flip_z,   Transform::rot90_xy, Transform::rot90_yz,
                                          Transform::rot90_xz};
  return all;
}

inline std::string to_string(Transform t) {
  switch (t) {
    case Transform::identity: return "identity";
    case Transform::flip_x: return "flip_x";
    case Transform::flip_y: return "flip_y";
    case Transform::flip_z: return "flip_z";
    case Transform::rot90_xy: return "rot90_xy";
    case Transform::rot90_yz: return "rot90_yz";
    case Transform::rot90_xz: return "rot90_xz";
  }
  return "?";
}

inline Transform transform_from_string(const std::string& s) {
  for (auto t : default_transforms())
    if (to_string(t) == s) return t;
  throw ConfigError("unknown TTA transform '" + s + "'");
}

template <typename T>
void apply(std::span<T> cube, int s, Transform t, bool inverse = false) {
  switch (t) {
    case Transform::identity: return;
    case Transform::flip_x: flip(cube, s, 0); return;
    case Transform::flip_y: flip(cube, s, 1); return;
    case Transform::flip_z: flip(cube, s, 2); return;
    case Transform::rot90_xy: rot90(cube, s, 0, 1, inverse ? 3 : 1); return;
    case Transform::rot90_yz: rot90(cube, s, 1, 2, inverse ? 3 : 1); return;
    case Transform::rot90_xz: rot90(cube, s, 0, 2, inverse ? 3 : 1); return;
  }
}

// Applies t to each of `channels` consecutive cubes.
template <typename T>
void apply_channels(std::span<T> data, int channels, int s, Transform t, bool inverse = false) {
  const auto n = volume(s);
  for (int c = 0; c < channels; ++c) apply(data.subspan(c * n, n), s, t, inverse);
}

}  // namespace vesselforge::cube
