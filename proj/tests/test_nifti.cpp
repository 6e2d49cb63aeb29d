#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "vesselforge/nifti.hpp"

using namespace vesselforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("vf_nifti_" + name);
  fs::create_directories(p.parent_path());
  return p;
}

// Independent minimal header writer, optionally big-endian.
struct RawHeader {
  std::vector<std::byte> bytes = std::vector<std::byte>(352, std::byte{0});
  bool big = false;

  template <typename T>
  void put(std::size_t off, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if (big) std::reverse(b, b + sizeof(T));
    std::memcpy(bytes.data() + off, b, sizeof(T));
  }

  RawHeader(Index3 dims, int code, int bitpix, bool big_endian, const char* magic = "n+1") : big(big_endian) {
    put<std::int32_t>(0, 348);
    put<std::int16_t>(40, 3);
    for (int a = 0; a < 3; ++a) put<std::int16_t>(42 + 2 * a, static_cast<std::int16_t>(dims[a]));
    put<std::int16_t>(70, static_cast<std::int16_t>(code));
    put<std::int16_t>(72, static_cast<std::int16_t>(bitpix));
    put<float>(80, 0.5f);
    put<float>(84, 0.75f);
    put<float>(88, 1.25f);
    put<float>(108, 352.0f);
    std::memcpy(bytes.data() + 344, magic, 4);
  }

  void save(const fs::path& p, const std::vector<std::byte>& payload) const {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  }
};

template <typename T>
std::vector<std::byte> to_bytes(const std::vector<T>& v, bool big) {
  std::vector<std::byte> out(v.size() * sizeof(T));
  for (std::size_t i = 0; i < v.size(); ++i) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v[i], sizeof(T));
    if (big) std::reverse(b, b + sizeof(T));
    std::memcpy(out.data() + i * sizeof(T), b, sizeof(T));
  }
  return out;
}

}  // namespace

TEST(Nifti, MinimalFloatFile) {
  const auto p = scratch("minimal.nii");
  const std::vector<float> vals{1, 2, 3, 4, 5, 6, 7, 8};
  RawHeader(Index3{2, 2, 2}, 16, 32, false).save(p, to_bytes(vals, false));
  const auto v = nifti::read_volume(p);
  EXPECT_EQ(v.grid.dims, (Index3{2, 2, 2}));
  EXPECT_EQ(v.data, vals);
  EXPECT_EQ(v.grid.spacing, (Vec3{0.5, 0.75, 1.25}));
}

TEST(Nifti, BigEndianInt16) {
  const auto p = scratch("big.nii");
  const std::vector<std::int16_t> vals{-300, 2, 1000, -1, 0, 7};
  RawHeader(Index3{3, 2, 1}, 4, 16, true).save(p, to_bytes(vals, true));
  const auto v = nifti::read_volume(p);
  EXPECT_EQ(v.grid.dims, (Index3{3, 2, 1}));
  for (std::size_t i = 0; i < vals.size(); ++i) EXPECT_EQ(v.data[i], vals[i]);
}

TEST(Nifti, ScalingApplied) {
  const auto p = scratch("scaled.nii");
  RawHeader h(Index3{2, 1, 1}, 2, 8, false);
  h.put<float>(112, 2.0f);
  h.put<float>(116, -1.0f);
  h.save(p, to_bytes(std::vector<std::uint8_t>{3, 10}, false));
  EXPECT_EQ(nifti::read_volume(p).data, (std::vector<float>{5, 19}));
}

TEST(Nifti, DetachedPair) {
  const auto hdr = scratch("pair.hdr"), img = scratch("pair.img");
  RawHeader h(Index3{2, 1, 1}, 16, 32, false, "ni1");
  h.put<float>(108, 0.0f);
  std::ofstream(hdr, std::ios::binary).write(reinterpret_cast<const char*>(h.bytes.data()), 348);
  const auto payload = to_bytes(std::vector<float>{1.5f, -2.5f}, false);
  std::ofstream(img, std::ios::binary).write(reinterpret_cast<const char*>(payload.data()), 8);
  EXPECT_EQ(nifti::read_volume(hdr).data, (std::vector<float>{1.5f, -2.5f}));
}

TEST(Nifti, BadMagicIsFormatError) {
  const auto p = scratch("magic.nii");
  RawHeader(Index3{1, 1, 1}, 16, 32, false, "XXXX").save(p, to_bytes(std::vector<float>{0}, false));
  try {
    nifti::read(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 344u);
  }
}

TEST(Nifti, ShortHeaderIsFormatError) {
  std::vector<std::byte> b(100);
  EXPECT_THROW(nifti::decode(b), FormatError);
}

TEST(Nifti, UnsupportedDatatypeNamesCode) {
  const auto p = scratch("dtype.nii");
  RawHeader(Index3{1, 1, 1}, 1536, 128, false).save(p, std::vector<std::byte>(16));
  try {
    nifti::read(p);
    FAIL();
  } catch (const UnsupportedTypeError& e) {
    EXPECT_EQ(e.code(), 1536);
    EXPECT_NE(std::string(e.what()).find("1536"), std::string::npos);
  }
}

TEST(Nifti, TruncatedPayload) {
  const auto p = scratch("trunc.nii");
  RawHeader(Index3{4, 4, 4}, 16, 32, false).save(p, std::vector<std::byte>(100));
  EXPECT_THROW(nifti::read(p), SizeMismatchError);
}

TEST(Nifti, SingleVoxelFileSize) {
  const auto p = scratch("one.nii");
  nifti::write_volume(Volume3D(Grid{}, 0.0f), p);
  EXPECT_EQ(fs::file_size(p), 356u);
}

TEST(Nifti, UnwritablePath) {
  EXPECT_THROW(nifti::write_volume(Volume3D(Grid{}), "/nonexistent_dir_vf/x.nii"), IoError);
}

TEST(Nifti, ResampleTargetSpacingSurvives) {
  const auto p = scratch("spacing.nii");
  Volume3D v(Grid{{3, 3, 3}, {0.39, 0.39, 0.55}, {0, 0, 0}}, 1.0f);
  nifti::write_volume(v, p);
  const auto back = nifti::read_volume(p);
  for (int a = 0; a < 3; ++a) EXPECT_EQ(back.grid.spacing[a], static_cast<double>(static_cast<float>(v.grid.spacing[a])));
  EXPECT_NEAR(back.grid.spacing[2], 0.55, 1e-7);
}

TEST(Nifti, MaskAndLabelTypes) {
  const auto p = scratch("mask.nii"), q = scratch("labels.nii");
  Mask m(Grid{{2, 2, 1}, {1, 1, 1}, {0, 0, 0}});
  m.data = {0, 1, 1, 0};
  nifti::write_volume(m, p);
  EXPECT_EQ(nifti::read(p).datatype, nifti::DataType::uint8);
  EXPECT_EQ(nifti::read_mask(p), m);
  LabelMap l(m.grid);
  l.data = {0, 70000, 3, 1};
  nifti::write_volume(l, q);
  EXPECT_EQ(nifti::read(q).datatype, nifti::DataType::uint32);
  EXPECT_EQ(nifti::read_labels(q), l);
}

TEST(Nifti, RoundTripAllDatatypesBitExact) {
  Rng rng(11);
  const nifti::DataType types[] = {nifti::DataType::uint8,   nifti::DataType::int16,   nifti::DataType::int32,
                                   nifti::DataType::float32, nifti::DataType::float64, nifti::DataType::uint32};
  for (int trial = 0; trial < 50; ++trial)
    for (auto t : types) {
      nifti::Image img;
      // volatile: g++ 11 -O3 otherwise vectorizes the float rounding away.
      std::array<volatile float, 6> geo{};
      for (int a = 0; a < 3; ++a) {
        img.grid.dims[a] = static_cast<int>(rng.uniform_int(1, 12));
        geo[a] = static_cast<float>(rng.uniform(0.1, 3.0));
        geo[3 + a] = static_cast<float>(rng.uniform(-50, 50));
      }
      for (int a = 0; a < 3; ++a) {
        img.grid.spacing[a] = geo[a];
        img.grid.origin[a] = geo[3 + a];
      }
      img.datatype = t;
      img.payload.resize(img.grid.size() * nifti::bytes_per_voxel(t));
      for (auto& b : img.payload) b = static_cast<std::byte>(rng.uniform_int(0, 255));
      const auto p = scratch("rt.nii");
      nifti::write(img, p);
      const auto back = nifti::read(p);
      ASSERT_EQ(back.grid, img.grid);
      ASSERT_EQ(back.datatype, t);
      ASSERT_EQ(back.payload, img.payload);
    }
}

TEST(Nifti, VolumeRoundTripRandom) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    Volume3D v(Grid{{static_cast<int>(rng.uniform_int(1, 10)), static_cast<int>(rng.uniform_int(1, 10)),
                     static_cast<int>(rng.uniform_int(1, 10))},
                    {static_cast<float>(rng.uniform(0.2, 2)), 1.0, 0.5},
                    {0, 0, 0}});
    for (auto& x : v.data) x = static_cast<float>(rng.normal() * 1e3);
    const auto p = scratch("vrt.nii");
    nifti::write_volume(v, p);
    EXPECT_EQ(nifti::read_volume(p), v);
  }
}
