#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "volume.hpp"

namespace vesselforge::nifti {

// Datatype codes understood by the reader/writer. uint32 is not in the classic
// analyze set but NIfTI-1 defines it and label maps need it.
enum class DataType : int {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
  uint32 = 768,
};

inline int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::uint8: return 1;
    case DataType::int16: return 2;
    case DataType::int32:
    case DataType::float32:
    case DataType::uint32: return 4;
    case DataType::float64: return 8;
  }
  return 0;
}

inline DataType datatype_from_code(int code) {
  switch (code) {
    case 2: case 4: case 8: case 16: case 64: case 768:
      return static_cast<DataType>(code);
    default:
      throw UnsupportedTypeError(code);
  }
}

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

// A decoded file: grid, raw voxel payload in native byte order, and the
// intensity scaling pair.
struct Image {
  Grid grid;
  DataType datatype = DataType::float32;
  std::vector<std::byte> payload;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  short qform_code = 0;
  short sform_code = 0;

  template <typename T>
  T raw(std::size_t i) const {
    T v;
    std::memcpy(&v, payload.data() + i * sizeof(T), sizeof(T));
    return v;
  }

  double value(std::size_t i) const {
    double v = 0.0;
    switch (datatype) {
      case DataType::uint8: v = raw<std::uint8_t>(i); break;
      case DataType::int16: v = raw<std::int16_t>(i); break;
      case DataType::int32: v = raw<std::int32_t>(i); break;
      case DataType::uint32: v = raw<std::uint32_t>(i); break;
      case DataType::float32: v = raw<float>(i); break;
      case DataType::float64: v = raw<double>(i); break;
    }
    if (scl_slope != 0.0f) v = v * scl_slope + scl_inter;
    return v;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

template <typename T>
T byteswap_value(T v) {
  auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::byte>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}
  template <typename T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

 private:
  const std::vector<std::byte>& bytes_;
  bool swap_;
};

class HeaderWriter {
 public:
  HeaderWriter() : bytes_(kVoxOffset, std::byte{0}) {}
  template <typename T>
  void put(std::size_t offset, T v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
    std::memcpy(bytes_.data() + offset, &v, sizeof(T));
  }
  void put_chars(std::size_t offset, const char* s, std::size_t n) { std::memcpy(bytes_.data() + offset, s, n); }
  const std::vector<std::byte>& bytes() const { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

inline void swap_payload(std::vector<std::byte>& payload, int width) {
  if (width == 1) return;
  for (std::size_t i = 0; i + width <= payload.size(); i += width)
    std::reverse(payload.begin() + static_cast<std::ptrdiff_t>(i),
                 payload.begin() + static_cast<std::ptrdiff_t>(i + width));
}

}  // namespace detail

// Decodes a header and its payload. For single-file images ("n+1") the payload
// follows the header in `bytes`; for "ni1" pairs it is read from `image_bytes`.
inline Image decode(const std::vector<std::byte>& bytes, const std::vector<std::byte>* image_bytes = nullptr) {
  if (bytes.size() < kHeaderSize)
    throw FormatError("file shorter than the 348-byte header", bytes.size());

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (detail::byteswap_value(sizeof_hdr) != 348) throw FormatError("sizeof_hdr is not 348", 0);
    swap = true;
  }
  const detail::HeaderReader h(bytes, swap);

  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (!(std::memcmp(magic, "n+1\0", 4) == 0 || std::memcmp(magic, "ni1\0", 4) == 0))
    throw FormatError("bad magic", 344);
  const bool detached = std::memcmp(magic, "ni1\0", 4) == 0;
  if (detached && image_bytes == nullptr)
    throw FormatError("ni1 header without its .img payload", 344);

  const auto ndim = h.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw FormatError("dim[0] out of range", 40);
  Image img;
  for (int a = 0; a < 3; ++a) {
    const auto d = a < ndim ? h.get<std::int16_t>(42 + 2 * a) : std::int16_t{1};
    if (d < 1) throw FormatError("non-positive dimension", 42 + 2 * a);
    img.grid.dims[a] = d;
    const float px = h.get<float>(80 + 4 * a);
    img.grid.spacing[a] = (px > 0.0f && std::isfinite(px)) ? px : 1.0;
  }
  const int code = h.get<std::int16_t>(70);
  img.datatype = datatype_from_code(code);
  const int bitpix = h.get<std::int16_t>(72);
  if (bitpix != 8 * bytes_per_voxel(img.datatype)) throw FormatError("bitpix does not match datatype", 72);

  const float vox_offset = h.get<float>(108);
  if (!(vox_offset >= (detached ? 0.0f : static_cast<float>(kHeaderSize))))
    throw FormatError("vox_offset smaller than header", 108);
  img.scl_slope = h.get<float>(112);
  img.scl_inter = h.get<float>(116);
  if (!std::isfinite(img.scl_slope) || !std::isfinite(img.scl_inter)) img.scl_slope = 0.0f;
  img.qform_code = h.get<std::int16_t>(252);
  img.sform_code = h.get<std::int16_t>(254);
  // Orientation is not resliced; only the translation part is kept.
  if (img.qform_code > 0) {
    for (int a = 0; a < 3; ++a) img.grid.origin[a] = h.get<float>(268 + 4 * a);
  } else if (img.sform_code > 0) {
    for (int a = 0; a < 3; ++a) img.grid.origin[a] = h.get<float>(280 + 16 * a + 12);
  }

  const auto& src = detached ? *image_bytes : bytes;
  const auto start = static_cast<std::size_t>(vox_offset);
  const std::size_t width = bytes_per_voxel(img.datatype);
  const std::size_t need = img.grid.size() * width;
  if (src.size() < start || src.size() - start < need)
    throw SizeMismatchError("payload truncated: need " + std::to_string(need) + " bytes after offset " +
                            std::to_string(start) + ", file has " + std::to_string(src.size()));
  img.payload.assign(src.begin() + static_cast<std::ptrdiff_t>(start),
                     src.begin() + static_cast<std::ptrdiff_t>(start + need));
  if (swap) detail::swap_payload(img.payload, static_cast<int>(width));
  return img;
}

inline std::vector<std::byte> encode(const Image& img) {
  img.grid.validate();
  const int width = bytes_per_voxel(img.datatype);
  if (img.payload.size() != img.grid.size() * static_cast<std::size_t>(width))
    throw SizeMismatchError("payload length does not match dims and datatype");

  detail::HeaderWriter h;
  h.put<std::int32_t>(0, 348);
  h.put<std::int16_t>(40, 3);
  for (int a = 0; a < 3; ++a) h.put<std::int16_t>(42 + 2 * a, static_cast<std::int16_t>(img.grid.dims[a]));
  for (int a = 3; a < 7; ++a) h.put<std::int16_t>(42 + 2 * a, 1);
  h.put<std::int16_t>(70, static_cast<std::int16_t>(img.datatype));
  h.put<std::int16_t>(72, static_cast<std::int16_t>(8 * width));
  h.put<float>(76, 1.0f);  // qfac
  for (int a = 0; a < 3; ++a) h.put<float>(80 + 4 * a, static_cast<float>(img.grid.spacing[a]));
  h.put<float>(108, static_cast<float>(kVoxOffset));
  h.put<float>(112, img.scl_slope);
  h.put<float>(116, img.scl_inter);
  h.put<char>(123, 2);  // mm
  h.put<std::int16_t>(252, 1);
  h.put<std::int16_t>(254, 1);
  for (int a = 0; a < 3; ++a) {
    h.put<float>(268 + 4 * a, static_cast<float>(img.grid.origin[a]));
    h.put<float>(280 + 16 * a + 4 * a, static_cast<float>(img.grid.spacing[a]));
    h.put<float>(280 + 16 * a + 12, static_cast<float>(img.grid.origin[a]));
  }
  h.put_chars(344, "n+1\0", 4);

  std::vector<std::byte> out = h.bytes();
  std::vector<std::byte> payload = img.payload;
  if constexpr (std::endian::native == std::endian::big) detail::swap_payload(payload, width);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

namespace detail {

inline std::vector<std::byte> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> chars((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(chars.size());
  std::memcpy(bytes.data(), chars.data(), chars.size());
  return bytes;
}

}  // namespace detail

inline Image read(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  if (bytes.size() >= kHeaderSize && std::memcmp(bytes.data() + 344, "ni1\0", 4) == 0) {
    auto img_path = path;
    img_path.replace_extension(".img");
    const auto payload = detail::slurp(img_path);
    return decode(bytes, &payload);
  }
  return decode(bytes);
}

inline void write(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
constexpr DataType datatype_of() {
  if constexpr (std::is_same_v<T, std::uint8_t>) return DataType::uint8;
  else if constexpr (std::is_same_v<T, std::int16_t>) return DataType::int16;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DataType::int32;
  else if constexpr (std::is_same_v<T, std::uint32_t>) return DataType::uint32;
  else if constexpr (std::is_same_v<T, float>) return DataType::float32;
  else {
    static_assert(std::is_same_v<T, double>, "unsupported voxel type");
    return DataType::float64;
  }
}

template <typename T>
Image to_image(const Volume<T>& v) {
  Image img;
  img.grid = v.grid;
  img.datatype = datatype_of<T>();
  img.payload.resize(v.data.size() * sizeof(T));
  std::memcpy(img.payload.data(), v.data.data(), img.payload.size());
  return img;
}

inline Volume3D to_volume(const Image& img) {
  Volume3D v(img.grid);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<float>(img.value(i));
  return v;
}

inline Mask to_mask(const Image& img) {
  Mask m(img.grid);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = img.value(i) != 0.0 ? 1 : 0;
  return m;
}

inline LabelMap to_labels(const Image& img) {
  LabelMap m(img.grid);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<std::uint32_t>(std::max(0.0, img.value(i)));
  return m;
}

inline Volume3D read_volume(const std::filesystem::path& p) { return to_volume(read(p)); }
inline Mask read_mask(const std::filesystem::path& p) { return to_mask(read(p)); }
inline LabelMap read_labels(const std::filesystem::path& p) { return to_labels(read(p)); }

template <typename T>
void write_volume(const Volume<T>& v, const std::filesystem::path& p) {
  write(to_image(v), p);
}

}  // namespace vesselforge::nifti
