#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <zlib.h>

#include "vitlm/checkpoint.hpp"
#include "vitlm/volume.hpp"

namespace vitlm {

// NIfTI-1 single-file (.nii / .nii.gz) support.

enum class NiftiDatatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
};

inline int nifti_bitpix(NiftiDatatype t) {
  switch (t) {
    case NiftiDatatype::uint8: return 8;
    case NiftiDatatype::int16: return 16;
    case NiftiDatatype::int32: return 32;
    case NiftiDatatype::float32: return 32;
    case NiftiDatatype::float64: return 64;
  }
  return 0;
}

struct NiftiHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0f;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::array<char, 4> magic{};
  bool big_endian = false;
};

struct NiftiWriteOptions {
  NiftiDatatype datatype = NiftiDatatype::float32;
  std::endian byte_order = std::endian::little;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  bool gzip = false;
};

namespace nifti_detail {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kMinFileSize = 352;

// Field offsets in the 348-byte header.
constexpr std::size_t kDim = 40;
constexpr std::size_t kDatatype = 70;
constexpr std::size_t kBitpix = 72;
constexpr std::size_t kPixdim = 76;
constexpr std::size_t kVoxOffset = 108;
constexpr std::size_t kSclSlope = 112;
constexpr std::size_t kSclInter = 116;
constexpr std::size_t kMagic = 344;

inline bool is_gzip(std::string_view bytes) {
  return bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
         static_cast<unsigned char>(bytes[1]) == 0x8b;
}

inline std::string gunzip(std::string_view bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw FormatError("zlib inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::string out;
  char buf[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc == Z_BUF_ERROR) {
      inflateEnd(&zs);
      throw LengthError("truncated gzip stream");
    }
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("corrupt gzip stream");
    }
    out.append(buf, sizeof(buf) - zs.avail_out);
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw LengthError("truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

inline std::string gzip(std::string_view bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw FormatError("zlib deflateInit failed");
  }
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::string out;
  char buf[1 << 16];
  int rc = Z_OK;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof(buf);
    rc = deflate(&zs, Z_FINISH);
    out.append(buf, sizeof(buf) - zs.avail_out);
  } while (rc == Z_OK);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("zlib deflate failed");
  return out;
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename U>
  U get(std::size_t offset) const {
    U v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(U));
    if (swap_) v = detail::byteswap_value(v);
    return v;
  }

 private:
  std::string_view bytes_;
  bool swap_;
};

class ByteWriter {
 public:
  ByteWriter(std::string& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename U>
  void put(std::size_t offset, U v) {
    if (swap_) v = detail::byteswap_value(v);
    std::memcpy(bytes_.data() + offset, &v, sizeof(U));
  }

 private:
  std::string& bytes_;
  bool swap_;
};

}  // namespace nifti_detail

/// Parses a single-file NIfTI-1 image, gzip-wrapped or raw, either byte
/// order. Voxels come back in physical units (scl_slope/scl_inter applied,
/// slope 0 read as 1).
inline std::pair<NiftiHeader, Volume> parse_nifti(std::string_view input,
                                                  std::string source_id = {}) {
  using namespace nifti_detail;
  std::string inflated;
  if (is_gzip(input)) {
    inflated = gunzip(input);
    input = inflated;
  }
  if (input.size() < kMinFileSize) {
    throw LengthError("NIfTI input is " + std::to_string(input.size()) +
                      " bytes, need at least 352");
  }

  NiftiHeader h;
  std::int32_t raw;
  std::memcpy(&raw, input.data(), 4);
  const bool native_ok = raw == 348;
  const bool swapped_ok = detail::byteswap_value(raw) == 348;
  if (!native_ok && !swapped_ok) throw FormatError("sizeof_hdr is not 348 in either byte order");
  const bool swap = !native_ok;
  h.big_endian = (std::endian::native == std::endian::little) == swap;
  ByteReader r(input, swap);

  std::memcpy(h.magic.data(), input.data() + kMagic, 4);
  const std::string_view magic(h.magic.data(), 4);
  if (magic == std::string_view("ni1\0", 4)) {
    throw UnsupportedError("header/image pair files (magic ni1) are not supported");
  }
  if (magic != std::string_view("n+1\0", 4)) throw FormatError("bad NIfTI magic");

  for (int i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(kDim + 2 * i);
  h.datatype = r.get<std::int16_t>(kDatatype);
  h.bitpix = r.get<std::int16_t>(kBitpix);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = r.get<float>(kPixdim + 4 * i);
  h.vox_offset = r.get<float>(kVoxOffset);
  h.scl_slope = r.get<float>(kSclSlope);
  h.scl_inter = r.get<float>(kSclInter);

  const int rank = h.dim[0];
  if (rank < 1 || rank > 7) throw FormatError("dim[0] must be in 1..7, got " + std::to_string(rank));
  Dims3 whd{1, 1, 1};  // (x, y, z) = (W, H, D)
  for (int i = 1; i <= rank; ++i) {
    if (h.dim[i] < 1) throw FormatError("non-positive dim[" + std::to_string(i) + "]");
    if (i <= 3) {
      whd[i - 1] = static_cast<std::size_t>(h.dim[i]);
    } else if (h.dim[i] != 1) {
      throw UnsupportedError("only 3D volumes are supported (dim[" + std::to_string(i) + "] = " +
                             std::to_string(h.dim[i]) + ")");
    }
  }

  std::size_t width;
  switch (static_cast<NiftiDatatype>(h.datatype)) {
    case NiftiDatatype::uint8: width = 1; break;
    case NiftiDatatype::int16: width = 2; break;
    case NiftiDatatype::int32:
    case NiftiDatatype::float32: width = 4; break;
    case NiftiDatatype::float64: width = 8; break;
    default:
      throw UnsupportedError("unsupported NIfTI datatype code " + std::to_string(h.datatype));
  }
  if (static_cast<std::size_t>(h.bitpix) != width * 8) {
    throw FormatError("bitpix " + std::to_string(h.bitpix) + " inconsistent with datatype " +
                      std::to_string(h.datatype));
  }

  const std::size_t count = whd[0] * whd[1] * whd[2];
  if (!(h.vox_offset >= 0.0f)) throw FormatError("negative vox_offset");
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (offset < kMinFileSize && offset != 0) throw FormatError("vox_offset inside the header");
  const std::size_t start = offset == 0 ? kMinFileSize : offset;
  if (start + count * width > input.size()) {
    throw LengthError("NIfTI data section truncated: need " + std::to_string(count * width) +
                      " bytes at offset " + std::to_string(start) + ", file has " +
                      std::to_string(input.size()));
  }

  const float slope = h.scl_slope == 0.0f || !std::isfinite(h.scl_slope) ? 1.0f : h.scl_slope;
  const float inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0f;
  const bool identity = slope == 1.0f && inter == 0.0f;

  std::vector<float> voxels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = start + i * width;
    double v;
    switch (static_cast<NiftiDatatype>(h.datatype)) {
      case NiftiDatatype::uint8: v = static_cast<unsigned char>(input[at]); break;
      case NiftiDatatype::int16: v = r.get<std::int16_t>(at); break;
      case NiftiDatatype::int32: v = r.get<std::int32_t>(at); break;
      case NiftiDatatype::float32: v = r.get<float>(at); break;
      default: v = r.get<double>(at); break;
    }
    voxels[i] = identity ? static_cast<float>(v) : static_cast<float>(v * slope + inter);
  }

  Volume vol;
  vol.voxels = Tensor<float>({whd[2], whd[1], whd[0]}, std::move(voxels));
  auto spacing = [](float s) { return s > 0.0f && std::isfinite(s) ? s : 1.0f; };
  vol.spacing_mm = {spacing(h.pixdim[3]), spacing(h.pixdim[2]), spacing(h.pixdim[1])};
  vol.source_id = std::move(source_id);
  validate_volume(vol);
  return {h, std::move(vol)};
}

/// Emits a minimal valid single-file NIfTI-1 image. Defaults: float32,
/// little-endian, slope 1, intercept 0, uncompressed.
inline std::string write_nifti(const Volume& volume, const NiftiWriteOptions& options = {}) {
  using namespace nifti_detail;
  validate_volume(volume);
  const auto d = volume.dims();
  for (auto n : d) {
    if (n > 32767) throw LengthError("volume dimension exceeds the NIfTI-1 limit");
  }
  const int bitpix = nifti_bitpix(options.datatype);
  const std::size_t width = static_cast<std::size_t>(bitpix) / 8;
  const std::size_t count = volume.voxels.size();

  std::string bytes(kMinFileSize + count * width, '\0');
  ByteWriter w(bytes, options.byte_order != std::endian::native);
  w.put<std::int32_t>(0, 348);
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(d[2]), static_cast<std::int16_t>(d[1]),
                                static_cast<std::int16_t>(d[0]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) w.put<std::int16_t>(kDim + 2 * i, dims[i]);
  w.put<std::int16_t>(kDatatype, static_cast<std::int16_t>(options.datatype));
  w.put<std::int16_t>(kBitpix, static_cast<std::int16_t>(bitpix));
  const float pixdim[8] = {1.0f, volume.spacing_mm[2], volume.spacing_mm[1], volume.spacing_mm[0],
                           1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) w.put<float>(kPixdim + 4 * i, pixdim[i]);
  w.put<float>(kVoxOffset, static_cast<float>(kMinFileSize));
  w.put<float>(kSclSlope, options.scl_slope);
  w.put<float>(kSclInter, options.scl_inter);
  w.put<char>(123, 2);  // xyzt_units: mm
  std::memcpy(bytes.data() + kMagic, "n+1\0", 4);

  const double slope = options.scl_slope == 0.0f ? 1.0 : options.scl_slope;
  const bool identity = slope == 1.0 && options.scl_inter == 0.0f;
  auto src = volume.voxels.data();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = kMinFileSize + i * width;
    const double stored = identity ? src[i] : (src[i] - options.scl_inter) / slope;
    switch (options.datatype) {
      case NiftiDatatype::uint8:
        bytes[at] = static_cast<char>(static_cast<unsigned char>(std::lround(stored)));
        break;
      case NiftiDatatype::int16: w.put(at, static_cast<std::int16_t>(std::lround(stored))); break;
      case NiftiDatatype::int32: w.put(at, static_cast<std::int32_t>(std::lround(stored))); break;
      case NiftiDatatype::float32:
        w.put(at, identity ? src[i] : static_cast<float>(stored));
        break;
      case NiftiDatatype::float64: w.put(at, identity ? static_cast<double>(src[i]) : stored); break;
    }
  }
  return options.gzip ? gzip(bytes) : bytes;
}

inline Volume load_nifti(const std::filesystem::path& path) {
  return parse_nifti(detail::read_file(path), path.string()).second;
}

/// Writes `volume`; paths ending in .gz are gzip-compressed.
inline void save_nifti(const std::filesystem::path& path, const Volume& volume,
                       NiftiWriteOptions options = {}) {
  if (path.extension() == ".gz") options.gzip = true;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, write_nifti(volume, options));
}

}  // namespace vitlm
