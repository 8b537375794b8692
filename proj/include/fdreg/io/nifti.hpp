#pragma once

#include "../volume.hpp"
#include "binary.hpp"

namespace fdreg::io {

// Importer for uncompressed single-file NIfTI-1 (".nii", magic "n+1").
// Orientation matrices are ignored: qoffset_{x,y,z} becomes the origin and
// pixdim[1..3] the spacing.

struct NiftiHeader {
  Dims3 dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  int datatype = 0;
  std::size_t vox_offset = 352;
  double slope = 1.0;
  double inter = 0.0;
  bool swapped = false;
};

namespace detail {

template <class V>
V load_scalar(std::string_view bytes, std::size_t off, bool swap) {
  V v;
  std::memcpy(&v, bytes.data() + off, sizeof(V));
  if (swap) {
    char* b = reinterpret_cast<char*>(&v);
    std::reverse(b, b + sizeof(V));
  }
  return v;
}

}  // namespace detail

inline NiftiHeader parse_nifti_header(std::string_view bytes) {
  if (bytes.size() < 348) fail(ErrorCode::format, "NIfTI file shorter than its 348-byte header");
  NiftiHeader h;
  const auto size_le = detail::load_scalar<std::int32_t>(bytes, 0, false);
  if (size_le != 348) {
    if (detail::load_scalar<std::int32_t>(bytes, 0, true) != 348) fail(ErrorCode::format, "bad NIfTI sizeof_hdr");
    h.swapped = true;
  }
  if (bytes.substr(344, 4) != std::string_view("n+1\0", 4))
    fail(ErrorCode::format, "only single-file NIfTI-1 (magic n+1) is supported");
  const bool sw = h.swapped;
  const auto ndim = detail::load_scalar<std::int16_t>(bytes, 40, sw);
  if (ndim < 1 || ndim > 7) fail(ErrorCode::format, "NIfTI dim[0] out of range");
  std::int64_t d[3] = {1, 1, 1};
  for (int i = 0; i < std::min<int>(3, ndim); ++i) d[i] = detail::load_scalar<std::int16_t>(bytes, 42 + 2 * i, sw);
  for (int i = 3; i < ndim; ++i)
    if (detail::load_scalar<std::int16_t>(bytes, 42 + 2 * i, sw) > 1)
      fail(ErrorCode::format, "only 3D NIfTI volumes are supported");
  h.dims = {d[0], d[1], d[2]};
  h.datatype = detail::load_scalar<std::int16_t>(bytes, 70, sw);
  for (int i = 0; i < 3; ++i) {
    const double s = std::fabs(detail::load_scalar<float>(bytes, 80 + 4 * i, sw));
    h.spacing[i] = s > 0 ? s : 1.0;
    h.origin[i] = detail::load_scalar<float>(bytes, 268 + 4 * i, sw);
  }
  h.vox_offset = static_cast<std::size_t>(detail::load_scalar<float>(bytes, 108, sw));
  const double slope = detail::load_scalar<float>(bytes, 112, sw);
  if (slope != 0.0 && std::isfinite(slope)) {
    h.slope = slope;
    h.inter = detail::load_scalar<float>(bytes, 116, sw);
  }
  return h;
}

/// Voxel values (after scl_slope/scl_inter) as doubles.
inline std::pair<NiftiHeader, std::vector<double>> read_nifti_values(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  const auto h = parse_nifti_header(bytes);
  const std::size_t n = h.dims.size();
  std::size_t width = 0;
  switch (h.datatype) {
    case 2: case 256: width = 1; break;
    case 4: case 512: width = 2; break;
    case 8: case 16: case 768: width = 4; break;
    case 64: width = 8; break;
    default: fail(ErrorCode::format, "unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  if (h.vox_offset + n * width > bytes.size()) fail(ErrorCode::format, "NIfTI voxel data truncated");
  std::vector<double> v(n);
  const bool sw = h.swapped;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = h.vox_offset + i * width;
    double raw = 0;
    switch (h.datatype) {
      case 2: raw = static_cast<std::uint8_t>(bytes[off]); break;
      case 256: raw = static_cast<std::int8_t>(bytes[off]); break;
      case 4: raw = detail::load_scalar<std::int16_t>(bytes, off, sw); break;
      case 512: raw = detail::load_scalar<std::uint16_t>(bytes, off, sw); break;
      case 8: raw = detail::load_scalar<std::int32_t>(bytes, off, sw); break;
      case 768: raw = detail::load_scalar<std::uint32_t>(bytes, off, sw); break;
      case 16: raw = detail::load_scalar<float>(bytes, off, sw); break;
      case 64: raw = detail::load_scalar<double>(bytes, off, sw); break;
    }
    v[i] = raw * h.slope + h.inter;
  }
  return {h, std::move(v)};
}

inline Volume import_nifti_volume(const std::filesystem::path& p) {
  auto [h, v] = read_nifti_values(p);
  std::vector<float> s(v.begin(), v.end());
  return Volume(Grid(h.dims, h.spacing, h.origin), std::move(s));
}

/// Integer labels; names default to "label_<id>" unless `table` covers them.
inline LabelMask import_nifti_labels(const std::filesystem::path& p, LabelTable table = {}) {
  auto [h, v] = read_nifti_values(p);
  std::vector<std::uint16_t> labels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = std::round(v[i]);
    if (r < 0 || r > 65535) fail(ErrorCode::format, "label value out of u16 range");
    labels[i] = static_cast<std::uint16_t>(r);
    if (labels[i] && !table.count(labels[i])) table[labels[i]] = "label_" + std::to_string(labels[i]);
  }
  return LabelMask(Grid(h.dims, h.spacing, h.origin), std::move(labels), std::move(table));
}

}  // namespace fdreg::io
