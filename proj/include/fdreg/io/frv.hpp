#pragma once

#include <nlohmann/json.hpp>

#include "../transform.hpp"
#include "binary.hpp"

namespace fdreg::io {

// FRV: a JSON header file plus a raw little-endian sample file (x fastest,
// z slowest). Displacement fields add "components": 3 and store the three
// component planes one after another.

inline constexpr std::string_view kFrvSchema = "frv-1";

namespace detail {

inline nlohmann::json grid_json(const Grid& g) {
  return {{"dims", {g.dims.nx, g.dims.ny, g.dims.nz}},
          {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
          {"origin", {g.origin[0], g.origin[1], g.origin[2]}}};
}

inline Grid grid_from_json(const nlohmann::json& h) {
  const auto d = h.at("dims").get<std::vector<std::int64_t>>();
  const auto s = h.at("spacing").get<std::vector<double>>();
  const auto o = h.at("origin").get<std::vector<double>>();
  if (d.size() != 3 || s.size() != 3 || o.size() != 3) fail(ErrorCode::format, "FRV grid fields need 3 entries");
  return Grid({d[0], d[1], d[2]}, {s[0], s[1], s[2]}, {o[0], o[1], o[2]});
}

inline std::filesystem::path raw_path_for(const std::filesystem::path& header) {
  auto raw = header;
  raw.replace_extension(".raw");
  return raw;
}

inline nlohmann::json read_header(const std::filesystem::path& p) {
  try {
    auto h = nlohmann::json::parse(read_file(p));
    if (h.value("schema", "") != kFrvSchema)
      fail(ErrorCode::version, p.string() + ": unsupported schema '" + h.value("schema", "") + "'");
    return h;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, p.string() + ": " + e.what());
  }
}

inline void write_pair(const std::filesystem::path& header_path, nlohmann::json h, std::string_view raw) {
  const auto raw_path = raw_path_for(header_path);
  h["schema"] = kFrvSchema;
  h["data"] = raw_path.filename().string();
  write_file(header_path, h.dump(2) + "\n");
  write_file(raw_path, raw);
}

inline std::string read_raw(const std::filesystem::path& header_path, const nlohmann::json& h, std::size_t bytes) {
  const auto raw = read_file(header_path.parent_path() / h.at("data").get<std::string>());
  if (raw.size() != bytes)
    fail(ErrorCode::format, header_path.string() + ": raw size " + std::to_string(raw.size()) + " != expected " +
                                std::to_string(bytes));
  return raw;
}

}  // namespace detail

template <class T>
void write_volume(const std::filesystem::path& p, const VolumeT<T>& v) {
  auto h = detail::grid_json(v.grid());
  h["dtype"] = "f32le";
  h["kind"] = "intensity";
  h["normalized"] = v.normalized();
  std::string raw;
  append_f32<T>(raw, v.samples());
  detail::write_pair(p, h, raw);
}

template <class T = float>
VolumeT<T> read_volume(const std::filesystem::path& p) {
  const auto h = detail::read_header(p);
  if (h.value("kind", "") != "intensity") fail(ErrorCode::format, p.string() + ": not an intensity volume");
  const Grid g = detail::grid_from_json(h);
  const std::string dtype = h.at("dtype");
  std::vector<T> s(g.voxel_count());
  if (dtype == "f32le") {
    const auto raw = detail::read_raw(p, h, 4 * s.size());
    read_f32<T>(raw, 0, std::span<T>(s));
  } else if (dtype == "u16le") {
    const auto raw = detail::read_raw(p, h, 2 * s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::uint16_t v;
      std::memcpy(&v, raw.data() + 2 * i, 2);
      s[i] = static_cast<T>(v);
    }
  } else {
    fail(ErrorCode::format, p.string() + ": unsupported dtype '" + dtype + "'");
  }
  return VolumeT<T>(g, std::move(s));
}

inline void write_labels(const std::filesystem::path& p, const LabelMask& m) {
  auto h = detail::grid_json(m.grid());
  h["dtype"] = "u16le";
  h["kind"] = "labels";
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [id, name] : m.label_table()) table[std::to_string(id)] = name;
  h["label_table"] = table;
  std::string raw(2 * m.size(), '\0');
  for (std::size_t i = 0; i < m.size(); ++i) {
    const std::uint16_t v = m[i];
    std::memcpy(raw.data() + 2 * i, &v, 2);
  }
  detail::write_pair(p, h, raw);
}

inline LabelMask read_labels(const std::filesystem::path& p) {
  const auto h = detail::read_header(p);
  if (h.value("kind", "") != "labels") fail(ErrorCode::format, p.string() + ": not a label volume");
  if (h.value("dtype", "") != "u16le") fail(ErrorCode::format, p.string() + ": labels must be u16le");
  const Grid g = detail::grid_from_json(h);
  LabelTable table;
  for (const auto& [k, v] : h.at("label_table").items()) table[static_cast<std::uint16_t>(std::stoi(k))] = v;
  const auto raw = detail::read_raw(p, h, 2 * g.voxel_count());
  std::vector<std::uint16_t> labels(g.voxel_count());
  std::memcpy(labels.data(), raw.data(), raw.size());
  return LabelMask(g, std::move(labels), std::move(table));
}

template <class T>
void write_field(const std::filesystem::path& p, const DisplacementFieldT<T>& f) {
  auto h = detail::grid_json(f.grid());
  h["dtype"] = "f32le";
  h["kind"] = "displacement";
  h["components"] = 3;
  h["units"] = "voxel";
  std::string raw;
  append_f32<T>(raw, f.data());
  detail::write_pair(p, h, raw);
}

template <class T = float>
DisplacementFieldT<T> read_field(const std::filesystem::path& p) {
  const auto h = detail::read_header(p);
  if (h.value("kind", "") != "displacement" || h.value("components", 0) != 3)
    fail(ErrorCode::format, p.string() + ": not a 3-component displacement field");
  if (h.value("dtype", "") != "f32le") fail(ErrorCode::format, p.string() + ": fields must be f32le");
  if (h.value("units", "voxel") != "voxel") fail(ErrorCode::format, p.string() + ": only voxel units are supported");
  const Grid g = detail::grid_from_json(h);
  std::vector<T> u(3 * g.voxel_count());
  const auto raw = detail::read_raw(p, h, 4 * u.size());
  read_f32<T>(raw, 0, std::span<T>(u));
  DisplacementFieldT<T> f(g, std::move(u));
  if (!f.all_finite()) fail(ErrorCode::format, p.string() + ": non-finite displacement");
  return f;
}

/// Header kind ("intensity", "labels" or "displacement") without reading data.
inline std::string frv_kind(const std::filesystem::path& p) { return detail::read_header(p).value("kind", ""); }

}  // namespace fdreg::io
