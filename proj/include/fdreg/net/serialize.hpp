#pragma once

#include <nlohmann/json.hpp>

#include "../io/binary.hpp"
#include "block.hpp"

namespace fdreg::net {

inline constexpr std::string_view kTrwMagic = "FDRGTRW1";
inline constexpr std::string_view kTrwSchema = "trw-1";

/// trw-1 layout: 8-byte magic, u64 header length, JSON manifest, then every
/// tensor as f32le in manifest order.
template <class T>
std::string encode_weights(const BlockWeightsT<T>& w) {
  nlohmann::json h;
  h["schema"] = kTrwSchema;
  h["architecture"] = to_string(w.kind);
  h["arch"] = {{"in_channels", w.arch.in_channels},
               {"encoder", w.arch.encoder},
               {"decoder", w.arch.decoder},
               {"affine_outputs", w.arch.affine_outputs}};
  h["seed"] = w.seed;
  auto layers = nlohmann::json::array();
  for (const auto& l : layer_specs(w.kind, w.arch))
    layers.push_back({{"kind", to_string(l.kind)},
                      {"in", l.in_channels},
                      {"out", l.out_channels},
                      {"stride", l.stride},
                      {"kernel", l.kernel},
                      {"padding", l.padding},
                      {"negative_slope", l.negative_slope},
                      {"name", l.name}});
  h["layers"] = layers;
  std::string blob;
  auto tensors = nlohmann::json::array();
  for (const auto& t : w.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", blob.size()}, {"count", t.size()}});
    io::append_f32<T>(blob, t.data);
  }
  h["tensors"] = tensors;
  h["blob_bytes"] = blob.size();
  h["blob_crc32"] = io::hex32(io::crc32(blob));
  const std::string header = h.dump(1);
  std::string out(kTrwMagic);
  io::append_u64(out, header.size());
  out += header;
  out += blob;
  return out;
}

template <class T = float>
BlockWeightsT<T> decode_weights(std::string_view bytes) {
  if (bytes.substr(0, kTrwMagic.size()) != kTrwMagic) fail(ErrorCode::format, "not a trw-1 weight file");
  const auto hlen = io::read_u64(bytes, kTrwMagic.size());
  const std::size_t hstart = kTrwMagic.size() + 8;
  if (hstart + hlen > bytes.size()) fail(ErrorCode::format, "truncated trw-1 header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(hstart, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("trw-1 header: ") + e.what());
  }
  if (h.value("schema", "") != kTrwSchema)
    fail(ErrorCode::version, "unsupported weight schema '" + h.value("schema", "") + "'");
  const std::string_view blob = bytes.substr(hstart + hlen);
  if (blob.size() != h.at("blob_bytes").get<std::size_t>()) fail(ErrorCode::format, "trw-1 blob size mismatch");
  if (io::hex32(io::crc32(blob)) != h.at("blob_crc32").get<std::string>())
    fail(ErrorCode::checksum, "trw-1 blob checksum mismatch");

  Architecture arch;
  arch.in_channels = h["arch"]["in_channels"];
  arch.encoder = h["arch"]["encoder"].get<std::vector<std::int64_t>>();
  arch.decoder = h["arch"]["decoder"].get<std::vector<std::int64_t>>();
  arch.affine_outputs = h["arch"]["affine_outputs"];
  auto w = zero_weights<T>(block_kind_from_string(h.at("architecture").get<std::string>()), arch);
  w.seed = h.at("seed").get<std::uint64_t>();
  const auto& ts = h.at("tensors");
  if (ts.size() != w.tensors.size()) fail(ErrorCode::format, "trw-1 tensor count does not match architecture");
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto& t = w.tensors[i];
    if (ts[i].at("name").get<std::string>() != t.name ||
        ts[i].at("shape").get<std::vector<std::int64_t>>() != t.shape)
      fail(ErrorCode::format, "trw-1 tensor '" + t.name + "' has an unexpected name or shape");
    io::read_f32<T>(blob, ts[i].at("offset").get<std::size_t>(), std::span<T>(t.data));
  }
  return w;
}

template <class T>
void save_weights(const BlockWeightsT<T>& w, const std::filesystem::path& p) {
  io::write_file(p, encode_weights(w));
}

template <class T = float>
BlockWeightsT<T> load_weights(const std::filesystem::path& p) {
  return decode_weights<T>(io::read_file(p));
}

}  // namespace fdreg::net
