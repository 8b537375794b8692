#pragma once

#include <array>
#include <set>

#include <nlohmann/json.hpp>

#include "chain.hpp"
#include "net/serialize.hpp"

namespace fdreg {

inline constexpr std::array<std::string_view, 5> kBlockOrder{"affine", "bone", "thorax", "abdomen", "wholebody"};
inline constexpr std::string_view kModelVersion = "fdreg-model-1";

inline std::size_t block_position(std::string_view name) {
  for (std::size_t i = 0; i < kBlockOrder.size(); ++i)
    if (kBlockOrder[i] == name) return i;
  fail(ErrorCode::config, "unknown block '" + std::string(name) + "'");
}

inline net::BlockKind block_kind_at(std::size_t pos) {
  return pos == 0 ? net::BlockKind::affine : net::BlockKind::deformable;
}

/// Organ names per anatomical region. The whole-body block uses their union.
struct RegionSpec {
  std::map<std::string, std::vector<std::string>> regions;

  static RegionSpec canonical() {
    return {{{"bone", {"pelvis", "vertebrae", "ribs"}},
             {"thorax", {"lung", "heart"}},
             {"abdomen", {"liver", "kidney", "pancreas", "spleen", "stomach", "gallbladder"}}}};
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& name : {"bone", "thorax", "abdomen"}) {
      auto it = regions.find(name);
      if (it == regions.end() || it->second.empty())
        fail(ErrorCode::config, std::string("region '") + name + "' has no organs");
    }
    for (const auto& [r, organs] : regions) {
      if (r != "bone" && r != "thorax" && r != "abdomen") fail(ErrorCode::config, "unknown region '" + r + "'");
      for (const auto& o : organs)
        if (!seen.insert(o).second) fail(ErrorCode::config, "organ '" + o + "' listed in more than one region");
    }
  }

  /// Organs for a block name; "wholebody" is the union in block order.
  std::vector<std::string> organs_for(std::string_view block) const {
    if (block == "wholebody") {
      std::vector<std::string> all;
      for (auto r : {"bone", "thorax", "abdomen"})
        for (const auto& o : regions.at(r)) all.push_back(o);
      return all;
    }
    auto it = regions.find(std::string(block));
    if (it == regions.end()) fail(ErrorCode::config, "no organ list for block '" + std::string(block) + "'");
    return it->second;
  }

  nlohmann::json to_json() const { return regions; }
  static RegionSpec from_json(const nlohmann::json& j) {
    RegionSpec s;
    s.regions = j.get<std::map<std::string, std::vector<std::string>>>();
    s.validate();
    return s;
  }
};

/// The five ordered blocks plus the grid they operate on.
struct PipelineModel {
  std::array<std::optional<net::BlockWeights>, 5> blocks;
  Grid grid;
  RegionSpec regions = RegionSpec::canonical();
  std::string version{kModelVersion};

  const net::BlockWeights& block(std::string_view name) const {
    const auto& b = blocks[block_position(name)];
    if (!b) fail(ErrorCode::missing, "model has no weights for block '" + std::string(name) + "'");
    return *b;
  }
  void set_block(std::string_view name, net::BlockWeights w) {
    const auto pos = block_position(name);
    if (w.kind != block_kind_at(pos))
      fail(ErrorCode::contract, "block '" + std::string(name) + "' needs " + std::string(to_string(block_kind_at(pos))) +
                                    " weights");
    blocks[pos] = std::move(w);
  }
};

/// All blocks zero-initialised: the identity model.
inline PipelineModel zero_model(const Grid& grid, RegionSpec regions = RegionSpec::canonical()) {
  PipelineModel m{{}, grid, std::move(regions)};
  for (std::size_t i = 0; i < kBlockOrder.size(); ++i) m.blocks[i] = net::zero_weights<float>(block_kind_at(i));
  return m;
}

/// Freshly initialised blocks; output layers start at zero so the model is
/// still the identity before training.
inline PipelineModel initial_model(const Grid& grid, std::uint64_t seed, RegionSpec regions = RegionSpec::canonical()) {
  PipelineModel m{{}, grid, std::move(regions)};
  for (std::size_t i = 0; i < kBlockOrder.size(); ++i)
    m.blocks[i] = net::init_weights<float>(block_kind_at(i), derive_seed(seed, 100 + i));
  return m;
}

struct RegistrationResult {
  DisplacementField total;
  Volume warped;
  std::vector<DisplacementField> components;  // in block order
};

/// Registers `moving` onto `fixed` through the blocks up to and including
/// `upto`. Masks are never needed.
inline RegistrationResult register_partial(const PipelineModel& model, const Volume& fixed, const Volume& moving,
                                           std::string_view upto, const net::ForwardOptions& opt = {true, false}) {
  const std::size_t last = block_position(upto);
  require_same_grid(fixed.grid(), model.grid, "register: fixed image vs model grid");
  require_same_grid(moving.grid(), model.grid, "register: moving image vs model grid");
  std::vector<const net::BlockWeights*> ws;
  for (std::size_t i = 0; i <= last; ++i) ws.push_back(&model.block(kBlockOrder[i]));
  RegistrationResult r;
  r.components = run_chain<float>(ws, fixed, moving, opt);
  r.total = accumulate(r.components);
  r.warped = warp(moving, r.total);
  return r;
}

inline RegistrationResult register_pair(const PipelineModel& model, const Volume& fixed, const Volume& moving,
                                        const net::ForwardOptions& opt = {true, false}) {
  return register_partial(model, fixed, moving, "wholebody", opt);
}

// ---------------------------------------------------------------------------
// Model bundle: <dir>/manifest.json and one trw-1 file per block.

inline nlohmann::json grid_to_json(const Grid& g) {
  return {{"dims", {g.dims.nx, g.dims.ny, g.dims.nz}},
          {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
          {"origin", {g.origin[0], g.origin[1], g.origin[2]}}};
}

inline Grid grid_from_json(const nlohmann::json& j) {
  const auto d = j.at("dims").get<std::array<std::int64_t, 3>>();
  const auto s = j.at("spacing").get<std::array<double, 3>>();
  const auto o = j.at("origin").get<std::array<double, 3>>();
  return Grid({d[0], d[1], d[2]}, {s[0], s[1], s[2]}, {o[0], o[1], o[2]});
}

inline void export_model(const PipelineModel& m, const std::filesystem::path& dir) {
  m.regions.validate();
  nlohmann::json man;
  man["version"] = m.version;
  man["order"] = kBlockOrder;
  man["regions"] = m.regions.to_json();
  man["grid"] = grid_to_json(m.grid);
  auto blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < kBlockOrder.size(); ++i) {
    const std::string name(kBlockOrder[i]);
    const auto bytes = net::encode_weights(m.block(name));
    const std::string file = name + ".trw";
    io::write_file(dir / file, bytes);
    blocks.push_back({{"name", name}, {"file", file}, {"crc32", io::hex32(io::crc32(bytes))}});
  }
  man["blocks"] = blocks;
  io::write_file(dir / "manifest.json", man.dump(2) + "\n");
}

inline PipelineModel import_model(const std::filesystem::path& dir) {
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, "model manifest: " + std::string(e.what()));
  }
  if (man.value("version", "") != kModelVersion)
    fail(ErrorCode::version, "model version '" + man.value("version", "") + "' is not " + std::string(kModelVersion));
  const auto order = man.at("order").get<std::vector<std::string>>();
  if (!std::equal(order.begin(), order.end(), kBlockOrder.begin(), kBlockOrder.end()))
    fail(ErrorCode::format, "model block order must be affine, bone, thorax, abdomen, wholebody");
  PipelineModel m;
  m.grid = grid_from_json(man.at("grid"));
  m.regions = RegionSpec::from_json(man.at("regions"));
  for (const auto& b : man.at("blocks")) {
    const std::string name = b.at("name");
    const auto path = dir / b.at("file").get<std::string>();
    if (!std::filesystem::exists(path)) fail(ErrorCode::missing, "block file missing: " + path.string());
    const auto bytes = io::read_file(path);
    if (io::hex32(io::crc32(bytes)) != b.at("crc32").get<std::string>())
      fail(ErrorCode::checksum, "checksum mismatch for block '" + name + "'");
    m.set_block(name, net::decode_weights<float>(bytes));
  }
  for (auto name : kBlockOrder) (void)m.block(name);
  return m;
}

}  // namespace fdreg
