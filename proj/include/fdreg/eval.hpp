#pragma once

#include <chrono>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pipeline.hpp"

namespace fdreg {

/// 2|F & W| / (|F| + |W|). Both empty is undefined; an empty fixed set with a
/// nonempty warped set scores 0.
inline double dsc(std::span<const std::uint8_t> fixed, std::span<const std::uint8_t> warped) {
  if (fixed.size() != warped.size()) fail(ErrorCode::grid_mismatch, "dsc: masks differ in size");
  std::size_t f = 0, w = 0, both = 0;
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    const bool a = fixed[i] != 0, b = warped[i] != 0;
    f += a;
    w += b;
    both += a && b;
  }
  if (f + w == 0) fail(ErrorCode::undefined, "dsc: both masks are empty");
  return 2.0 * static_cast<double>(both) / static_cast<double>(f + w);
}

inline std::vector<std::uint8_t> binary_mask(const LabelMask& m, const std::string& organ) {
  const auto id = m.label_of(organ);
  if (!id) fail(ErrorCode::missing, "organ '" + organ + "' is not in the mask label table");
  std::vector<std::uint8_t> b(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) b[i] = m[i] == *id;
  return b;
}

/// DSC of one organ between a fixed mask and a (hard-warped) moving mask;
/// labels are matched by name.
inline double organ_dsc(const LabelMask& fixed, const LabelMask& warped, const std::string& organ) {
  require_same_grid(fixed.grid(), warped.grid(), "organ_dsc");
  const auto a = binary_mask(fixed, organ), b = binary_mask(warped, organ);
  return dsc(a, b);
}

/// One evaluated case. DSC values are fractions; reports convert to percent.
struct EvalRow {
  std::map<std::string, double> dsc;
  double folding = 0.0;  // fraction of voxels with det <= 0
  double seconds = 0.0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct EvalReport {
  std::string method;
  std::size_t cases = 0;
  std::vector<std::string> organs;          // row order
  std::map<std::string, Summary> dsc;       // percent
  Summary mean_dsc;                         // per-case organ mean, percent
  Summary folding;                          // percent
  Summary seconds;
  std::vector<EvalRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["cases"] = cases;
    j["std_convention"] = "population";
    j["folding_convention"] = "det <= 0";
    j["organs"] = organs;
    for (const auto& o : organs) j["dsc_percent"][o] = {{"mean", dsc.at(o).mean}, {"std", dsc.at(o).std}};
    j["mean_dsc_percent"] = {{"mean", mean_dsc.mean}, {"std", mean_dsc.std}};
    j["folding_percent"] = {{"mean", folding.mean}, {"std", folding.std}};
    j["seconds"] = {{"mean", seconds.mean}, {"std", seconds.std}};
    auto rs = nlohmann::json::array();
    for (const auto& r : rows) rs.push_back({{"dsc", r.dsc}, {"folding", r.folding}, {"seconds", r.seconds}});
    j["rows"] = rs;
    return j;
  }
};

inline Summary summarize(const std::vector<double>& v) {
  if (v.empty()) fail(ErrorCode::contract, "summarize: no values");
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

/// Per-organ DSC of `moving_mask` warped through `field`, plus folding.
inline EvalRow evaluate_field(const LabelMask& fixed_mask, const LabelMask& moving_mask, const DisplacementField& field,
                              const std::vector<std::string>& organs) {
  EvalRow row;
  const auto warped = warp_mask_nearest(moving_mask, field);
  for (const auto& o : organs) row.dsc[o] = organ_dsc(fixed_mask, warped, o);
  row.folding = folding_fraction(jacobian(field));
  return row;
}

/// Registers one pair (masks are not given to the model) and scores it.
inline EvalRow evaluate_pair(const PipelineModel& model, const Volume& fixed, const LabelMask& fixed_mask,
                             const Volume& moving, const LabelMask& moving_mask, const std::vector<std::string>& organs,
                             std::string_view upto = "wholebody") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = register_partial(model, fixed, moving, upto);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto row = evaluate_field(fixed_mask, moving_mask, r.total, organs);
  row.seconds = secs;
  return row;
}

/// Unweighted mean and population std per column, reported in percent.
inline EvalReport aggregate(const std::vector<EvalRow>& rows, std::string method = "model") {
  if (rows.empty()) fail(ErrorCode::contract, "aggregate: no rows");
  EvalReport rep;
  rep.method = std::move(method);
  rep.cases = rows.size();
  rep.rows = rows;
  for (const auto& [o, v] : rows.front().dsc) rep.organs.push_back(o);
  std::vector<double> per_case_mean, fold, secs;
  for (const auto& r : rows) {
    double s = 0;
    for (const auto& o : rep.organs) s += r.dsc.at(o);
    per_case_mean.push_back(100.0 * s / static_cast<double>(rep.organs.size()));
    fold.push_back(100.0 * r.folding);
    secs.push_back(r.seconds);
  }
  for (const auto& o : rep.organs) {
    std::vector<double> v;
    for (const auto& r : rows) {
      auto it = r.dsc.find(o);
      if (it == r.dsc.end()) fail(ErrorCode::contract, "aggregate: rows cover different organs");
      v.push_back(100.0 * it->second);
    }
    rep.dsc[o] = summarize(v);
  }
  rep.mean_dsc = summarize(per_case_mean);
  rep.folding = summarize(fold);
  rep.seconds = summarize(secs);
  return rep;
}

/// Aligned text table: one row per organ, one column per method,
/// "mean ± std" in percent.
inline std::string format_table(const std::vector<EvalReport>& reports) {
  if (reports.empty()) return {};
  auto cell = [](const Summary& s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(1) << s.mean << " ± " << s.std;
    return o.str();
  };
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> head{"Organ"};
  for (const auto& r : reports) head.push_back(r.method);
  grid.push_back(head);
  for (const auto& o : reports.front().organs) {
    std::vector<std::string> line{o};
    for (const auto& r : reports) line.push_back(r.dsc.count(o) ? cell(r.dsc.at(o)) : "-");
    grid.push_back(line);
  }
  std::vector<std::string> avg{"Average"}, fold{"Folding (%)"};
  for (const auto& r : reports) {
    avg.push_back(cell(r.mean_dsc));
    std::ostringstream f;
    f << std::fixed << std::setprecision(2) << r.folding.mean << " ± " << r.folding.std;
    fold.push_back(f.str());
  }
  grid.push_back(avg);
  grid.push_back(fold);

  // "±" is two bytes but one column wide
  auto width = [](const std::string& s) { return s.size() - (s.find("±") != std::string::npos ? 1 : 0); };
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) w[c] = std::max(w[c], width(line[c]));
  std::ostringstream out;
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      out << line[c] << std::string(w[c] - width(line[c]) + (c + 1 < line.size() ? 2 : 0), ' ');
    }
    out << "\n";
  }
  out << "DSC in percent, mean ± population std; folding counts det <= 0.\n";
  return out.str();
}

/// One CSV line per case: case, method, <organ DSC...>, folding, seconds.
inline std::string format_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "case,method";
  for (const auto& o : r.organs) out << "," << o;
  out << ",folding_percent,seconds\n";
  out << std::setprecision(10);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    out << i << "," << r.method;
    for (const auto& o : r.organs) out << "," << 100.0 * r.rows[i].dsc.at(o);
    out << "," << 100.0 * r.rows[i].folding << "," << r.rows[i].seconds << "\n";
  }
  return out.str();
}

}  // namespace fdreg
