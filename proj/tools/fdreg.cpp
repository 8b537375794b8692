// fdreg command-line tool: preprocess, phantom, train, register, evaluate,
// gradcheck. Artifacts go to disk, JSON-lines logs to stderr, a short human
// summary to stdout.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fdreg/fdreg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void log_event(const std::string& event, json fields = json::object()) {
  fields["event"] = event;
  std::cerr << fields.dump() << "\n";
}

std::array<double, 2> parse_pair(const std::string& s, const char* what) {
  std::array<double, 2> v{};
  if (std::sscanf(s.c_str(), "%lf,%lf", &v[0], &v[1]) != 2)
    fdreg::fail(fdreg::ErrorCode::config, std::string(what) + " expects two comma-separated numbers");
  return v;
}

fdreg::Dims3 parse_dims(const std::string& s) {
  long long x, y, z;
  char tail;
  if (std::sscanf(s.c_str(), "%lld,%lld,%lld%c", &x, &y, &z, &tail) != 3)
    fdreg::fail(fdreg::ErrorCode::config, "--grid expects X,Y,Z");
  return {x, y, z};
}

bool is_nifti(const fs::path& p) { return p.extension() == ".nii"; }

fdreg::Volume load_any_volume(const fs::path& p) {
  return is_nifti(p) ? fdreg::io::import_nifti_volume(p) : fdreg::io::read_volume(p);
}

fdreg::LabelMask load_any_labels(const fs::path& p) {
  return is_nifti(p) ? fdreg::io::import_nifti_labels(p) : fdreg::io::read_labels(p);
}

void require_exists(const fs::path& p, const char* what) {
  if (!fs::exists(p)) fdreg::fail(fdreg::ErrorCode::missing, std::string(what) + " not found: " + p.string());
}

/// Fills options not given on the command line from a JSON object whose keys
/// are long option names without the leading dashes.
void apply_config(CLI::App& sub, const json& cfg) {
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      fdreg::fail(fdreg::ErrorCode::config, "config key '" + key + "' is not an option of '" + sub.get_name() + "'");
    }
    if (opt->count() > 0) continue;  // command line wins
    std::vector<std::string> vals;
    auto str = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (value.is_array() && opt->get_expected_max() > 1) {
      for (const auto& v : value) vals.push_back(str(v));
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + str(v);
      vals.push_back(joined);
    } else {
      vals.push_back(str(value));
    }
    opt->add_result(vals);
    opt->run_callback();
  }
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string in, body_mask, out, labels, labels_out;
  std::string grid = "128,96,160";
  std::string clip = "-1000,1000";
  int margin = 0;
};

int cmd_preprocess(const PreprocessArgs& a) {
  require_exists(a.in, "input volume");
  require_exists(a.body_mask, "body mask");
  const auto dims = parse_dims(a.grid);
  fdreg::require_divisible_by_16(dims);
  const auto clip = parse_pair(a.clip, "--clip");

  const auto vol = load_any_volume(a.in);
  const auto body = load_any_labels(a.body_mask);
  const auto [cropped, box] = fdreg::crop_to_mask(vol, body, a.margin);
  const auto fitted = fdreg::fit_grid(cropped.grid(), dims);
  const auto resampled = fdreg::resample_trilinear(cropped, fitted);
  // the working grid is the voxel lattice; physical geometry goes to provenance
  const fdreg::Grid working(dims);
  const auto out = fdreg::clip_normalize(fdreg::Volume(working, resampled.samples()), clip[0], clip[1]);
  fdreg::io::write_volume(a.out, out);

  json prov{{"input", a.in},
            {"body_mask", a.body_mask},
            {"crop_box", {{"lo", box.lo}, {"hi", box.hi}}},
            {"grid", {dims.nx, dims.ny, dims.nz}},
            {"physical_spacing", fitted.spacing},
            {"physical_origin", fitted.origin},
            {"clip", clip}};
  if (!a.labels.empty()) {
    if (a.labels_out.empty()) fdreg::fail(fdreg::ErrorCode::config, "--labels needs --labels-out");
    const auto labels = load_any_labels(a.labels);
    const auto lc = fdreg::crop(labels, box);
    const auto lr = fdreg::resample_nearest(lc, fdreg::fit_grid(lc.grid(), dims));
    fdreg::io::write_labels(a.labels_out, fdreg::LabelMask(working, lr.labels(), lr.label_table()));
    prov["labels_out"] = a.labels_out;
  }
  fs::path prov_path = a.out;
  prov_path.replace_extension(".provenance.json");
  fdreg::io::write_file(prov_path, prov.dump(2) + "\n");
  log_event("preprocess.done", {{"out", a.out}, {"grid", fdreg::to_string(dims)}});
  std::cout << "wrote " << a.out << " (" << fdreg::to_string(dims) << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string spec, out;
  int pairs = -1;
};

/// Spec JSON: {"phantom": {...}, "deformation": {...}, "pairs": N,
/// "jitter": {"shift": s, "scale": k}, "regions": {...}}; every key optional.
int cmd_phantom(const PhantomArgs& a, std::uint64_t seed) {
  json spec = json::object();
  if (!a.spec.empty()) {
    require_exists(a.spec, "phantom spec");
    spec = json::parse(fdreg::io::read_file(a.spec));
  }
  const auto ps = spec.contains("phantom") ? fdreg::phantom_spec_from_json(spec["phantom"]) : fdreg::default_phantom_spec();
  const auto ds = fdreg::deformation_spec_from_json(spec.value("deformation", json::object()));
  const int n = a.pairs >= 0 ? a.pairs : spec.value("pairs", 10);
  const auto jit = spec.value("jitter", json::object());
  const auto suite = fdreg::make_suite(ps, ds, n, seed, jit.value("shift", 2.0), jit.value("scale", 0.1));

  const fs::path out = a.out;
  fdreg::PairManifest manifest;
  for (int i = 0; i < n; ++i) {
    const auto& p = suite[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof name, "pair_%03d", i);
    const fs::path dir = out / name;
    fdreg::io::write_volume(dir / "fixed.frv", p.fixed);
    fdreg::io::write_volume(dir / "moving.frv", p.moving);
    fdreg::io::write_labels(dir / "fixed_mask.frv", p.fixed_mask);
    fdreg::io::write_labels(dir / "moving_mask.frv", p.moving_mask);
    fdreg::io::write_field(dir / "truth.frv", p.truth);
    manifest.entries.push_back({dir / "fixed.frv", dir / "moving.frv", dir / "fixed_mask.frv", dir / "moving_mask.frv"});
    log_event("phantom.pair", {{"index", i}, {"amplitude", p.amplitude}});
  }
  fdreg::save_manifest(manifest, out / "manifest.json");

  // region lists follow the organs actually present in the phantom
  json regions = json::object();
  for (const auto& o : ps.organs) {
    if (o.region.empty()) continue;
    auto& list = regions[o.region];
    if (std::find(list.begin(), list.end(), o.name) == list.end()) list.push_back(o.name);
  }
  fdreg::io::write_file(out / "regions.json", regions.dump(2) + "\n");
  fdreg::io::write_file(out / "spec.json",
                        json{{"phantom", fdreg::to_json(ps)}, {"deformation", fdreg::to_json(ds)}, {"pairs", n},
                             {"seed", seed}}
                                .dump(2) + "\n");
  std::cout << "wrote " << n << " phantom pairs to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest, block, model, out, regions, log, checkpoint_dir;
  int epochs = 400, pairs_per_epoch = 400, checkpoint_every = 0, bins = fdreg::kDefaultMiBins;
  double lr = 1e-4, alpha = 1.0, lambda = 1.0, beta = 1.0;
  bool both_directions = false, joint = false;
};

fdreg::RegionSpec load_regions(const std::string& path, const fdreg::RegionSpec& fallback) {
  if (path.empty()) return fallback;
  require_exists(path, "region spec");
  return fdreg::RegionSpec::from_json(json::parse(fdreg::io::read_file(path)));
}

int cmd_train(const TrainArgs& a, std::uint64_t seed) {
  require_exists(a.manifest, "manifest");
  auto manifest = fdreg::load_manifest(a.manifest);
  manifest.both_directions |= a.both_directions;
  const auto pairs = fdreg::load_pairs<float>(manifest);
  if (pairs.empty()) fdreg::fail(fdreg::ErrorCode::config, "manifest lists no pairs");
  const fdreg::Grid grid = pairs.front().fixed.grid();
  for (const auto& p : pairs) {
    fdreg::require_same_grid(p.fixed.grid(), grid, "training pair");
    fdreg::require_same_grid(p.moving.grid(), grid, "training pair");
  }

  fdreg::PipelineModel model = !a.model.empty() && fs::exists(fs::path(a.model) / "manifest.json")
                                   ? fdreg::import_model(a.model)
                                   : fdreg::initial_model(grid, seed);
  model.regions = load_regions(a.regions, model.regions);
  model.grid = grid;

  fdreg::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.pairs_per_epoch = a.pairs_per_epoch;
  cfg.lr = a.lr;
  cfg.weights = {a.alpha, a.lambda, a.beta};
  cfg.mi_bins = a.bins;
  cfg.seed = seed;
  cfg.scheme = a.joint ? fdreg::PassScheme::joint : fdreg::PassScheme::per_organ;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.checkpoint_dir = a.checkpoint_dir.empty() ? fs::path(a.out) / "checkpoints" / a.block : fs::path(a.checkpoint_dir);

  std::ofstream log_file;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log_file.open(a.log);
  }
  std::ostream& log = a.log.empty() ? std::cerr : log_file;
  auto sink = [&](const fdreg::TrainRecord& r) { log << r.to_json().dump() << "\n" << std::flush; };

  const auto pos = fdreg::block_position(a.block);
  auto current = model.block(a.block);
  fdreg::TrainOutcome<float> res;
  if (a.block == "wholebody") {
    std::vector<const fdreg::net::BlockWeights*> preds;
    for (std::size_t i = 0; i < 4; ++i) preds.push_back(&model.block(fdreg::kBlockOrder[i]));
    res = fdreg::train_wholebody<float>(std::move(current), preds, model.regions.organs_for("wholebody"), pairs, cfg,
                                        sink);
  } else if (pos == 0) {
    res = fdreg::train_region_block<float>(std::move(current), model.regions.organs_for("wholebody"), pairs, cfg, {},
                                           sink);
  } else {
    std::vector<const fdreg::net::BlockWeights*> prefix{&model.block("affine")};
    res = fdreg::train_region_block<float>(std::move(current), model.regions.organs_for(a.block), pairs, cfg, prefix,
                                           sink);
  }
  model.set_block(a.block, std::move(res.weights));
  fdreg::export_model(model, a.out);
  fdreg::io::write_file(fs::path(a.out) / (a.block + ".adam"), fdreg::encode_adam(res.adam));
  const auto& last = res.log.records.back();
  log_event("train.done", {{"block", a.block}, {"steps", res.log.records.size()}, {"last_loss", last.loss.total}});
  std::cout << "trained " << a.block << " for " << res.log.records.size() << " steps; model written to " << a.out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RegisterArgs {
  std::string model, fixed, moving, out_field, out_warped, upto = "wholebody", out_components;
};

int cmd_register(const RegisterArgs& a) {
  for (const auto& [p, w] : {std::pair{a.fixed, "fixed image"}, {a.moving, "moving image"}}) require_exists(p, w);
  const auto model = fdreg::import_model(a.model);
  const auto fixed = fdreg::io::read_volume(a.fixed);
  const auto moving = fdreg::io::read_volume(a.moving);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = fdreg::register_partial(model, fixed, moving, a.upto);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fdreg::io::write_field(a.out_field, r.total);
  fdreg::io::write_volume(a.out_warped, r.warped);
  if (!a.out_components.empty())
    for (std::size_t i = 0; i < r.components.size(); ++i)
      fdreg::io::write_field(fs::path(a.out_components) / (std::string(fdreg::kBlockOrder[i]) + ".frv"),
                             r.components[i]);
  const double fold = fdreg::folding_fraction(fdreg::jacobian(r.total));
  log_event("register.done", {{"seconds", secs}, {"folding_percent", 100 * fold}});
  std::cout << "registered in " << secs << " s; folding " << 100 * fold << " %\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string model, manifest, out, upto = "wholebody";
  std::vector<std::string> organs;
  bool with_unregistered = true;
};

int cmd_evaluate(const EvaluateArgs& a) {
  require_exists(a.manifest, "manifest");
  const auto model = fdreg::import_model(a.model);
  const auto manifest = fdreg::load_manifest(a.manifest);
  const auto organs = a.organs.empty() ? model.regions.organs_for("wholebody") : a.organs;
  std::vector<fdreg::EvalRow> rows, base;
  for (const auto& e : manifest.expanded()) {
    const auto fixed = fdreg::io::read_volume(e.fixed);
    const auto moving = fdreg::io::read_volume(e.moving);
    const auto fm = fdreg::io::read_labels(e.fixed_mask);
    const auto mm = fdreg::io::read_labels(e.moving_mask);
    rows.push_back(fdreg::evaluate_pair(model, fixed, fm, moving, mm, organs, a.upto));
    if (a.with_unregistered) base.push_back(fdreg::evaluate_field(fm, mm, fdreg::DisplacementField(fixed.grid()), organs));
    log_event("evaluate.pair", {{"fixed", e.fixed.string()}, {"seconds", rows.back().seconds}});
  }
  std::vector<fdreg::EvalReport> reports;
  if (a.with_unregistered) reports.push_back(fdreg::aggregate(base, "Unregistered"));
  reports.push_back(fdreg::aggregate(rows, a.upto == "wholebody" ? "Model" : "Model (up to " + a.upto + ")"));
  json out{{"reports", json::array()}};
  for (const auto& r : reports) out["reports"].push_back(r.to_json());
  fdreg::io::write_file(a.out, out.dump(2) + "\n");
  fs::path csv = a.out;
  csv.replace_extension(".csv");
  fdreg::io::write_file(csv, fdreg::format_csv(reports.back()));
  const auto table = fdreg::format_table(reports);
  fs::path txt = a.out;
  txt.replace_extension(".txt");
  fdreg::io::write_file(txt, table);
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string component = "all";
  int trials = 1;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a, std::uint64_t seed) {
  std::vector<fdreg::GradCheckResult> results;
  if (a.component == "all")
    results = fdreg::grad_check_all(a.trials, a.tolerance, seed);
  else
    results.push_back(fdreg::grad_check(a.component, a.trials, a.tolerance, seed));
  bool ok = true;
  for (const auto& r : results) {
    ok &= r.passed();
    log_event("gradcheck.result", r.to_json());
    std::cout << (r.passed() ? "PASS " : "FAIL ") << r.component << " max_rel_error=" << r.max_rel_error << "\n";
  }
  return ok ? 0 : 1;
}

int print_error(const std::string& code, const std::string& message, int exit_code) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdreg: field-decomposition registration"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  bool deterministic = false;
  int threads_flag = 0;
  std::string config;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  app.add_flag("--deterministic", deterministic, "Single-threaded, bitwise reproducible execution");
  app.add_option("--threads", threads_flag, "Worker threads (default: REG_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  app.add_option("--config", config, "JSON file with option overrides for the subcommand")
      ->check(CLI::ExistingFile);

  PreprocessArgs pre;
  auto* sp = app.add_subcommand("preprocess", "Crop to body, resample and normalise a CT volume");
  sp->add_option("--in", pre.in, "Input volume (FRV or .nii)")->required();
  sp->add_option("--body-mask", pre.body_mask, "Body mask (FRV or .nii)")->required();
  sp->add_option("--out", pre.out, "Output FRV header")->required();
  sp->add_option("--grid", pre.grid, "Working grid X,Y,Z (each divisible by 16)")->capture_default_str();
  sp->add_option("--clip", pre.clip, "Intensity clip range lo,hi")->capture_default_str();
  sp->add_option("--margin", pre.margin, "Crop margin in voxels")->capture_default_str();
  sp->add_option("--labels", pre.labels, "Organ label volume to carry along");
  sp->add_option("--labels-out", pre.labels_out, "Output FRV header for the labels");

  PhantomArgs ph;
  auto* sph = app.add_subcommand("phantom", "Generate a synthetic phantom pair suite");
  sph->add_option("spec", ph.spec, "Phantom spec JSON (defaults if omitted)");
  sph->add_option("--out", ph.out, "Output directory")->required();
  sph->add_option("--pairs", ph.pairs, "Number of pairs (overrides the spec)");

  TrainArgs tr;
  auto* st = app.add_subcommand("train", "Train one block of the pipeline");
  st->add_option("--manifest", tr.manifest, "Pair manifest JSON")->required();
  st->add_option("--block", tr.block, "affine|bone|thorax|abdomen|wholebody")
      ->required()
      ->check(CLI::IsMember({"affine", "bone", "thorax", "abdomen", "wholebody"}));
  st->add_option("--model", tr.model, "Existing model bundle to start from");
  st->add_option("--out", tr.out, "Output model bundle directory")->required();
  st->add_option("--regions", tr.regions, "Region spec JSON");
  st->add_option("--epochs", tr.epochs)->capture_default_str();
  st->add_option("--pairs-per-epoch", tr.pairs_per_epoch)->capture_default_str();
  st->add_option("--lr", tr.lr)->capture_default_str();
  st->add_option("--alpha", tr.alpha, "MI weight")->capture_default_str();
  st->add_option("--lambda", tr.lambda, "Dice weight")->capture_default_str();
  st->add_option("--beta", tr.beta, "Bending energy weight")->capture_default_str();
  st->add_option("--bins", tr.bins, "MI histogram bins")->capture_default_str();
  st->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoints (0 = off)")
      ->capture_default_str();
  st->add_option("--checkpoint-dir", tr.checkpoint_dir);
  st->add_option("--log", tr.log, "JSON-lines training log (default stderr)");
  st->add_flag("--both-directions", tr.both_directions, "Also train every pair reversed");
  st->add_flag("--joint", tr.joint, "Single joint backward instead of per-organ passes");

  RegisterArgs rg;
  auto* sr = app.add_subcommand("register", "Register a moving image onto a fixed image");
  sr->add_option("--model", rg.model)->required();
  sr->add_option("--fixed", rg.fixed)->required();
  sr->add_option("--moving", rg.moving)->required();
  sr->add_option("--out-field", rg.out_field)->required();
  sr->add_option("--out-warped", rg.out_warped)->required();
  sr->add_option("--upto", rg.upto, "Stop after this block")
      ->check(CLI::IsMember({"affine", "bone", "thorax", "abdomen", "wholebody"}))
      ->capture_default_str();
  sr->add_option("--out-components", rg.out_components, "Directory for the per-block fields");

  EvaluateArgs ev;
  auto* se = app.add_subcommand("evaluate", "DSC and folding over a manifest");
  se->add_option("--model", ev.model)->required();
  se->add_option("--manifest", ev.manifest)->required();
  se->add_option("--out", ev.out, "Report JSON (CSV and text table written alongside)")->required();
  se->add_option("--organs", ev.organs, "Organs to score (default: all model regions)");
  se->add_option("--upto", ev.upto)
      ->check(CLI::IsMember({"affine", "bone", "thorax", "abdomen", "wholebody"}))
      ->capture_default_str();

  GradcheckArgs gc;
  auto* sg = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::vector<std::string> comps{"all"};
  for (const auto& c : fdreg::gradcheck_components()) comps.push_back(c);
  sg->add_option("--component", gc.component)->check(CLI::IsMember(comps))->capture_default_str();
  sg->add_option("--trials", gc.trials)->capture_default_str();
  sg->add_option("--tolerance", gc.tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return print_error("usage", e.what(), 64);
  }

  try {
    if (deterministic)
      fdreg::set_threads(1);
    else if (threads_flag > 0)
      fdreg::set_threads(static_cast<unsigned>(threads_flag));
    CLI::App* sub = app.get_subcommands().front();
    if (!config.empty()) {
      const auto cfg = json::parse(fdreg::io::read_file(config));
      apply_config(*sub, cfg.contains(sub->get_name()) ? cfg[sub->get_name()] : cfg);
    }
    log_event("start", {{"command", sub->get_name()}, {"seed", seed}, {"threads", fdreg::threads()}});
    if (sub == sp) return cmd_preprocess(pre);
    if (sub == sph) return cmd_phantom(ph, seed);
    if (sub == st) return cmd_train(tr, seed);
    if (sub == sr) return cmd_register(rg);
    if (sub == se) return cmd_evaluate(ev);
    if (sub == sg) return cmd_gradcheck(gc, seed);
  } catch (const fdreg::Error& e) {
    return print_error(std::string(fdreg::to_string(e.code())), e.what(), 2);
  } catch (const CLI::ParseError& e) {
    return print_error("config", e.what(), 64);
  } catch (const nlohmann::json::exception& e) {
    return print_error("format", e.what(), 2);
  } catch (const std::exception& e) {
    return print_error("internal", e.what(), 3);
  }
  return 0;
}
