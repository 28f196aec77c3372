#include "moc/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "moc/error.hpp"
#include "moc/png_io.hpp"

namespace moc {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", index);
  return buf;
}

ojson read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return ojson::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("failed writing " + path.string());
}

void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(1) + "\n"); }

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ValidationError("cannot create directory " + dir.string());
  }
}

CategoryTaxonomy taxonomy_or_default(const std::optional<fs::path>& path) {
  return path ? load_taxonomy(*path) : CategoryTaxonomy::moc6();
}

std::vector<std::string> manifest_scene_ids(const fs::path& data_dir) {
  const auto manifest = read_json(data_dir / "manifest.json");
  std::vector<std::string> ids;
  try {
    for (const auto& s : manifest.at("scenes")) ids.push_back(s.at("id").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError((data_dir / "manifest.json").string() + ": " + e.what());
  }
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------

SynthOptions SynthOptions::from_json(const ojson& j) {
  SynthOptions o;
  o.scene = SceneConfig::from_json(j);
  try {
    o.count = j.value("count", o.count);
    o.png = j.value("png", o.png);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synth config: ") + e.what());
  }
  return o;
}

ojson cmd_synth(const SynthOptions& opts, const fs::path& out_dir) {
  opts.scene.validate();
  ensure_dir(out_dir);
  ojson manifest;
  manifest["config"] = opts.scene.to_json();
  manifest["count"] = opts.count;
  manifest["scenes"] = ojson::array();
  std::vector<std::string> files;
  for (std::size_t i = 0; i < opts.count; ++i) {
    SceneConfig cfg = opts.scene;
    cfg.seed = mix_seed(opts.scene.seed, i);
    const auto id = scene_id(i);
    const auto scene = synth_scene(cfg, id);
    ojson entry{{"id", id},
                {"seed", cfg.seed},
                {"rgb", id + ".rgb.bin"},
                {"nir", id + ".nir.bin"},
                {"annotations", id + ".annotations.json"}};
    save_tensor((out_dir / (id + ".rgb.bin")).string(), scene.rgb);
    save_tensor((out_dir / (id + ".nir.bin")).string(), scene.nir);
    save_annotations(out_dir / (id + ".annotations.json"), scene.annotations);
    for (const char* key : {"rgb", "nir", "annotations"}) files.push_back(entry[key]);
    if (opts.png) {
      write_png_rgb(out_dir / (id + ".rgb.png"), scene.rgb);
      write_png_gray(out_dir / (id + ".nir.png"), scene.nir);
      entry["rgb_png"] = id + ".rgb.png";
      entry["nir_png"] = id + ".nir.png";
      files.push_back(id + ".rgb.png");
      files.push_back(id + ".nir.png");
    }
    std::vector<std::size_t> n = counts(scene.annotations);
    ojson c = ojson::object();
    for (std::size_t k = 0; k < n.size(); ++k) c[scene.annotations.categories[k]] = n[k];
    entry["counts"] = c;
    manifest["scenes"].push_back(entry);
  }
  std::sort(files.begin(), files.end());
  manifest["files"] = files;
  write_json(out_dir / "manifest.json", manifest);
  return manifest;
}

// ---------------------------------------------------------------------------

DensifyOptions DensifyOptions::from_json(const ojson& j) {
  DensifyOptions o;
  try {
    o.kernel.sigma = j.value("sigma", o.kernel.sigma);
    o.kernel.size = j.value("size", o.kernel.size);
    o.out_stride = j.value("out_stride", o.out_stride);
    o.conserve = j.value("conserve", o.conserve);
    o.group = j.value("group", o.group);
    if (j.contains("taxonomy") && !j.at("taxonomy").is_null()) {
      o.taxonomy = j.at("taxonomy").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("densify config: ") + e.what());
  }
  o.kernel.validate();
  return o;
}

DensifyResult cmd_densify(const fs::path& data_dir, const DensifyOptions& opts,
                          const fs::path& out_dir, const Log& log) {
  opts.kernel.validate();
  if (!fs::is_directory(data_dir)) throw ValidationError("no such directory " + data_dir.string());
  ensure_dir(out_dir);
  const auto taxonomy = taxonomy_or_default(opts.taxonomy);
  const std::string suffix = ".annotations.json";

  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(data_dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      inputs.push_back(e.path());
    }
  }
  std::sort(inputs.begin(), inputs.end());

  DensifyResult r;
  r.manifest["sigma"] = opts.kernel.sigma;
  r.manifest["size"] = opts.kernel.size;
  r.manifest["out_stride"] = opts.out_stride;
  r.manifest["conserve"] = opts.conserve;
  r.manifest["grouped"] = opts.group;
  r.manifest["entries"] = ojson::array();
  for (const auto& path : inputs) {
    const auto name = path.filename().string();
    const auto id = name.substr(0, name.size() - suffix.size());
    ojson entry{{"id", id}, {"annotations", name}};
    try {
      auto a = load_annotations(path, taxonomy.fine);
      if (opts.group) a = group_to_moc6(a, taxonomy);
      const auto gt = generate_gt(a, opts.kernel, opts.out_stride, opts.conserve);
      save_ground_truth(out_dir / id, gt, opts.kernel, opts.out_stride);
      const auto expected = counts(a);
      // the mask is bypassed: ignored points were never rendered
      const auto mass = count_from_density(gt.density, IgnoreMask::all_counted(gt.mask.values.shape()));
      double worst = 0.0;
      ojson per = ojson::object();
      for (std::size_t c = 0; c < expected.size(); ++c) {
        const double want = static_cast<double>(expected[c]);
        worst = std::max(worst, std::abs(mass[c] - want) / std::max(want, 1.0));
        per[a.categories[c]] = {{"points", expected[c]}, {"mass", mass[c]}};
      }
      entry["status"] = "ok";
      entry["density"] = id + ".density.bin";
      entry["mask"] = id + ".mask.bin";
      entry["sidecar"] = id + ".density.json";
      entry["counts"] = per;
      entry["max_relative_count_error"] = worst;
      ++r.written;
      if (log) {
        std::ostringstream line;
        line << id << ": count check max relative error " << worst;
        log(line.str());
      }
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
      ++r.failed;
      if (log) log(id + ": FAILED " + e.what());
    }
    r.manifest["entries"].push_back(entry);
  }
  r.manifest["written"] = r.written;
  r.manifest["failed"] = r.failed;
  write_json(out_dir / "densify_manifest.json", r.manifest);
  return r;
}

// ---------------------------------------------------------------------------

std::vector<Sample> load_samples(const fs::path& data_dir, const fs::path& density_dir) {
  std::vector<Sample> out;
  for (const auto& id : manifest_scene_ids(data_dir)) {
    Sample s;
    s.id = id;
    s.rgb = load_tensor((data_dir / (id + ".rgb.bin")).string());
    s.nir = load_tensor((data_dir / (id + ".nir.bin")).string());
    s.gt = load_ground_truth(density_dir / id);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ValidationError(data_dir.string() + " lists no scenes");
  return out;
}

ExperimentResult cmd_train(const TrainConfig& cfg, const fs::path& data_dir,
                           const fs::path& density_dir, const fs::path& out_stem,
                           const Log& log) {
  cfg.validate();
  const auto samples = load_samples(data_dir, density_dir);
  const auto categories = samples.front().gt.density.category_order;
  for (const auto& s : samples) {
    if (s.gt.density.category_order != categories) {
      throw ValidationError("scene '" + s.id + "' has a different category order");
    }
  }
  if (!out_stem.parent_path().empty()) ensure_dir(out_stem.parent_path());
  auto model = MccModel::init(cfg.model, cfg.seed);
  ExperimentResult r;
  r.seed = cfg.seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    r.epochs = train(model, samples, cfg, [&](std::size_t e, const EpochLosses& l) {
      if (!log) return;
      std::ostringstream line;
      line << "epoch " << e + 1 << "/" << cfg.epochs << " L_C=" << l.counting
           << " L_S=" << l.spatial << " total=" << l.total;
      log(line.str());
    });
  } catch (const NumericalError& e) {
    write_json(out_stem.string() + ".abort.json",
               ojson{{"error", e.what()}, {"config", cfg.to_json()}});
    throw;
  }
  r.evaluation = evaluate(model, samples, categories);
  r.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  save_checkpoint(out_stem, model, cfg.epochs,
                  ojson{{"train", cfg.to_json()}, {"categories", categories}});
  write_json(out_stem.string() + ".result.json", r.to_json());
  return r;
}

// ---------------------------------------------------------------------------

EvalOptions EvalOptions::from_json(const ojson& j) {
  EvalOptions o;
  try {
    o.weight_eps = j.value("weight_eps", o.weight_eps);
    o.weight_mode = weight_mode_from_string(j.value("weight_mode", std::string("paper")));
    if (j.contains("taxonomy") && !j.at("taxonomy").is_null()) {
      o.taxonomy = j.at("taxonomy").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("eval config: ") + e.what());
  }
  return o;
}

MetricReport cmd_eval(const std::optional<fs::path>& checkpoint, const fs::path& data_dir,
                      const fs::path& density_dir, const EvalOptions& opts,
                      const fs::path& out_prefix) {
  const auto categories = taxonomy_or_default(opts.taxonomy).group_names();
  const auto samples = load_samples(data_dir, density_dir);
  for (const auto& s : samples) {
    if (s.gt.density.category_order != categories) {
      throw ValidationError("scene '" + s.id +
                            "' ground truth does not follow the taxonomy's group order");
    }
  }
  MetricReport report;
  if (checkpoint) {
    const auto model = load_checkpoint(*checkpoint);
    report = evaluate(model, samples, categories, opts.weight_eps, opts.weight_mode).report;
  } else {
    CountTable t;
    t.categories = categories;
    for (const auto& s : samples) {
      const auto c = count_from_density(s.gt.density, s.gt.mask);
      t.records.push_back({s.id, c, c});
    }
    report = build_report(t, opts.weight_eps, opts.weight_mode);
  }
  if (!out_prefix.parent_path().empty()) ensure_dir(out_prefix.parent_path());
  write_json(out_prefix.string() + ".json", report.to_json());
  write_text(out_prefix.string() + ".csv", report.to_csv());
  return report;
}

AblationResult cmd_ablate(AblationAxis axis, const AblationConfig& cfg, const fs::path& out_dir,
                          const Log& log) {
  ensure_dir(out_dir);
  auto r = run_ablation(axis, cfg, log);
  const std::string stem = "ablation_" + to_string(axis);
  auto j = r.to_json();
  j["config"] = cfg.to_json();
  write_json(out_dir / (stem + ".json"), j);
  write_text(out_dir / (stem + ".csv"), r.to_csv());
  return r;
}

std::vector<GradcheckOutcome> cmd_gradcheck(const std::string& scope,
                                            const std::optional<fs::path>& out) {
  const auto outcomes = run_gradcheck(scope);
  if (out) {
    ojson units = ojson::array();
    std::ostringstream csv;
    csv << "scope,unit,elements,worst_relative_error,passed\n";
    bool all = true;
    for (const auto& o : outcomes) {
      units.push_back({{"scope", o.scope},
                       {"unit", o.unit},
                       {"elements", o.elements},
                       {"worst_relative_error", o.worst_error},
                       {"passed", o.passed}});
      csv << o.scope << ',' << o.unit << ',' << o.elements << ',' << format_real(o.worst_error)
          << ',' << (o.passed ? "true" : "false") << '\n';
      all = all && o.passed;
    }
    write_json(*out, ojson{{"scope", scope},
                           {"tolerance", kGradcheckTolerance},
                           {"passed", all},
                           {"units", units}});
    auto csv_path = *out;
    csv_path.replace_extension(".csv");
    write_text(csv_path, csv.str());
  }
  return outcomes;
}

}  // namespace moc
