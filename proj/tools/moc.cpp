#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "moc/error.hpp"
#include "moc/harness.hpp"

namespace {

using ojson = nlohmann::ordered_json;

constexpr int kValidationFailure = 1;
constexpr int kNumericalFailure = 2;

ojson config_or_empty(const std::string& path) {
  return path.empty() ? ojson::object() : moc::read_json(path);
}

void log_line(const std::string& s) { std::cout << s << '\n' << std::flush; }

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-category object counting toolkit"};
  app.require_subcommand(1);

  std::string config, out, data, density, checkpoint, axis = "gamma", scope = "all", taxonomy;
  std::optional<std::uint64_t> seed;
  std::optional<double> sigma;
  std::optional<int> size, stride;
  std::optional<std::size_t> count;
  bool oracle = false, png = false;

  auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
  synth->add_option("--config", config, "scene config JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--seed", seed, "base seed");
  synth->add_option("--count", count, "number of scenes");
  synth->add_flag("--png", png, "also write 8-bit PNG previews");

  auto* densify = app.add_subcommand("densify", "render ground-truth density maps");
  densify->add_option("--config", config, "kernel config JSON")->check(CLI::ExistingFile);
  densify->add_option("--data", data, "directory of annotation files")->required();
  densify->add_option("--out", out, "output directory")->required();
  densify->add_option("--sigma", sigma, "kernel bandwidth in pixels");
  densify->add_option("--size", size, "odd kernel extent in pixels");
  densify->add_option("--stride", stride, "output stride");
  densify->add_option("--taxonomy", taxonomy, "taxonomy JSON")->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "train a model on a scene directory");
  train->add_option("--config", config, "training config JSON")->check(CLI::ExistingFile);
  train->add_option("--data", data, "scene directory")->required();
  train->add_option("--density", density, "density directory (defaults to --data)");
  train->add_option("--out", out, "checkpoint stem")->required();
  train->add_option("--seed", seed, "initialization and shuffling seed");
  train->add_option("--sigma", sigma, "recorded kernel bandwidth");
  train->add_option("--size", size, "recorded kernel extent");
  train->add_option("--stride", stride, "output stride");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config, "evaluation config JSON")->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem");
  eval->add_flag("--oracle", oracle, "score the ground truth against itself");
  eval->add_option("--data", data, "scene directory")->required();
  eval->add_option("--density", density, "density directory (defaults to --data)");
  eval->add_option("--taxonomy", taxonomy, "taxonomy JSON")->check(CLI::ExistingFile);
  eval->add_option("--out", out, "report prefix; writes .json and .csv")->required();

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  ablate->add_option("--config", config, "ablation config JSON")->check(CLI::ExistingFile);
  ablate->add_option("--axis", axis, "gamma, nir or dual-attention")
      ->check(CLI::IsMember({"gamma", "nir", "dual-attention"}));
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_option("--seed", seed, "first seed; the config's seed count is kept");

  auto* grad = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  grad->add_option("--config", config, "unused; accepted for uniformity")
      ->check(CLI::ExistingFile);
  grad->add_option("--scope", scope, "ops, model, losses or all")
      ->check(CLI::IsMember({"ops", "model", "losses", "all"}));
  grad->add_option("--out", out, "report JSON path (CSV twin written alongside)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidationFailure;
  }

  try {
    const Timer timer;
    if (synth->parsed()) {
      auto opts = moc::SynthOptions::from_json(config_or_empty(config));
      if (seed) opts.scene.seed = *seed;
      if (count) opts.count = *count;
      if (png) opts.png = true;
      const auto manifest = moc::cmd_synth(opts, out);
      std::cout << "wrote " << manifest["files"].size() << " files for " << opts.count
                << " scenes to " << out << " in " << timer.seconds() << " s\n";
      return 0;
    }
    if (densify->parsed()) {
      auto opts = moc::DensifyOptions::from_json(config_or_empty(config));
      if (sigma) opts.kernel.sigma = *sigma;
      if (size) opts.kernel.size = *size;
      if (stride) opts.out_stride = *stride;
      if (!taxonomy.empty()) opts.taxonomy = taxonomy;
      const auto r = moc::cmd_densify(data, opts, out, log_line);
      std::cout << "densified " << r.written << " files, " << r.failed << " failed\n";
      return r.failed == 0 ? 0 : kValidationFailure;
    }
    if (train->parsed()) {
      auto j = config_or_empty(config);
      if (seed) j["seed"] = *seed;
      if (stride) j["out_stride"] = *stride;
      if (sigma) j["kernel"]["sigma"] = *sigma;
      if (size) j["kernel"]["size"] = *size;
      const auto cfg = moc::TrainConfig::from_json(j);
      const auto r =
          moc::cmd_train(cfg, data, density.empty() ? data : density, out, log_line);
      std::cout << "final mean-MSE " << r.evaluation.report.mse_bar << ", WMSE "
                << r.evaluation.report.wmse << ", wall-clock " << r.wall_clock_seconds
                << " s\n";
      return 0;
    }
    if (eval->parsed()) {
      auto opts = moc::EvalOptions::from_json(config_or_empty(config));
      if (!taxonomy.empty()) opts.taxonomy = taxonomy;
      if (oracle == !checkpoint.empty()) {
        throw moc::ValidationError("eval needs exactly one of --checkpoint or --oracle");
      }
      std::optional<std::filesystem::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      const auto report = moc::cmd_eval(ckpt, data, density.empty() ? data : density, opts, out);
      std::cout << report.to_csv();
      return 0;
    }
    if (ablate->parsed()) {
      auto cfg = moc::AblationConfig::from_json(config_or_empty(config));
      if (seed) {
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) cfg.seeds[i] = *seed + i;
      }
      const auto r = moc::cmd_ablate(moc::ablation_axis_from_string(axis), cfg, out, log_line);
      std::cout << r.to_csv() << "elapsed " << timer.seconds() << " s\n";
      return 0;
    }
    if (grad->parsed()) {
      std::optional<std::filesystem::path> path;
      if (!out.empty()) path = out;
      const auto outcomes = moc::cmd_gradcheck(scope, path);
      bool ok = true;
      for (const auto& o : outcomes) {
        std::printf("%-6s %-22s %6zu elements  worst %.3e  %s\n", o.scope.c_str(),
                    o.unit.c_str(), o.elements, o.worst_error, o.passed ? "PASS" : "FAIL");
        ok = ok && o.passed;
      }
      std::printf("%s in %.2f s\n", ok ? "all gradient checks passed" : "gradient check FAILED",
                  timer.seconds());
      return ok ? 0 : kNumericalFailure;
    }
  } catch (const moc::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidationFailure;
  }
  return kValidationFailure;
}
