// Experiment pipeline entry point. Exit codes: 0 success, 1 usage or config
// error, 2 missing prerequisite, 3 gate failure.

#include <cstdlib>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ktn/config.hpp"
#include "ktn/gradcheck.hpp"
#include "ktn/parallel.hpp"
#include "ktn/pipeline.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitMissing = 2;
constexpr int kExitGate = 3;

/// Binds one config field to a flag; applied only when the flag is given so that
/// flags override the config file.
struct Overrides {
  std::vector<std::pair<CLI::Option*, std::function<void(ktn::RunConfig&)>>> items;

  template <typename T>
  void add(CLI::App& app, const std::string& flag, T ktn::RunConfig::*field, const std::string& help) {
    auto value = std::make_shared<T>(ktn::RunConfig{}.*field);
    auto* opt = app.add_option(flag, *value, help)->capture_default_str();
    items.emplace_back(opt, [value, field](ktn::RunConfig& c) { c.*field = *value; });
  }

  template <typename T>
  void add_recipe(CLI::App& app, const std::string& prefix, ktn::RecipeConfig ktn::RunConfig::*recipe,
                  T ktn::RecipeConfig::*field, const std::string& name, const std::string& help) {
    auto value = std::make_shared<T>(ktn::RunConfig{}.*recipe.*field);
    auto* opt = app.add_option("--" + prefix + "-" + name, *value, help)->capture_default_str();
    items.emplace_back(opt, [value, recipe, field](ktn::RunConfig& c) { c.*recipe.*field = *value; });
  }

  void apply(ktn::RunConfig& c) const {
    for (const auto& [opt, fn] : items)
      if (opt->count() > 0) fn(c);
  }
};

void add_recipe_flags(CLI::App& app, Overrides& o, const std::string& prefix,
                      ktn::RecipeConfig ktn::RunConfig::*r, const std::string& what) {
  using R = ktn::RecipeConfig;
  o.add_recipe(app, prefix, r, &R::epochs, "epochs", what + ": training epochs");
  o.add_recipe(app, prefix, r, &R::lr, "lr", what + ": Adam learning rate");
  o.add_recipe(app, prefix, r, &R::decay_epoch, "decay-epoch",
               what + ": epoch (0-based) from which the rate is multiplied by the decay factor");
  o.add_recipe(app, prefix, r, &R::decay_factor, "decay-factor", what + ": learning-rate decay factor");
  o.add_recipe(app, prefix, r, &R::batch, "batch", what + ": minibatch size");
  o.add_recipe(app, prefix, r, &R::l2, "l2", what + ": L2 weight penalty");
  o.add_recipe(app, prefix, r, &R::init_std, "init-std", what + ": std of the normal weight init");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel transformer network experiment pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::size_t threads = 0;
  app.add_option("--config", config_path, "JSON config file (flags override its values)");
  app.add_option("--threads", threads, "Worker thread cap (0 = all cores)")->capture_default_str();

  Overrides o;
  using C = ktn::RunConfig;
  o.add(app, "--seed", &C::seed, "Master seed");
  o.add(app, "--mnist", &C::mnist_dir, "Directory holding the MNIST IDX files");
  o.add(app, "--workspace", &C::workspace,
        "Workspace root (the KTN_WORKSPACE environment variable overrides the config file)");
  o.add(app, "--height", &C::height, "Equirectangular canvas height");
  o.add(app, "--width", &C::width, "Equirectangular canvas width");
  o.add(app, "--fov-deg", &C::fov_deg, "Field of view covered by a digit, degrees");
  o.add(app, "--test-thetas", &C::test_thetas_deg, "Polar angles of the test placements, degrees");
  o.add(app, "--train-digits", &C::train_digits, "MNIST train digits placed on the sphere");
  o.add(app, "--test-digits", &C::test_digits, "MNIST test digits placed on the sphere");
  add_recipe_flags(app, o, "source", &C::source, "planar source CNN");
  o.add(app, "--source-train-limit", &C::source_train_limit, "MNIST train digits used for the source CNN");
  add_recipe_flags(app, o, "equirect", &C::equirect, "equirectangular baseline");
  o.add(app, "--equirect-train-images", &C::equirect_train_images,
        "Spherical train images used by the equirectangular baseline");
  add_recipe_flags(app, o, "distill", &C::distill, "KTN distillation");
  o.add(app, "--distill-images", &C::distill_images, "Spherical train images used for distillation");
  o.add(app, "--heldout-images", &C::heldout_images, "Held-out spherical images for feature RMSE");
  o.add(app, "--lattice-strides", &C::lattice_strides, "Target lattice stride per layer");
  o.add(app, "--group-rows", &C::group_rows, "Rows sharing one transformed kernel");
  o.add(app, "--eval-digits", &C::eval_digits, "Test digits evaluated (each at every test angle)");
  o.add(app, "--timing-images", &C::timing_images, "Images timed for the per-image cost");
  o.add(app, "--method", &C::method, "Network to evaluate: ktn, projected or equirect");

  auto* build = app.add_subcommand("build-dataset", "Render Spherical MNIST train/test splits");
  std::string source_name = "A";
  auto* train_src = app.add_subcommand("train-source", "Train a planar source CNN on MNIST");
  train_src->add_option("--name", source_name, "Source model name")->capture_default_str();

  auto* cache = app.add_subcommand("cache-targets", "Compute tangent-plane feature targets for a source");
  cache->add_option("--source", source_name, "Source model name")->capture_default_str();
  int layer = 0;
  auto* train_ktn = app.add_subcommand("train-ktn", "Distill the KTN layers of a source");
  train_ktn->add_option("--source", source_name, "Source model name")->capture_default_str();
  train_ktn->add_option("--layer", layer, "Layer to train (0 = all three)")
      ->check(CLI::Range(0, 3))
      ->capture_default_str();
  auto* train_eq = app.add_subcommand("train-equirect",
                                      "Train the supervised equirectangular baseline on spherical images");
  auto* eval = app.add_subcommand("eval", "Evaluate one method (see --method) on the spherical test split");
  eval->add_option("--source", source_name, "Source model name")->capture_default_str();
  std::string ktn_from = "A";
  auto* transfer = app.add_subcommand("transfer-eval", "Apply one source's KTN to another source's kernels");
  transfer->add_option("--ktn-from", ktn_from, "Source whose KTN weights are used")->capture_default_str();
  transfer->add_option("--source", source_name, "Source whose kernels and head are used")
      ->capture_default_str();
  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  std::string gate_path;
  auto* report = app.add_subcommand("report", "Summarize all reports and evaluate experiment gates");
  report->add_option("--gate", gate_path, "JSON file {\"gates\": [names]}; exit 3 if any listed gate fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  ktn::RunConfig cfg;
  try {
    if (!config_path.empty()) {
      cfg = ktn::config_from_json(ktn::read_json(config_path));
    }
    if (const char* env = std::getenv("KTN_WORKSPACE"); env && *env) cfg.workspace = env;
    o.apply(cfg);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  ktn::thread_cap() = threads;
  const ktn::Workspace ws{cfg.workspace};
  std::cout << "resolved config (fingerprint " << ktn::config_fingerprint(cfg) << "):\n"
            << nlohmann::json(cfg).dump(2) << "\n";

  try {
    if (*build) {
      ktn::stage_build_dataset(cfg, ws, std::cout);
    } else if (*train_src) {
      ktn::stage_train_source(cfg, ws, source_name, std::cout);
    } else if (*cache) {
      ktn::stage_cache_targets(cfg, ws, source_name, std::cout);
    } else if (*train_ktn) {
      for (int l = 1; l <= ktn::kSourceLayers; ++l) {
        if (layer == 0 || layer == l) ktn::stage_train_ktn(cfg, ws, source_name, l, std::cout);
      }
    } else if (*train_eq) {
      ktn::stage_train_equirect(cfg, ws, std::cout);
    } else if (*eval) {
      ktn::stage_eval(cfg, ws, source_name, std::cout);
    } else if (*transfer) {
      ktn::stage_transfer_eval(cfg, ws, ktn_from, source_name, std::cout);
    } else if (*grad) {
      const auto results = ktn::gradcheck::run_suite(cfg.seed);
      std::size_t failed = 0;
      double worst = 0.0;
      for (const auto& r : results) {
        worst = std::max(worst, r.rel_error);
        if (!r.pass) {
          ++failed;
          std::cout << "  FAIL " << r.op << " / " << r.argument << " #" << r.instance << ": analytic "
                    << r.analytic << ", numeric " << r.numeric << ", rel " << r.rel_error << "\n";
        }
      }
      std::cout << "  " << results.size() << " checks, " << failed << " failed, worst relative error "
                << worst << "\n";
      if (failed) return kExitGate;
    } else if (*report) {
      std::vector<std::string> required;
      if (!gate_path.empty()) {
        required = ktn::read_json(gate_path).at("gates").get<std::vector<std::string>>();
      }
      if (!ktn::stage_report(cfg, ws, required, std::cout)) return kExitGate;
    }
  } catch (const ktn::MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
