#pragma once

// Run configuration with a declarative JSON form and per-stage fingerprints.
// Defaults reproduce the reference experiment; a config file and then command
// line flags override them.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ktn/error.hpp"
#include "ktn/io.hpp"

namespace ktn {

struct RecipeConfig {
  int epochs = 40;
  double lr = 1e-3;
  int decay_epoch = 20;
  double decay_factor = 0.1;
  int batch = 64;
  double l2 = 5e-4;
  double init_std = 0.01;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string mnist_dir = "mnist";
  std::string workspace = "workspace";

  // dataset
  int height = 80;
  int width = 160;
  double fov_deg = 65.5;
  std::vector<double> test_thetas_deg{8, 16, 24, 32, 40, 48, 56, 64, 72};
  int train_digits = 60000;
  int test_digits = 10000;

  // planar source training
  RecipeConfig source{};
  int source_train_limit = 60000;

  // supervised equirectangular baseline
  RecipeConfig equirect{};
  int equirect_train_images = 60000;

  // distillation
  RecipeConfig distill{};
  int distill_images = 512;
  int heldout_images = 64;
  std::vector<int> lattice_strides{1, 1, 1};
  int group_rows = 5;

  // evaluation
  int eval_digits = 10000;  ///< test digits evaluated (each at every test angle)
  int timing_images = 20;
  std::string method = "ktn";

  void validate() const {
    auto fail = [](const std::string& m) { throw PreconditionError("config: " + m); };
    if (height < 2 || width != 2 * height) fail("width must equal 2 * height");
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) fail("fov_deg must be in (0, 180)");
    if (test_thetas_deg.empty()) fail("test_thetas_deg must not be empty");
    for (double t : test_thetas_deg)
      if (!(t > 0.0 && t < 180.0)) fail("test angles must be in (0, 180)");
    if (train_digits < 1 || test_digits < 1) fail("digit counts must be positive");
    for (const auto* r : {&source, &equirect, &distill}) {
      if (r->epochs < 1 || r->batch < 1 || !(r->lr > 0.0) || r->l2 < 0.0 || !(r->init_std > 0.0))
        fail("training recipe values out of range");
    }
    if (distill_images < 1 || heldout_images < 1) fail("distillation image counts must be positive");
    if (lattice_strides.size() != 3) fail("lattice_strides needs three entries");
    for (int s : lattice_strides)
      if (s < 1) fail("lattice strides must be >= 1");
    if (group_rows < 1) fail("group_rows must be >= 1");
    if (eval_digits < 1 || timing_images < 1) fail("evaluation counts must be positive");
    if (method != "ktn" && method != "projected" && method != "equirect")
      fail("method must be ktn, projected or equirect");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RecipeConfig, epochs, lr, decay_epoch, decay_factor,
                                                batch, l2, init_std)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, mnist_dir, workspace, height, width,
                                                fov_deg, test_thetas_deg, train_digits, test_digits,
                                                source, source_train_limit, equirect,
                                                equirect_train_images, distill, distill_images,
                                                heldout_images, lattice_strides, group_rows,
                                                eval_digits, timing_images, method)

/// Strict merge: unknown keys are rejected so typos do not silently fall back to
/// defaults.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw PreconditionError("config: top level must be a JSON object");
  nlohmann::json merged = base;
  for (const auto& [k, v] : j.items()) {
    if (!merged.contains(k)) throw PreconditionError("config: unknown key '" + k + "'");
    if (merged[k].is_object()) {
      if (!v.is_object()) throw PreconditionError("config: '" + k + "' must be an object");
      for (const auto& [k2, v2] : v.items()) {
        if (!merged[k].contains(k2))
          throw PreconditionError("config: unknown key '" + k + "." + k2 + "'");
        merged[k][k2] = v2;
      }
    } else {
      merged[k] = v;
    }
  }
  try {
    return merged.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("config: ") + e.what());
  }
}

inline std::string fingerprint_of(const nlohmann::json& j) { return io::hex64(io::fnv1a(j.dump())); }

/// Config fields each pipeline stage depends on. Paths and thread counts are
/// deliberately excluded: they do not change results.
inline nlohmann::json dataset_fields(const RunConfig& c) {
  return {{"seed", c.seed},
          {"height", c.height},
          {"width", c.width},
          {"fov_deg", c.fov_deg},
          {"test_thetas_deg", c.test_thetas_deg},
          {"train_digits", c.train_digits},
          {"test_digits", c.test_digits}};
}

inline nlohmann::json source_fields(const RunConfig& c, std::uint64_t source_seed) {
  return {{"seed", source_seed}, {"recipe", c.source}, {"train_limit", c.source_train_limit}};
}

inline nlohmann::json distill_fields(const RunConfig& c) {
  return {{"recipe", c.distill},
          {"images", c.distill_images},
          {"heldout", c.heldout_images},
          {"lattice_strides", c.lattice_strides},
          {"group_rows", c.group_rows},
          {"seed", c.seed}};
}

inline nlohmann::json equirect_fields(const RunConfig& c) {
  return {{"recipe", c.equirect}, {"train_images", c.equirect_train_images}, {"seed", c.seed}};
}

inline std::string config_fingerprint(const RunConfig& c) {
  nlohmann::json j = c;
  j.erase("workspace");
  j.erase("mnist_dir");
  return fingerprint_of(j);
}

}  // namespace ktn
