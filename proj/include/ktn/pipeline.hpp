#pragma once

// Workspace layout and pipeline stages. Every stage writes its artifacts and a
// manifest.json (stage fingerprint, upstream fingerprints, file hashes) and
// checks the manifests of the stages it consumes.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "ktn/config.hpp"
#include "ktn/distill.hpp"
#include "ktn/eval.hpp"
#include "ktn/idx.hpp"
#include "ktn/io.hpp"
#include "ktn/source_cnn.hpp"
#include "ktn/spherical_mnist.hpp"

namespace ktn {

/// A stage input is absent or was produced under a different configuration.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path targets() const { return root / "targets"; }
  std::filesystem::path ktn() const { return root / "ktn"; }
  std::filesystem::path reports() const { return root / "reports"; }

  std::filesystem::path source_model(const std::string& name) const {
    return models() / ("source_" + name + ".ktnt");
  }
  std::filesystem::path source_manifest(const std::string& name) const {
    return models() / ("source_" + name + ".json");
  }
  std::filesystem::path equirect_model() const { return models() / "equirect.ktnt"; }
  std::filesystem::path equirect_manifest() const { return models() / "equirect.json"; }
};

inline std::string file_hash(const std::filesystem::path& p) {
  return io::hex64(io::fnv1a(io::read_file(p)));
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::filesystem::create_directories(p.parent_path());
  io::write_text(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(io::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed JSON in " + p.string() + ": " + e.what(), 0);
  }
}

/// Loads a manifest and checks it was produced with the expected fingerprint.
inline nlohmann::json require_manifest(const std::filesystem::path& p, const std::string& stage,
                                       const std::string& fingerprint, const std::string& hint) {
  if (!std::filesystem::exists(p)) {
    throw MissingPrerequisite("missing " + stage + " artifacts (" + p.string() + "); run `" + hint +
                              "` first");
  }
  auto m = read_json(p);
  if (m.value("fingerprint", "") != fingerprint) {
    throw MissingPrerequisite(stage + " artifacts in " + p.parent_path().string() +
                              " were built with a different configuration (fingerprint " +
                              m.value("fingerprint", "?") + ", expected " + fingerprint +
                              "); rerun `" + hint + "`");
  }
  return m;
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- dataset -----------------------------------------------------------------

inline std::string dataset_fingerprint(const RunConfig& c) { return fingerprint_of(dataset_fields(c)); }

inline data::CanvasSpec canvas_of(const RunConfig& c) { return {c.height, c.width, c.fov_deg}; }

inline void stage_build_dataset(const RunConfig& c, const Workspace& ws, std::ostream& log) {
  const auto t0 = Clock::now();
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte"}) {
    if (!std::filesystem::exists(std::filesystem::path(c.mnist_dir) / f)) {
      throw MissingPrerequisite("MNIST file " + (std::filesystem::path(c.mnist_dir) / f).string() +
                                " not found; pass --mnist");
    }
  }
  const auto train = idx::load_mnist(c.mnist_dir, "train");
  const auto test = idx::load_mnist(c.mnist_dir, "test");
  nlohmann::json manifest{{"stage", "dataset"},
                          {"fingerprint", dataset_fingerprint(c)},
                          {"fields", dataset_fields(c)}};
  for (const bool is_test : {false, true}) {
    const std::string split = is_test ? "test" : "train";
    const auto& planar = is_test ? test : train;
    const std::size_t digits = static_cast<std::size_t>(is_test ? c.test_digits : c.train_digits);
    auto set = data::build_spherical(planar, digits, is_test, c.seed + (is_test ? 1000003 : 0),
                                     canvas_of(c), is_test ? c.test_thetas_deg : std::vector<double>{});
    const auto dir = ws.data() / split;
    data::save_spherical(dir, set);
    manifest["splits"][split] = {{"count", set.size()},
                                 {"files",
                                  {{"images.ktnt", file_hash(dir / "images.ktnt")},
                                   {"meta.ktnt", file_hash(dir / "meta.ktnt")}}}};
    log << "  " << split << ": " << set.size() << " samples\n";
  }
  write_json(ws.data() / "manifest.json", manifest);
  log << "  done in " << seconds_since(t0) << " s\n";
}

inline nlohmann::json require_dataset(const RunConfig& c, const Workspace& ws) {
  return require_manifest(ws.data() / "manifest.json", "dataset", dataset_fingerprint(c),
                          "build-dataset");
}

// ---- source CNN --------------------------------------------------------------

/// Sources "A" and "B" train with seeds `seed` and `seed + 1`; other names hash in.
inline std::uint64_t source_seed(const RunConfig& c, const std::string& name) {
  if (name == "A") return c.seed;
  if (name == "B") return c.seed + 1;
  return c.seed ^ io::fnv1a(name);
}

inline std::string source_fingerprint(const RunConfig& c, const std::string& name) {
  return fingerprint_of(source_fields(c, source_seed(c, name)));
}

inline TrainRecipe recipe_of(const RecipeConfig& r, std::uint64_t seed) {
  TrainRecipe t;
  t.epochs = r.epochs;
  t.batch = r.batch;
  t.lr = {r.lr, r.decay_epoch, r.decay_factor};
  t.l2 = r.l2;
  t.init_std = r.init_std;
  t.seed = seed;
  return t;
}

inline void stage_train_source(const RunConfig& c, const Workspace& ws, const std::string& name,
                               std::ostream& log) {
  const auto t0 = Clock::now();
  auto train = idx::load_mnist(c.mnist_dir, "train");
  const auto limit = static_cast<std::size_t>(c.source_train_limit);
  if (limit < train.images.count) {
    train.images.count = limit;
    train.images.pixels.resize(limit * train.images.rows * train.images.cols);
    train.labels.resize(limit);
  }
  const auto test = idx::load_mnist(c.mnist_dir, "test");
  nlohmann::json epochs = nlohmann::json::array();
  const auto model = train_source(train, recipe_of(c.source, source_seed(c, name)),
                                  [&](const EpochLog& e) {
                                    log << "  epoch " << e.epoch << " loss " << e.mean_loss
                                        << " train_acc " << e.train_accuracy << " lr " << e.lr
                                        << " (" << seconds_since(t0) << " s)\n"
                                        << std::flush;
                                    epochs.push_back({{"epoch", e.epoch},
                                                      {"loss", e.mean_loss},
                                                      {"train_accuracy", e.train_accuracy}});
                                  });
  const double acc = classifier_accuracy(model, mnist_source(test), nn::HorizontalPadding::zero);
  log << "  planar test accuracy " << acc << "\n";
  std::filesystem::create_directories(ws.models());
  save_model(ws.source_model(name), model);
  nlohmann::json layers = nlohmann::json::array();
  {
    auto m = model;
    const auto names = SourceCNN::parameter_names();
    const auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      layers.push_back({{"name", names[i]}, {"shape", params[i]->dims()}});
    }
  }
  write_json(ws.source_manifest(name),
             {{"stage", "source"},
              {"name", name},
              {"fingerprint", source_fingerprint(c, name)},
              {"fields", source_fields(c, source_seed(c, name))},
              {"model_hash", file_hash(ws.source_model(name))},
              {"tensors", layers},
              {"planar_test_accuracy", acc},
              {"epochs", epochs},
              {"seconds", seconds_since(t0)}});
}

inline SourceCNN require_source(const RunConfig& c, const Workspace& ws, const std::string& name,
                                std::string* model_hash = nullptr) {
  const auto m = require_manifest(ws.source_manifest(name), "source " + name,
                                  source_fingerprint(c, name), "train-source --name " + name);
  const auto hash = file_hash(ws.source_model(name));
  if (hash != m.value("model_hash", "")) {
    throw MissingPrerequisite("source " + name + " model file does not match its manifest; rerun "
                              "`train-source --name " + name + "`");
  }
  if (model_hash) *model_hash = hash;
  return load_model(ws.source_model(name));
}

// ---- target cache -----------------------------------------------------------------

inline geometry::GridSpec canvas_grid(const RunConfig& c) { return {c.height, c.width}; }

inline std::string targets_fingerprint(const RunConfig& c, const std::string& model_hash) {
  return fingerprint_of({{"dataset", dataset_fingerprint(c)},
                         {"model_hash", model_hash},
                         {"images", c.distill_images},
                         {"heldout", c.heldout_images},
                         {"lattice_strides", c.lattice_strides}});
}

inline std::string train_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "train-%06zu", i);
  return buf;
}
inline std::string heldout_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "test-%06zu", i);
  return buf;
}

/// Layers 1 and 2 double as teacher-forced inputs of the next layer and are
/// always computed densely; their stride only masks the loss.
inline std::array<TargetPlan, kSourceLayers> target_plans(const RunConfig& c, bool dense) {
  std::array<TargetPlan, kSourceLayers> plans;
  for (int l = 1; l <= kSourceLayers; ++l) {
    const int stride = (dense || l < kSourceLayers) ? 1 : c.lattice_strides[l - 1];
    plans[l - 1] = TargetPlan::make(canvas_grid(c), l, stride);
  }
  return plans;
}

inline std::array<Lattice, kSourceLayers> loss_lattices(const RunConfig& c) {
  std::array<Lattice, kSourceLayers> out;
  for (int l = 1; l <= kSourceLayers; ++l) {
    out[l - 1] = Lattice::make(output_grid(canvas_grid(c), l), c.lattice_strides[l - 1]);
  }
  return out;
}

inline void stage_cache_targets(const RunConfig& c, const Workspace& ws, const std::string& name,
                                std::ostream& log) {
  const auto t0 = Clock::now();
  require_dataset(c, ws);
  std::string hash;
  const SourceCNN source = require_source(c, ws, name, &hash);
  const auto root = ws.targets() / hash;
  const std::string fp = targets_fingerprint(c, hash);
  // Resume only a run started under the same fingerprint.
  const auto partial = root / "partial.json";
  bool resume = false;
  if (std::filesystem::exists(partial)) resume = read_json(partial).value("fingerprint", "") == fp;
  if (!resume) {
    std::filesystem::remove_all(root);
    write_json(partial, {{"fingerprint", fp}});
  }
  const auto train = data::load_spherical(ws.data() / "train");
  const auto test = data::load_spherical(ws.data() / "test");
  const auto n_train = std::min<std::size_t>(c.distill_images, train.size());
  const auto n_held = std::min<std::size_t>(c.heldout_images, test.size());
  const auto plans = target_plans(c, false);
  std::size_t done = 0, skipped = 0;
  auto run = [&](const std::string& id, const Tensor& image) {
    bool all = true;
    for (int l = 1; l <= kSourceLayers; ++l) all = all && std::filesystem::exists(target_file(root, l, id));
    if (all) {
      ++skipped;
      return;
    }
    for (int l = 1; l <= kSourceLayers; ++l) {
      const auto f = compute_target_features(image, source, plans[l - 1]);
      std::filesystem::create_directories(target_file(root, l, id).parent_path());
      io::save_tensor(target_file(root, l, id), f);
    }
    if (++done % 32 == 0) {
      log << "  " << done << " images (" << seconds_since(t0) << " s)\n" << std::flush;
    }
  };
  nlohmann::json train_ids = nlohmann::json::array(), held_ids = nlohmann::json::array();
  for (std::size_t i = 0; i < n_train; ++i) {
    run(train_id(i), train.image(i));
    train_ids.push_back(train_id(i));
  }
  for (std::size_t i = 0; i < n_held; ++i) {
    run(heldout_id(i), test.image(i));
    held_ids.push_back(heldout_id(i));
  }
  nlohmann::json lattice = nlohmann::json::array();
  for (int l = 1; l <= kSourceLayers; ++l) {
    const auto g = output_grid(canvas_grid(c), l);
    lattice.push_back({{"layer", l},
                       {"grid", {g.height, g.width}},
                       {"stride", c.lattice_strides[l - 1]},
                       {"patch_side", target_patch_side(l)},
                       {"tangent_spacing", canvas_grid(c).row_pitch()},
                       {"dense", l < kSourceLayers || c.lattice_strides[l - 1] == 1}});
  }
  write_json(root / "manifest.json", {{"stage", "targets"},
                                      {"fingerprint", fp},
                                      {"source", name},
                                      {"model_hash", hash},
                                      {"dataset", dataset_fingerprint(c)},
                                      {"lattice", lattice},
                                      {"train_ids", train_ids},
                                      {"heldout_ids", held_ids},
                                      {"seconds", seconds_since(t0)}});
  std::filesystem::remove(partial);
  log << "  " << done << " computed, " << skipped << " reused, " << seconds_since(t0) << " s\n";
}

inline nlohmann::json require_targets(const RunConfig& c, const Workspace& ws, const std::string& model_hash,
                                      const std::string& name) {
  return require_manifest(ws.targets() / model_hash / "manifest.json", "target cache for source " + name,
                          targets_fingerprint(c, model_hash), "cache-targets --source " + name);
}

inline std::vector<HeldoutImage> load_heldout(const RunConfig& c, const Workspace& ws,
                                              const std::string& model_hash, const nlohmann::json& manifest) {
  const auto test = data::load_spherical(ws.data() / "test");
  std::vector<HeldoutImage> out;
  std::size_t i = 0;
  for (const auto& id : manifest.at("heldout_ids")) {
    out.push_back({test.image(i++), load_targets(ws.targets() / model_hash, id.get<std::string>())});
  }
  (void)c;
  return out;
}

// ---- KTN training ------------------------------------------------------------------

inline std::string ktn_fingerprint(const RunConfig& c, const std::string& model_hash, int layer) {
  return fingerprint_of({{"targets", targets_fingerprint(c, model_hash)},
                         {"distill", distill_fields(c)},
                         {"layer", layer}});
}

inline std::filesystem::path ktn_file(const Workspace& ws, const std::string& hash, int layer) {
  return ws.ktn() / hash / ("layer" + std::to_string(layer) + ".ktnt");
}
inline std::filesystem::path ktn_manifest(const Workspace& ws, const std::string& hash, int layer) {
  return ws.ktn() / hash / ("layer" + std::to_string(layer) + ".json");
}

inline void stage_train_ktn(const RunConfig& c, const Workspace& ws, const std::string& name, int layer,
                            std::ostream& log) {
  const auto t0 = Clock::now();
  std::string hash;
  const SourceCNN source = require_source(c, ws, name, &hash);
  const auto manifest = require_targets(c, ws, hash, name);
  const auto tables = build_row_tables(canvas_grid(c), c.group_rows);
  const auto root = ws.targets() / hash;
  // Teacher forcing: inputs are images (layer 1) or cached F^{l-1}.
  std::vector<Tensor> inputs, targets;
  std::optional<data::SphericalSet> train;
  if (layer == 1) train = data::load_spherical(ws.data() / "train");
  std::size_t i = 0;
  for (const auto& idj : manifest.at("train_ids")) {
    const std::string id = idj.get<std::string>();
    inputs.push_back(layer == 1 ? train->image(i) : io::load_tensor(target_file(root, layer - 1, id)));
    targets.push_back(io::load_tensor(target_file(root, layer, id)));
    ++i;
  }
  train.reset();
  std::vector<DistillSample> samples;
  for (std::size_t k = 0; k < inputs.size(); ++k) samples.push_back({&inputs[k], &targets[k]});
  const auto lattice = loss_lattices(c)[layer - 1];
  auto ktn = KTNLayer::initialize(tables[layer - 1], kSourceChannels[layer - 1], c.seed * 1000 + layer,
                                  c.distill.init_std);
  const auto recipe = recipe_of(c.distill, c.seed * 7919 + layer);
  log << "  layer " << layer << ": " << samples.size() << " images, " << tables[layer - 1].size()
      << " row groups\n";
  const auto res = train_ktn_layer(ktn, source.conv[layer - 1], samples, lattice, recipe,
                                   [&](const DistillEpoch& e) {
                                     log << "  epoch " << e.epoch << " loss " << e.mean_loss << " lr "
                                         << e.lr << " (" << seconds_since(t0) << " s)\n"
                                         << std::flush;
                                   });
  log << "  initial loss " << res.initial_loss << ", final loss " << res.final_loss << "\n";
  std::filesystem::create_directories(ws.ktn() / hash);
  save_ktn_layer(ktn_file(ws, hash, layer), ktn);
  nlohmann::json groups = nlohmann::json::array(), curve = nlohmann::json::array();
  for (const auto& g : ktn.table.groups) {
    groups.push_back({{"first_row", g.first_row},
                      {"rows", g.rows},
                      {"theta", g.theta},
                      {"shape", {g.shape.height, g.shape.width}},
                      {"dilation", g.shape.dilation}});
  }
  for (const auto& e : res.curve) curve.push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}, {"lr", e.lr}});
  write_json(ktn_manifest(ws, hash, layer), {{"stage", "ktn"},
                                            {"layer", layer},
                                            {"source", name},
                                            {"model_hash", hash},
                                            {"fingerprint", ktn_fingerprint(c, hash, layer)},
                                            {"weights_hash", file_hash(ktn_file(ws, hash, layer))},
                                            {"groups", groups},
                                            {"initial_loss", res.initial_loss},
                                            {"final_loss", res.final_loss},
                                            {"curve", curve},
                                            {"seconds", seconds_since(t0)}});
}

inline std::array<KTNLayer, kSourceLayers> require_ktn(const RunConfig& c, const Workspace& ws,
                                                        const std::string& name, const std::string& hash) {
  const auto tables = build_row_tables(canvas_grid(c), c.group_rows);
  std::array<KTNLayer, kSourceLayers> out;
  for (int l = 1; l <= kSourceLayers; ++l) {
    const auto m = require_manifest(ktn_manifest(ws, hash, l), "KTN layer " + std::to_string(l) + " for source " + name,
                                    ktn_fingerprint(c, hash, l),
                                    "train-ktn --source " + name + " --layer " + std::to_string(l));
    if (file_hash(ktn_file(ws, hash, l)) != m.value("weights_hash", "")) {
      throw MissingPrerequisite("KTN layer " + std::to_string(l) + " weights do not match their manifest");
    }
    out[l - 1] = load_ktn_layer(ktn_file(ws, hash, l), tables[l - 1], kSourceChannels[l - 1]);
  }
  return out;
}

// ---- equirectangular baseline --------------------------------------------------------

inline std::string equirect_fingerprint(const RunConfig& c) {
  return fingerprint_of({{"dataset", dataset_fingerprint(c)}, {"fields", equirect_fields(c)}});
}

inline LabeledSource spherical_source(const data::SphericalSet& s, std::size_t limit) {
  LabeledSource src;
  src.count = std::min(limit, s.size());
  src.height = s.height;
  src.width = s.width;
  src.fetch = [&s](std::size_t i, double* dst) {
    s.copy_image(i, dst);
    return s.labels[i];
  };
  return src;
}

inline void stage_train_equirect(const RunConfig& c, const Workspace& ws, std::ostream& log) {
  const auto t0 = Clock::now();
  require_dataset(c, ws);
  const auto train = data::load_spherical(ws.data() / "train");
  nlohmann::json epochs = nlohmann::json::array();
  const auto model = train_classifier(
      spherical_source(train, static_cast<std::size_t>(c.equirect_train_images)),
      recipe_of(c.equirect, c.seed + 17), nn::HorizontalPadding::circular, [&](const EpochLog& e) {
        log << "  epoch " << e.epoch << " loss " << e.mean_loss << " train_acc " << e.train_accuracy
            << " lr " << e.lr << " (" << seconds_since(t0) << " s)\n"
            << std::flush;
        epochs.push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}, {"train_accuracy", e.train_accuracy}});
      });
  std::filesystem::create_directories(ws.models());
  save_model(ws.equirect_model(), model);
  write_json(ws.equirect_manifest(), {{"stage", "equirect"},
                                      {"fingerprint", equirect_fingerprint(c)},
                                      {"fields", equirect_fields(c)},
                                      {"model_hash", file_hash(ws.equirect_model())},
                                      {"epochs", epochs},
                                      {"seconds", seconds_since(t0)}});
}

inline SourceCNN require_equirect(const RunConfig& c, const Workspace& ws) {
  const auto m = require_manifest(ws.equirect_manifest(), "equirectangular baseline", equirect_fingerprint(c),
                                  "train-equirect");
  if (file_hash(ws.equirect_model()) != m.value("model_hash", "")) {
    throw MissingPrerequisite("equirectangular model file does not match its manifest");
  }
  return load_model(ws.equirect_model());
}

// ---- evaluation -------------------------------------------------------------------------

/// Test samples evaluated: the first eval_digits digits at every test angle.
inline std::vector<std::size_t> eval_indices(const RunConfig& c, const data::SphericalSet& test) {
  const std::size_t n = std::min(test.size(), static_cast<std::size_t>(c.eval_digits) * c.test_thetas_deg.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline nlohmann::json size_accounting(const std::array<KTNLayer, kSourceLayers>& ktns) {
  nlohmann::json layers = nlohmann::json::array();
  ParameterCounts total;
  for (int l = 0; l < kSourceLayers; ++l) {
    const auto pc = parameter_count(ktns[l], kSourceChannels[l + 1]);
    total += pc;
    layers.push_back({{"layer", l + 1},
                      {"projections", pc.projections},
                      {"blocks", pc.blocks},
                      {"source", pc.source},
                      {"untied", pc.untied}});
  }
  return {{"layers", layers},
          {"projections", total.projections},
          {"blocks", total.blocks},
          {"overhead", total.overhead()},
          {"source_kernels", total.source},
          {"untied", total.untied},
          {"overhead_fraction_of_untied", static_cast<double>(total.overhead()) / total.untied},
          {"overhead_fraction_of_source", static_cast<double>(total.overhead()) / total.source}};
}

inline std::filesystem::path report_stem(const Workspace& ws, const std::string& stem) {
  return ws.reports() / stem;
}

/// Depth sweep and conv3 RMSE of a spherical network against the held-out targets.
inline nlohmann::json feature_errors(const SphericalNetwork& net, std::span<const HeldoutImage> held,
                                     const RunConfig& c) {
  const auto lattices = loss_lattices(c);
  nlohmann::json gt = nlohmann::json::array(), prop = nlohmann::json::array();
  for (int l = 1; l <= kSourceLayers; ++l) {
    gt.push_back(eval_rmse(net, held, l, true, lattices[l - 1]));
    prop.push_back(eval_rmse(net, held, l, false, lattices[l - 1]));
  }
  return {{"rmse_ground_truth_input", gt}, {"rmse_propagated", prop}, {"heldout_images", held.size()}};
}

inline MethodReport evaluate_method(const RunConfig& c, const Workspace& ws, const std::string& method,
                                    const std::string& name, std::ostream& log) {
  require_dataset(c, ws);
  const auto test = data::load_spherical(ws.data() / "test");
  const auto idx = eval_indices(c, test);
  MethodReport r;
  r.method = method;
  std::size_t source_params = 0;
  if (method == "equirect") {
    const auto model = require_equirect(c, ws);
    const auto fn = equirect_logits(model);
    r.accuracy = eval_accuracy(fn, test, idx, c.test_thetas_deg);
    r.ms_per_image = ms_per_image(fn, test, static_cast<std::size_t>(c.timing_images));
    r.params_total = model.parameter_count();
    return r;
  }
  std::string hash;
  const SourceCNN source = require_source(c, ws, name, &hash);
  source_params = source.parameter_count();
  std::optional<SphericalNetwork> net;
  if (method == "ktn") {
    const auto ktns = require_ktn(c, ws, name, hash);
    r.extra["size"] = size_accounting(ktns);
    r.params_overhead = r.extra["size"]["overhead"].get<std::size_t>();
    net.emplace(source, ktns);
  } else {
    net.emplace(source, build_row_tables(canvas_grid(c), c.group_rows));
  }
  r.params_total = source_params + r.params_overhead;
  const auto t0 = Clock::now();
  r.accuracy = eval_accuracy(logits_of(*net), test, idx, c.test_thetas_deg);
  log << "  accuracy " << r.accuracy.mean << " on " << idx.size() << " samples (" << seconds_since(t0)
      << " s)\n";
  r.ms_per_image = ms_per_image(logits_of(*net), test, static_cast<std::size_t>(c.timing_images));
  const auto tm = ws.targets() / hash / "manifest.json";
  if (std::filesystem::exists(tm)) {
    const auto manifest = require_targets(c, ws, hash, name);
    const auto held = load_heldout(c, ws, hash, manifest);
    r.extra["features"] = feature_errors(*net, held, c);
    r.rmse_conv3 = r.extra["features"]["rmse_propagated"][kSourceLayers - 1].get<double>();
  } else {
    log << "  no target cache for source " << name << ": feature RMSE skipped\n";
  }
  return r;
}

inline void stage_eval(const RunConfig& c, const Workspace& ws, const std::string& name, std::ostream& log) {
  EvalReport rep;
  rep.fingerprint = config_fingerprint(c);
  rep.methods.push_back(evaluate_method(c, ws, c.method, name, log));
  const std::string stem = c.method == "equirect" ? "eval_equirect" : "eval_" + c.method + "_" + name;
  emit_report(rep, report_stem(ws, stem));
  log << "  mean accuracy " << rep.methods[0].accuracy.mean << " -> "
      << report_stem(ws, stem).string() << ".{csv,json}\n";
}

inline void stage_transfer_eval(const RunConfig& c, const Workspace& ws, const std::string& ktn_from,
                                const std::string& target, std::ostream& log) {
  require_dataset(c, ws);
  std::string hash_from, hash_target;
  require_source(c, ws, ktn_from, &hash_from);
  const SourceCNN tgt = require_source(c, ws, target, &hash_target);
  const auto ktns = require_ktn(c, ws, ktn_from, hash_from);
  const auto test = data::load_spherical(ws.data() / "test");
  const auto idx = eval_indices(c, test);
  const SphericalNetwork net = transfer_network(ktns, tgt);
  EvalReport rep;
  rep.fingerprint = config_fingerprint(c);
  MethodReport m;
  m.method = "ktn_" + ktn_from + "_on_" + target;
  m.accuracy = eval_accuracy(logits_of(net), test, idx, c.test_thetas_deg);
  m.params_total = tgt.parameter_count() + size_accounting(ktns)["overhead"].get<std::size_t>();
  m.params_overhead = size_accounting(ktns)["overhead"].get<std::size_t>();
  rep.methods.push_back(m);
  const std::string stem = "transfer_" + ktn_from + "_on_" + target;
  emit_report(rep, report_stem(ws, stem));
  log << "  mean accuracy " << m.accuracy.mean << " -> " << report_stem(ws, stem).string() << ".{csv,json}\n";
}

// ---- summary report and gates ---------------------------------------------------------

struct GateResult {
  std::string name;
  bool available = false;
  bool pass = false;
  std::string detail;
};

inline std::optional<EvalReport> try_report(const Workspace& ws, const std::string& stem) {
  const auto p = report_stem(ws, stem).concat(".json");
  if (!std::filesystem::exists(p)) return std::nullopt;
  return report_from_json(read_json(p));
}

/// Experiment-level checks over the emitted reports of sources A and B.
inline std::vector<GateResult> evaluate_gates(const Workspace& ws) {
  std::vector<GateResult> g;
  const auto ktn = try_report(ws, "eval_ktn_A");
  const auto proj = try_report(ws, "eval_projected_A");
  const auto eq = try_report(ws, "eval_equirect");
  const auto swap = try_report(ws, "transfer_A_on_B");
  const auto ktn_b = try_report(ws, "eval_ktn_B");
  auto acc = [](const std::optional<EvalReport>& r) { return r->methods.at(0).accuracy.mean; };
  auto fmt = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  {
    GateResult r{"accuracy_ordering"};
    if (ktn && proj && eq) {
      const double k = acc(ktn), p = acc(proj), e = acc(eq);
      r.available = true;
      r.pass = k >= 0.93 && e >= 0.90 && e <= 0.98 && p <= 0.30 && k > p + 0.50;
      r.detail = "ktn " + fmt(k) + ", equirect " + fmt(e) + ", projected " + fmt(p);
    }
    g.push_back(r);
  }
  {
    GateResult r{"transfer"};
    if (swap && ktn_b) {
      const double d = std::abs(acc(swap) - acc(ktn_b));
      r.available = true;
      r.pass = d <= 0.02;
      r.detail = "|ktn_A_on_B - ktn_B| = " + fmt(d);
    }
    g.push_back(r);
  }
  const auto feat = [](const std::optional<EvalReport>& r) -> const nlohmann::json* {
    if (!r || !r->methods.at(0).extra.contains("features")) return nullptr;
    return &r->methods.at(0).extra["features"];
  };
  {
    GateResult r{"rmse_ordering"};
    if (ktn && proj && ktn->methods[0].rmse_conv3 && proj->methods[0].rmse_conv3) {
      const double k = *ktn->methods[0].rmse_conv3, p = *proj->methods[0].rmse_conv3;
      r.available = true;
      r.pass = k < 0.7 * p;
      r.detail = "conv3 rmse ktn " + fmt(k) + ", projected " + fmt(p);
    }
    g.push_back(r);
  }
  {
    GateResult r{"depth_sweep"};
    const auto* fk = feat(ktn);
    const auto* fp = feat(proj);
    if (fk && fp) {
      const auto& p = (*fp)["rmse_ground_truth_input"];
      const auto& k = (*fk)["rmse_ground_truth_input"];
      const bool monotone = p[0].get<double>() <= 1.05 * p[1].get<double>() &&
                            p[1].get<double>() <= 1.05 * p[2].get<double>();
      const double gap1 = p[0].get<double>() - k[0].get<double>();
      const double gap3 = p[2].get<double>() - k[2].get<double>();
      r.available = true;
      r.pass = monotone && gap3 > gap1;
      r.detail = "projected " + fmt(p[0]) + "/" + fmt(p[1]) + "/" + fmt(p[2]) + ", gap conv1 " + fmt(gap1) +
                 " conv3 " + fmt(gap3);
    }
    g.push_back(r);
  }
  {
    GateResult r{"size"};
    if (ktn && ktn->methods[0].extra.contains("size")) {
      const double f = ktn->methods[0].extra["size"]["overhead_fraction_of_untied"].get<double>();
      r.available = true;
      r.pass = f < 0.10;
      r.detail = "overhead / untied = " + fmt(f);
    }
    g.push_back(r);
  }
  return g;
}

/// Collects every emitted report into summary.csv/json; returns false if a gate
/// listed in `required` failed or could not be evaluated.
inline bool stage_report(const RunConfig& c, const Workspace& ws, const std::vector<std::string>& required,
                         std::ostream& log) {
  EvalReport all;
  all.fingerprint = config_fingerprint(c);
  for (const auto* stem : {"eval_ktn_A", "eval_projected_A", "eval_equirect", "eval_ktn_B", "eval_projected_B",
                           "transfer_A_on_B", "transfer_B_on_A"}) {
    if (auto r = try_report(ws, stem)) {
      for (auto m : r->methods) {
        if (m.method == "ktn" || m.method == "projected") {
          m.method += std::string("_") + (std::string(stem).back());
        }
        all.methods.push_back(std::move(m));
      }
    }
  }
  const auto gates = evaluate_gates(ws);
  emit_report(all, report_stem(ws, "summary"));
  nlohmann::json gj = nlohmann::json::array();
  bool ok = true;
  for (const auto& gr : gates) {
    log << "  " << gr.name << ": " << (gr.available ? (gr.pass ? "pass" : "FAIL") : "n/a") << "  " << gr.detail
        << "\n";
    gj.push_back({{"name", gr.name}, {"available", gr.available}, {"pass", gr.pass}, {"detail", gr.detail}});
    const bool needed = std::find(required.begin(), required.end(), gr.name) != required.end();
    if (needed && !(gr.available && gr.pass)) ok = false;
  }
  write_json(ws.reports() / "gates.json", gj);
  return ok;
}

}  // namespace ktn
