#pragma once

// Accuracy per polar angle, feature RMSE against tangent-plane targets, timing,
// and CSV/JSON report emission.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ktn/distill.hpp"
#include "ktn/io.hpp"
#include "ktn/parallel.hpp"
#include "ktn/spherical_mnist.hpp"
#include "ktn/sphconv.hpp"

namespace ktn {

/// Maps a batch N x H x W x 1 to N x 10 logits.
using LogitsFn = std::function<Tensor(const Tensor&)>;

struct ThetaBin {
  double theta_deg = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / count : 0.0; }
};

struct AccuracyReport {
  std::vector<ThetaBin> bins;
  double mean = 0.0;  ///< average of the per-angle accuracies
};

/// Index of the bin whose angle is nearest to theta (radians).
inline std::size_t theta_bin(double theta, std::span<const double> bins_deg) {
  std::size_t best = 0;
  for (std::size_t b = 1; b < bins_deg.size(); ++b) {
    if (std::abs(data::deg2rad(bins_deg[b]) - theta) < std::abs(data::deg2rad(bins_deg[best]) - theta))
      best = b;
  }
  return best;
}

inline std::vector<int> predict(const LogitsFn& fn, const data::SphericalSet& set,
                                std::span<const std::size_t> indices, std::size_t batch = 32) {
  std::vector<int> pred(indices.size());
  const std::size_t chunks = (indices.size() + batch - 1) / batch;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t b0 = c * batch, b1 = std::min(indices.size(), b0 + batch);
    const auto p = nn::argmax_rows(fn(set.batch(indices.subspan(b0, b1 - b0))));
    std::copy(p.begin(), p.end(), pred.begin() + static_cast<std::ptrdiff_t>(b0));
  });
  return pred;
}

inline AccuracyReport accuracy_by_theta(std::span<const int> predicted, std::span<const int> labels,
                                        std::span<const double> thetas,
                                        std::span<const double> bins_deg) {
  if (predicted.size() != labels.size() || labels.size() != thetas.size()) {
    throw ShapeError("prediction, label and angle counts differ");
  }
  AccuracyReport r;
  for (double t : bins_deg) r.bins.push_back({t, 0, 0});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& bin = r.bins[theta_bin(thetas[i], bins_deg)];
    ++bin.count;
    bin.correct += predicted[i] == labels[i];
  }
  for (const auto& b : r.bins) r.mean += b.accuracy();
  r.mean /= static_cast<double>(r.bins.size());
  return r;
}

inline AccuracyReport eval_accuracy(const LogitsFn& fn, const data::SphericalSet& set,
                                    std::span<const std::size_t> indices,
                                    std::span<const double> bins_deg) {
  const auto pred = predict(fn, set, indices);
  std::vector<int> labels;
  std::vector<double> thetas;
  for (auto i : indices) {
    labels.push_back(set.labels[i]);
    thetas.push_back(set.thetas[i]);
  }
  return accuracy_by_theta(pred, labels, thetas, bins_deg);
}

/// Populates the kernel cache up front so that parallel callers only read it.
inline LogitsFn logits_of(const SphericalNetwork& net) {
  for (int l = 1; l <= kSourceLayers; ++l) net.kernels(l);
  return [&net](const Tensor& x) { return net.logits(x); };
}

/// The source architecture run directly on the canvas with wrapped columns.
inline LogitsFn equirect_logits(const SourceCNN& m) {
  return [&m](const Tensor& x) {
    return head_logits(m, forward_to_layer(m, x, kSourceLayers, nn::HorizontalPadding::circular));
  };
}

/// The transfer network: KTN weights trained against one source, applied to the
/// kernels and head of another source with the same architecture.
inline SphericalNetwork transfer_network(const std::array<KTNLayer, kSourceLayers>& ktn_from,
                                         const SourceCNN& target_source) {
  return SphericalNetwork(target_source, ktn_from);
}

// ---- feature RMSE ------------------------------------------------------------

struct HeldoutImage {
  Tensor image;                                ///< H x W x 1
  std::array<Tensor, kSourceLayers> targets;   ///< F^1..F^3
};

/// RMSE of layer l's output against the targets over the held-out images. With
/// ground-truth inputs the block is fed F^{l-1}; otherwise the network's own
/// propagated features.
inline double eval_rmse(const SphericalNetwork& net, std::span<const HeldoutImage> heldout, int layer,
                        bool use_ground_truth_input, const Lattice& lattice) {
  if (heldout.empty()) throw PreconditionError("no held-out images");
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& h : heldout) {
    Tensor pred;
    if (use_ground_truth_input) {
      pred = net.block(layer, layer == 1 ? h.image : h.targets[layer - 2]);
    } else {
      pred = net.forward_to_layer(h.image, layer);
    }
    const auto loss = distill_loss(pred, h.targets[layer - 1], lattice);
    sum += loss.value * loss.count;
    count += loss.count;
  }
  return std::sqrt(sum / static_cast<double>(count));
}

/// Median wall-clock per single-image forward, after one warm-up pass.
inline double ms_per_image(const LogitsFn& fn, const data::SphericalSet& set, std::size_t images) {
  images = std::min(images, set.size());
  if (images == 0) return 0.0;
  fn(set.batch(std::vector<std::size_t>{0}));
  std::vector<double> ms;
  for (std::size_t i = 0; i < images; ++i) {
    const Tensor x = set.batch(std::vector<std::size_t>{i});
    const auto t0 = std::chrono::steady_clock::now();
    fn(x);
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(ms.size() / 2), ms.end());
  return ms[ms.size() / 2];
}

// ---- reports -------------------------------------------------------------------

struct MethodReport {
  std::string method;
  AccuracyReport accuracy;
  std::optional<double> rmse_conv3;
  std::size_t params_total = 0;
  std::size_t params_overhead = 0;
  double ms_per_image = 0.0;
  nlohmann::json extra = nlohmann::json::object();  ///< depth sweep, size accounting
};

struct EvalReport {
  std::string fingerprint;
  std::vector<MethodReport> methods;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"method",       "theta_deg",       "accuracy",
                                             "rmse_conv3",   "params_total",    "params_overhead",
                                             "ms_per_image"};
  return cols;
}

namespace detail {
inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}
}  // namespace detail

/// One row per angle plus a "mean" row per method.
inline std::string report_csv(const EvalReport& r) {
  std::string out;
  for (std::size_t i = 0; i < report_columns().size(); ++i) out += (i ? "," : "") + report_columns()[i];
  out += "\n";
  for (const auto& m : r.methods) {
    const std::string tail = "," + (m.rmse_conv3 ? detail::fmt(*m.rmse_conv3) : std::string()) + "," +
                             std::to_string(m.params_total) + "," +
                             std::to_string(m.params_overhead) + "," + detail::fmt(m.ms_per_image) +
                             "\n";
    for (const auto& b : m.accuracy.bins) {
      out += m.method + "," + detail::fmt(b.theta_deg) + "," + detail::fmt(b.accuracy()) + tail;
    }
    out += m.method + ",mean," + detail::fmt(m.accuracy.mean) + tail;
  }
  return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j{{"fingerprint", r.fingerprint}, {"methods", nlohmann::json::array()}};
  for (const auto& m : r.methods) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : m.accuracy.bins) {
      bins.push_back({{"theta_deg", b.theta_deg},
                      {"accuracy", b.accuracy()},
                      {"correct", b.correct},
                      {"count", b.count}});
    }
    j["methods"].push_back({{"method", m.method},
                            {"bins", bins},
                            {"mean_accuracy", m.accuracy.mean},
                            {"rmse_conv3", m.rmse_conv3 ? nlohmann::json(*m.rmse_conv3) : nlohmann::json()},
                            {"params_total", m.params_total},
                            {"params_overhead", m.params_overhead},
                            {"ms_per_image", m.ms_per_image},
                            {"extra", m.extra}});
  }
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.fingerprint = j.at("fingerprint").get<std::string>();
  for (const auto& m : j.at("methods")) {
    MethodReport mr;
    mr.method = m.at("method").get<std::string>();
    for (const auto& b : m.at("bins")) {
      mr.accuracy.bins.push_back({b.at("theta_deg").get<double>(), b.at("correct").get<std::size_t>(),
                                  b.at("count").get<std::size_t>()});
    }
    mr.accuracy.mean = m.at("mean_accuracy").get<double>();
    if (!m.at("rmse_conv3").is_null()) mr.rmse_conv3 = m.at("rmse_conv3").get<double>();
    mr.params_total = m.at("params_total").get<std::size_t>();
    mr.params_overhead = m.at("params_overhead").get<std::size_t>();
    mr.ms_per_image = m.at("ms_per_image").get<double>();
    mr.extra = m.value("extra", nlohmann::json::object());
    r.methods.push_back(std::move(mr));
  }
  return r;
}

/// Writes <stem>.csv and <stem>.json.
inline void emit_report(const EvalReport& r, const std::filesystem::path& stem) {
  std::filesystem::create_directories(stem.parent_path().empty() ? "." : stem.parent_path());
  const auto csv = std::filesystem::path(stem).concat(".csv");
  const auto json = std::filesystem::path(stem).concat(".json");
  {
    std::ofstream probe(csv, std::ios::app);
    if (!probe) throw std::runtime_error("cannot write report to " + csv.string());
  }
  io::write_text(csv, report_csv(r));
  io::write_text(json, report_json(r).dump(2) + "\n");
}

/// Parsed CSV row; "mean" rows carry theta_deg = NaN.
struct CsvRow {
  std::string method;
  double theta_deg = 0.0;
  double accuracy = 0.0;
  std::optional<double> rmse_conv3;
  std::size_t params_total = 0, params_overhead = 0;
  double ms_per_image = 0.0;
};

inline std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != report_columns().size()) throw FormatError("report row has wrong arity", 0);
    CsvRow r;
    r.method = f[0];
    r.theta_deg = f[1] == "mean" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[1]);
    r.accuracy = std::stod(f[2]);
    if (!f[3].empty()) r.rmse_conv3 = std::stod(f[3]);
    r.params_total = std::stoull(f[4]);
    r.params_overhead = std::stoull(f[5]);
    r.ms_per_image = std::stod(f[6]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ktn
