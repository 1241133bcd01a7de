#pragma once

// Planar MNIST source network: three blocks of 5x5 conv -> 2x2 max-pool -> ReLU
// (32, 64, 128 channels), then a global spatial max-pool and a 128 -> 10 linear
// head. The same weights also serve as the supervised equirectangular baseline,
// run with circular horizontal padding on 80x160 canvases.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ktn/idx.hpp"
#include "ktn/io.hpp"
#include "ktn/nn/adam.hpp"
#include "ktn/nn/conv.hpp"
#include "ktn/nn/layers.hpp"
#include "ktn/tensor.hpp"

namespace ktn {

inline constexpr int kSourceLayers = 3;
inline constexpr int kSourceKernel = 5;
inline constexpr int kClasses = 10;
inline constexpr std::array<std::size_t, 4> kSourceChannels{1, 32, 64, 128};

struct SourceCNN {
  std::array<nn::ConvParams, kSourceLayers> conv;
  Tensor fc_weight;  ///< 128 x 10
  Tensor fc_bias;    ///< 10

  /// Normal(0, std) weights, zero biases.
  static SourceCNN initialize(std::uint64_t seed, double stddev = 0.01) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    SourceCNN m;
    for (int l = 0; l < kSourceLayers; ++l) {
      auto& c = m.conv[l];
      c.kernel = Tensor({kSourceKernel, kSourceKernel, kSourceChannels[l], kSourceChannels[l + 1]});
      for (auto& v : c.kernel.values()) v = normal(rng);
      c.bias = Tensor({kSourceChannels[l + 1]});
    }
    m.fc_weight = Tensor({kSourceChannels[3], kClasses});
    for (auto& v : m.fc_weight.values()) v = normal(rng);
    m.fc_bias = Tensor({static_cast<std::size_t>(kClasses)});
    return m;
  }

  void validate_architecture() const {
    for (int l = 0; l < kSourceLayers; ++l) {
      const std::vector<std::size_t> want{kSourceKernel, kSourceKernel, kSourceChannels[l],
                                          kSourceChannels[l + 1]};
      if (conv[l].kernel.dims() != want || conv[l].bias.dims() != std::vector{kSourceChannels[l + 1]}) {
        throw ShapeError("conv" + std::to_string(l + 1) + " has shape " +
                         conv[l].kernel.shape_string());
      }
    }
    if (fc_weight.dims() != std::vector<std::size_t>{kSourceChannels[3], kClasses} ||
        fc_bias.size() != kClasses) {
      throw ShapeError("head has shape " + fc_weight.shape_string());
    }
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p;
    for (auto& c : conv) {
      p.push_back(&c.kernel);
      p.push_back(&c.bias);
    }
    p.push_back(&fc_weight);
    p.push_back(&fc_bias);
    return p;
  }

  static std::vector<std::string> parameter_names() {
    return {"conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias",
            "conv3.kernel", "conv3.bias", "fc.weight",    "fc.bias"};
  }

  std::size_t parameter_count() const {
    std::size_t n = fc_weight.size() + fc_bias.size();
    for (const auto& c : conv) n += c.kernel.size() + c.bias.size();
    return n;
  }
};

/// Intermediate values of one forward pass, kept for backprop.
struct SourceTrace {
  std::array<Tensor, kSourceLayers> input;   ///< conv input
  std::array<Tensor, kSourceLayers> pooled;  ///< max-pooled conv output, before ReLU
  std::array<std::vector<std::uint32_t>, kSourceLayers> pool_argmax;
  std::array<std::vector<std::size_t>, kSourceLayers> conv_dims;
  Tensor features;  ///< N x 128 after the global max-pool
  std::vector<std::uint32_t> global_argmax;
  std::vector<std::size_t> top_dims;
  Tensor logits;
};

/// conv -> pool -> ReLU for one block with the given kernel parameters.
inline Tensor source_block(const Tensor& x, const nn::ConvParams& p, Tensor* pooled = nullptr,
                           std::vector<std::uint32_t>* argmax = nullptr) {
  auto pool = nn::maxpool2_forward(nn::conv2d_forward(x, p));
  if (pooled) *pooled = pool.output;
  if (argmax) *argmax = std::move(pool.argmax);
  return nn::relu_forward(std::move(pool.output));
}

/// Post-pool, post-ReLU feature map of block `layer` (1-based). Accepts one
/// H x W x 1 image or an N x H x W x 1 batch.
inline Tensor forward_to_layer(const SourceCNN& m, const Tensor& image, int layer,
                               nn::HorizontalPadding hpad = nn::HorizontalPadding::zero) {
  if (layer < 1 || layer > kSourceLayers) {
    throw PreconditionError("layer must be in [1, 3], got " + std::to_string(layer));
  }
  Tensor x = image;
  for (int l = 0; l < layer; ++l) {
    nn::ConvParams p = m.conv[l];
    p.hpad = hpad;
    x = source_block(x, p);
  }
  return x;
}

/// Global max-pool and linear head applied to a block-3 feature map (or batch).
inline Tensor head_logits(const SourceCNN& m, const Tensor& features3) {
  const auto g = nn::global_maxpool_forward(features3);
  return nn::linear_forward(g.output, m.fc_weight, m.fc_bias);
}

inline SourceTrace source_forward(const SourceCNN& m, const Tensor& batch,
                                  nn::HorizontalPadding hpad) {
  SourceTrace t;
  Tensor x = batch;
  for (int l = 0; l < kSourceLayers; ++l) {
    nn::ConvParams p = m.conv[l];
    p.hpad = hpad;
    t.input[l] = x;
    Tensor conv = nn::conv2d_forward(x, p);
    t.conv_dims[l] = conv.dims();
    auto pool = nn::maxpool2_forward(conv);
    t.pooled[l] = pool.output;
    t.pool_argmax[l] = std::move(pool.argmax);
    x = nn::relu_forward(std::move(pool.output));
  }
  t.top_dims = x.dims();
  auto g = nn::global_maxpool_forward(x);
  t.features = std::move(g.output);
  t.global_argmax = std::move(g.argmax);
  t.logits = nn::linear_forward(t.features, m.fc_weight, m.fc_bias);
  return t;
}

/// Gradients of the mean cross-entropy, in SourceCNN::parameters() order.
inline std::vector<Tensor> source_backward(const SourceCNN& m, const SourceTrace& t,
                                           const Tensor& dlogits, nn::HorizontalPadding hpad) {
  std::vector<Tensor> grads(2 * kSourceLayers + 2);
  auto lin = nn::linear_backward(t.features, m.fc_weight, dlogits);
  grads[6] = std::move(lin.weight);
  grads[7] = std::move(lin.bias);
  Tensor d = nn::maxpool2_backward(t.top_dims, t.global_argmax, lin.input);
  for (int l = kSourceLayers - 1; l >= 0; --l) {
    d = nn::relu_backward(t.pooled[l], std::move(d));
    d = nn::maxpool2_backward(t.conv_dims[l], t.pool_argmax[l], d);
    nn::ConvParams p = m.conv[l];
    p.hpad = hpad;
    auto g = nn::conv2d_backward(t.input[l], p, d, l > 0);
    grads[2 * l] = std::move(g.kernel);
    grads[2 * l + 1] = std::move(g.bias);
    d = std::move(g.input);
  }
  return grads;
}

/// Adam recipe: lr decays by `lr.factor` from epoch `lr.decay_epoch` on.
struct TrainRecipe {
  int epochs = 40;
  int batch = 64;
  nn::LrSchedule lr{};
  double l2 = 5e-4;
  double init_std = 0.01;
  std::uint64_t seed = 1;
};

/// Something that can fill a batch of labeled images by index.
struct LabeledSource {
  std::size_t count = 0;
  std::size_t height = 0, width = 0;
  /// Writes image `index` (height*width values) to `dst` and returns its label.
  std::function<int(std::size_t index, double* dst)> fetch;
};

inline LabeledSource mnist_source(const idx::Dataset& d) {
  LabeledSource s;
  s.count = d.images.count;
  s.height = d.images.rows;
  s.width = d.images.cols;
  s.fetch = [&d](std::size_t i, double* dst) {
    const auto img = d.images.image(i);
    std::copy(img.begin(), img.end(), dst);
    return d.labels[i];
  };
  return s;
}

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double lr = 0.0;
};

/// Supervised training with the given recipe; deterministic for a fixed seed.
inline SourceCNN train_classifier(const LabeledSource& data, const TrainRecipe& r,
                                  nn::HorizontalPadding hpad,
                                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (data.count == 0) throw PreconditionError("cannot train on an empty dataset");
  SourceCNN m = SourceCNN::initialize(r.seed, r.init_std);
  nn::AdamState opt;
  opt.weight_decay = r.l2;
  std::mt19937_64 rng(r.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t px = data.height * data.width;
  for (int epoch = 0; epoch < r.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    opt.lr = r.lr.at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < data.count; b0 += r.batch) {
      const std::size_t n = std::min<std::size_t>(r.batch, data.count - b0);
      Tensor batch({n, data.height, data.width, 1});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = data.fetch(order[b0 + i], batch.data() + i * px);
      const SourceTrace t = source_forward(m, batch, hpad);
      auto loss = nn::softmax_xent(t.logits, labels);
      loss_sum += loss.loss * n;
      const auto pred = nn::argmax_rows(t.logits);
      for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];
      const auto grads = source_backward(m, t, loss.grad, hpad);
      auto params = m.parameters();
      std::vector<nn::ParamRef> refs;
      for (std::size_t i = 0; i < params.size(); ++i) {
        refs.push_back({params[i], &grads[i], i % 2 == 0});
      }
      nn::adam_step(refs, opt);
    }
    if (on_epoch) {
      on_epoch({epoch + 1, loss_sum / data.count,
                static_cast<double>(correct) / data.count, opt.lr});
    }
  }
  return m;
}

inline SourceCNN train_source(const idx::Dataset& mnist, const TrainRecipe& r,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  return train_classifier(mnist_source(mnist), r, nn::HorizontalPadding::zero, on_epoch);
}

/// Fraction of samples whose argmax logit equals the label.
inline double classifier_accuracy(const SourceCNN& m, const LabeledSource& data,
                                  nn::HorizontalPadding hpad, std::size_t batch = 100) {
  std::size_t correct = 0;
  const std::size_t px = data.height * data.width;
  for (std::size_t b0 = 0; b0 < data.count; b0 += batch) {
    const std::size_t n = std::min(batch, data.count - b0);
    Tensor x({n, data.height, data.width, 1});
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = data.fetch(b0 + i, x.data() + i * px);
    const auto pred = nn::argmax_rows(head_logits(m, forward_to_layer(m, x, 3, hpad)));
    for (std::size_t i = 0; i < n; ++i) correct += pred[i] == labels[i];
  }
  return static_cast<double>(correct) / data.count;
}

inline void save_model(const std::filesystem::path& path, const SourceCNN& m) {
  m.validate_architecture();
  std::vector<Tensor> ts;
  for (const auto& c : m.conv) {
    ts.push_back(c.kernel);
    ts.push_back(c.bias);
  }
  ts.push_back(m.fc_weight);
  ts.push_back(m.fc_bias);
  io::save_tensors(path, ts);
}

/// Loads and validates a model; any truncation or shape mismatch throws and no
/// model is returned.
inline SourceCNN load_model(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::size_t off = 0;
  std::vector<Tensor> ts;
  for (int i = 0; i < 2 * kSourceLayers + 2; ++i) ts.push_back(io::decode_tensor(bytes, off));
  if (off != bytes.size()) throw FormatError("trailing bytes after model tensors", off);
  SourceCNN m;
  for (int l = 0; l < kSourceLayers; ++l) {
    m.conv[l].kernel = std::move(ts[2 * l]);
    m.conv[l].bias = std::move(ts[2 * l + 1]);
  }
  m.fc_weight = std::move(ts[6]);
  m.fc_bias = std::move(ts[7]);
  m.validate_architecture();
  return m;
}

}  // namespace ktn
