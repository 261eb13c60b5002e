#pragma once

// Seeded teacher/student toy networks with LoRA attachment points. The
// teacher weights W* define the fine-tuning task; the frozen "pretrained"
// weights are W_src = W* + N(0, sigma_w^2), so sigma_w controls domain shift.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cntlora/error.hpp"
#include "cntlora/matrix.hpp"

namespace cntlora {

enum class Architecture { Linear, MLP2 };
enum class Nonlinearity { None, Tanh, ReLU };
enum class LossKind { MSE, CrossEntropy };

struct AttachmentPoint {
  std::string id;
  Matrix W_src;  // k x d, frozen

  std::size_t in_dim() const noexcept { return W_src.cols(); }
  std::size_t out_dim() const noexcept { return W_src.rows(); }
};

struct ActivationBatch {
  std::string point_id;
  Matrix X;  // d x b, one sample per column
  std::size_t batch_index = 0;

  friend bool operator==(const ActivationBatch&, const ActivationBatch&) = default;
};

struct ToyModelConfig {
  Architecture architecture = Architecture::Linear;
  std::vector<std::size_t> dims{32, 32};
  Nonlinearity nonlinearity = Nonlinearity::None;
  std::uint64_t seed = 0;
  double sigma_w = 0.3;
};

struct ToyModel {
  ToyModelConfig config;
  std::vector<AttachmentPoint> points;
  std::vector<Matrix> teacher;  // W*, one per point

  std::size_t input_dim() const { return points.front().in_dim(); }
  std::size_t output_dim() const { return points.back().out_dim(); }

  const AttachmentPoint& point(const std::string& id) const {
    for (const auto& p : points)
      if (p.id == id) return p;
    throw Error(ErrorCode::BadConfig, "unknown attachment point '" + id + "'");
  }
};

inline std::string point_id(std::size_t layer) { return "layer" + std::to_string(layer) + ".fc"; }

inline double activate(Nonlinearity nl, double v) {
  switch (nl) {
    case Nonlinearity::None: return v;
    case Nonlinearity::Tanh: return std::tanh(v);
    case Nonlinearity::ReLU: return v > 0.0 ? v : 0.0;
  }
  return v;
}

/// Derivative of the nonlinearity expressed through its pre-activation.
inline double activate_grad(Nonlinearity nl, double pre) {
  switch (nl) {
    case Nonlinearity::None: return 1.0;
    case Nonlinearity::Tanh: {
      const double t = std::tanh(pre);
      return 1.0 - t * t;
    }
    case Nonlinearity::ReLU: return pre > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

inline Matrix apply_nonlinearity(Nonlinearity nl, Matrix m) {
  if (nl == Nonlinearity::None) return m;
  for (double& v : m.data()) v = activate(nl, v);
  return m;
}

/// Distinct RNG streams per purpose so that changing, say, the data size
/// never perturbs the model weights.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  if (stddev == 0.0) return m;
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

inline void validate(const ToyModelConfig& cfg) {
  const std::size_t expected = cfg.architecture == Architecture::Linear ? 2 : 3;
  if (cfg.dims.size() != expected) {
    throw Error(ErrorCode::BadConfig, std::string("model.dims must have ") + std::to_string(expected) +
                                          " entries for this architecture, got " +
                                          std::to_string(cfg.dims.size()));
  }
  for (auto d : cfg.dims)
    if (d == 0) throw Error(ErrorCode::BadConfig, "model.dims entries must be positive");
  if (!(cfg.sigma_w >= 0.0) || !std::isfinite(cfg.sigma_w)) {
    throw Error(ErrorCode::BadConfig, "model.sigma_w must be finite and >= 0");
  }
}

inline ToyModel build_toy_model(const ToyModelConfig& cfg) {
  validate(cfg);
  ToyModel model;
  model.config = cfg;
  auto rng = make_rng(cfg.seed, 0x6d6f64656cULL);
  for (std::size_t layer = 0; layer + 1 < cfg.dims.size(); ++layer) {
    const std::size_t d = cfg.dims[layer];
    const std::size_t k = cfg.dims[layer + 1];
    Matrix teacher = gaussian_matrix(k, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    Matrix src = teacher + gaussian_matrix(k, d, cfg.sigma_w, rng);
    model.teacher.push_back(std::move(teacher));
    model.points.push_back({point_id(layer), std::move(src)});
  }
  return model;
}

/// Forward through an arbitrary weight stack with the model's topology.
/// `layer_inputs` (if given) receives the exact tensor fed into each linear map.
inline Matrix forward_with(const ToyModel& model, const std::vector<Matrix>& weights, const Matrix& inputs,
                           std::vector<Matrix>* layer_inputs = nullptr) {
  if (inputs.rows() != model.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "inputs have " + std::to_string(inputs.rows()) +
                                              " rows, model expects " + std::to_string(model.input_dim()));
  }
  Matrix h = inputs;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (layer_inputs) layer_inputs->push_back(h);
    h = weights[l] * h;
    if (l + 1 < weights.size()) h = apply_nonlinearity(model.config.nonlinearity, std::move(h));
  }
  return h;
}

inline std::vector<Matrix> source_weights(const ToyModel& model) {
  std::vector<Matrix> w;
  for (const auto& p : model.points) w.push_back(p.W_src);
  return w;
}

/// Runs the frozen source model and records each attachment point's input.
inline std::vector<ActivationBatch> forward_capture(const ToyModel& model, const Matrix& inputs,
                                                    std::size_t batch_index = 0) {
  std::vector<Matrix> captured;
  forward_with(model, source_weights(model), inputs, &captured);
  std::vector<ActivationBatch> out;
  for (std::size_t l = 0; l < model.points.size(); ++l)
    out.push_back({model.points[l].id, std::move(captured[l]), batch_index});
  return out;
}

struct DataConfig {
  std::size_t n_train = 1024;
  std::size_t n_eval = 256;
  double noise_std = 0.01;
  std::uint64_t seed = 0;
};

/// Fine-tuning task drawn from the teacher: x ~ N(0, I), y = f_{W*}(x) + noise.
/// For cross-entropy, targets are one-hot argmax of the noisy teacher output.
struct TaskData {
  Matrix x_train, y_train;
  Matrix x_eval, y_eval;
};

inline TaskData make_task_data(const ToyModel& model, const DataConfig& cfg, LossKind loss = LossKind::MSE) {
  if (cfg.n_train == 0) throw Error(ErrorCode::BadConfig, "data.n_train must be positive");
  if (!(cfg.noise_std >= 0.0)) throw Error(ErrorCode::BadConfig, "data.noise_std must be >= 0");
  auto rng = make_rng(cfg.seed, 0x64617461ULL);
  auto draw = [&](std::size_t n, Matrix& x, Matrix& y) {
    if (n == 0) return;
    x = gaussian_matrix(model.input_dim(), n, 1.0, rng);
    y = forward_with(model, model.teacher, x) + gaussian_matrix(model.output_dim(), n, cfg.noise_std, rng);
    if (loss == LossKind::CrossEntropy) {
      Matrix onehot(y.rows(), y.cols());
      for (std::size_t j = 0; j < y.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < y.rows(); ++i)
          if (y(i, j) > y(best, j)) best = i;
        onehot(best, j) = 1.0;
      }
      y = std::move(onehot);
    }
  };
  TaskData data;
  draw(cfg.n_train, data.x_train, data.y_train);
  draw(cfg.n_eval, data.x_eval, data.y_eval);
  return data;
}

/// Captures `n_batches` consecutive groups of `samples_per_batch` training
/// inputs. Batches are returned grouped by point, in batch order.
inline std::vector<ActivationBatch> capture_training_batches(const ToyModel& model, const Matrix& x_train,
                                                             std::size_t samples_per_batch,
                                                             std::size_t n_batches = 1) {
  if (samples_per_batch == 0 || n_batches == 0) {
    throw Error(ErrorCode::BadConfig, "init.n_init_samples and init.n_batches must be positive");
  }
  if (samples_per_batch * n_batches > x_train.cols()) {
    throw Error(ErrorCode::BadConfig, "init.n_init_samples * init.n_batches exceeds data.n_train");
  }
  std::vector<std::vector<ActivationBatch>> per_batch;
  for (std::size_t j = 0; j < n_batches; ++j)
    per_batch.push_back(forward_capture(model, x_train.col_block(j * samples_per_batch, samples_per_batch), j));
  std::vector<ActivationBatch> out;
  for (std::size_t p = 0; p < model.points.size(); ++p)
    for (auto& b : per_batch) out.push_back(std::move(b[p]));
  return out;
}

inline std::vector<ActivationBatch> batches_for(const std::vector<ActivationBatch>& all, const std::string& id) {
  std::vector<ActivationBatch> out;
  for (const auto& b : all)
    if (b.point_id == id) out.push_back(b);
  return out;
}

}  // namespace cntlora
