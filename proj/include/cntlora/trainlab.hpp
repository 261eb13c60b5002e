#pragma once

// LoRA-equipped toy training. Each attachment point computes
//   h = W_src x + (alpha / r) B A x
// with W_src frozen; only B and A receive updates. Backprop is written out by
// hand for the two supported architectures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cntlora/capture.hpp"
#include "cntlora/error.hpp"
#include "cntlora/initcore.hpp"
#include "cntlora/matrix.hpp"
#include "cntlora/numkit.hpp"

namespace cntlora {

struct LoraLayer {
  Matrix W_src;  // k x d, frozen
  Matrix B;      // k x r
  Matrix A;      // r x d
  double alpha = 1.0;
  std::size_t rank = 0;

  double scale() const { return rank == 0 ? 0.0 : alpha / static_cast<double>(rank); }

  static LoraLayer from(const Matrix& w_src, const AdapterInit& init) {
    return {w_src, init.B, init.A, init.alpha, init.rank};
  }
  /// Frozen layer without an adapter (rank 0).
  static LoraLayer frozen(const Matrix& w_src) {
    return {w_src, Matrix(w_src.rows(), 0), Matrix(0, w_src.cols()), 1.0, 0};
  }

  AdapterInit adapter(double p = 0.5) const { return {B, A, rank, alpha, p}; }
};

namespace detail {
inline void check_layer(const LoraLayer& l, const Matrix& x) {
  const std::size_t k = l.W_src.rows();
  const std::size_t d = l.W_src.cols();
  if (l.B.rows() != k || l.A.cols() != d || l.B.cols() != l.rank || l.A.rows() != l.rank) {
    throw Error(ErrorCode::ShapeMismatch, "LoRA factors B" + l.B.shape_string() + " A" + l.A.shape_string() +
                                              " inconsistent with W_src" + l.W_src.shape_string());
  }
  if (x.rows() != d) {
    throw Error(ErrorCode::ShapeMismatch, "input " + x.shape_string() + " for weight " + l.W_src.shape_string());
  }
}
}  // namespace detail

inline Matrix lora_forward(const LoraLayer& layer, const Matrix& x) {
  detail::check_layer(layer, x);
  Matrix y = layer.W_src * x;
  if (layer.rank > 0) y += (layer.B * (layer.A * x)) * layer.scale();
  return y;
}

struct LoraGrads {
  Matrix dB;
  Matrix dA;
  Matrix dX;
};

/// Exact gradients given dL/dY (k x b):
///   dB = s dY X^T A^T,  dA = s B^T dY X^T,  dX = W^T dY + s A^T B^T dY.
inline LoraGrads lora_backward(const LoraLayer& layer, const Matrix& x, const Matrix& dy) {
  detail::check_layer(layer, x);
  if (dy.rows() != layer.W_src.rows() || dy.cols() != x.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "dL/dY " + dy.shape_string() + " does not match output shape");
  }
  const double s = layer.scale();
  const Matrix xt = x.transpose();
  const Matrix ax = layer.A * x;          // r x b
  const Matrix bt_dy = layer.B.transpose() * dy;  // r x b
  LoraGrads g;
  g.dB = (dy * ax.transpose()) * s;
  g.dA = (bt_dy * xt) * s;
  g.dX = layer.W_src.transpose() * dy;
  if (layer.rank > 0) g.dX += (layer.A.transpose() * bt_dy) * s;
  return g;
}

/// A toy model whose attachment points carry LoRA adapters.
struct LoraNetwork {
  std::vector<std::string> ids;
  std::vector<LoraLayer> layers;
  Nonlinearity nonlinearity = Nonlinearity::None;
};

/// Points absent from `adapters` are kept frozen without an adapter (this is
/// how a zero-rank VAS allocation is represented).
inline LoraNetwork build_network(const ToyModel& model, const std::map<std::string, AdapterInit>& adapters) {
  LoraNetwork net;
  net.nonlinearity = model.config.nonlinearity;
  for (const auto& p : model.points) {
    net.ids.push_back(p.id);
    auto it = adapters.find(p.id);
    if (it == adapters.end()) {
      net.layers.push_back(LoraLayer::frozen(p.W_src));
      continue;
    }
    const AdapterInit& a = it->second;
    if (a.B.rows() != p.out_dim() || a.A.cols() != p.in_dim()) {
      throw Error(ErrorCode::ShapeMismatch, "adapter for '" + p.id + "' does not fit W_src" + p.W_src.shape_string());
    }
    net.layers.push_back(LoraLayer::from(p.W_src, a));
  }
  for (const auto& [id, _] : adapters) model.point(id);  // reject unknown ids
  return net;
}

inline Matrix softmax_columns(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) z += std::exp(logits(i, j) - mx);
    for (std::size_t i = 0; i < logits.rows(); ++i) p(i, j) = std::exp(logits(i, j) - mx) / z;
  }
  return p;
}

inline Matrix network_forward(const LoraNetwork& net, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = lora_forward(net.layers[l], h);
    if (l + 1 < net.layers.size()) h = apply_nonlinearity(net.nonlinearity, std::move(h));
  }
  return h;
}

/// MSE is the mean over every output entry; cross-entropy is the mean over
/// samples of -sum_i y_i log softmax_i.
inline double compute_loss(LossKind kind, const Matrix& out, const Matrix& y) {
  if (out.rows() != y.rows() || out.cols() != y.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "targets " + y.shape_string() + " vs outputs " + out.shape_string());
  }
  double loss = 0.0;
  if (kind == LossKind::MSE) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out.data()[i] - y.data()[i];
      loss += r * r;
    }
    return loss / static_cast<double>(out.size());
  }
  const Matrix p = softmax_columns(out);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (y.data()[i] != 0.0) loss -= y.data()[i] * std::log(std::max(p.data()[i], 1e-300));
  return loss / static_cast<double>(out.cols());
}

struct NetworkGrads {
  double loss = 0.0;
  std::vector<LoraGrads> layers;
};

inline NetworkGrads loss_and_grads(const LoraNetwork& net, const Matrix& x, const Matrix& y, LossKind kind) {
  const std::size_t n = net.layers.size();
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  Matrix h = x;
  for (std::size_t l = 0; l < n; ++l) {
    inputs.push_back(h);
    pre.push_back(lora_forward(net.layers[l], h));
    h = l + 1 < n ? apply_nonlinearity(net.nonlinearity, pre.back()) : pre.back();
  }
  NetworkGrads out;
  out.loss = compute_loss(kind, h, y);

  Matrix d_out;
  if (kind == LossKind::MSE) {
    d_out = (h - y) * (2.0 / static_cast<double>(h.size()));
  } else {
    d_out = (softmax_columns(h) - y) * (1.0 / static_cast<double>(h.cols()));
  }
  out.layers.resize(n);
  Matrix d_pre = std::move(d_out);
  for (std::size_t l = n; l-- > 0;) {
    out.layers[l] = lora_backward(net.layers[l], inputs[l], d_pre);
    if (l == 0) break;
    d_pre = out.layers[l].dX;
    const Matrix& z = pre[l - 1];
    for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre.data()[i] *= activate_grad(net.nonlinearity, z.data()[i]);
  }
  return out;
}

enum class OptimizerKind { SGD, AdamW };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  LossKind loss = LossKind::MSE;
  std::uint64_t seed = 0;
  double loss_threshold = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Evaluate held-out loss every N steps (0: only after the last step).
  std::size_t eval_every = 100;
  std::size_t smoothing_window = 10;
};

inline void validate(const TrainConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw Error(ErrorCode::BadConfig, "train.lr must be >= 0");
  if (cfg.steps == 0) throw Error(ErrorCode::BadConfig, "train.steps must be >= 1");
  if (cfg.batch_size == 0) throw Error(ErrorCode::BadConfig, "train.batch_size must be >= 1");
  if (cfg.smoothing_window == 0) throw Error(ErrorCode::BadConfig, "train.smoothing_window must be >= 1");
}

struct LayerSimilarity {
  std::optional<double> cosine;  // undefined when either delta is zero
  double spectral = 0.0;
};

/// Compares effective deltas (alpha/r) B A of the initial and final adapters:
/// cosine similarity of the flattened deltas and the spectral norm of their
/// difference.
inline LayerSimilarity init_final_metrics(const AdapterInit& init, const AdapterInit& final_) {
  const Matrix d0 = init.effective_delta();
  const Matrix d1 = final_.effective_delta();
  if (d0.rows() != d1.rows() || d0.cols() != d1.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "init and final adapters differ in shape");
  }
  LayerSimilarity out;
  const double n0 = frobenius_norm(d0);
  const double n1 = frobenius_norm(d1);
  if (n0 > 0.0 && n1 > 0.0) out.cosine = std::clamp(frobenius_dot(d0, d1) / (n0 * n1), -1.0, 1.0);
  out.spectral = spectral_norm(d0 - d1);
  return out;
}

struct RunMetrics {
  std::vector<std::pair<std::size_t, double>> loss_curve;
  std::vector<std::pair<std::size_t, double>> eval_curve;
  std::optional<std::size_t> steps_to_threshold;
  std::optional<double> final_eval_loss;
  std::map<std::string, LayerSimilarity> layers;
};

struct TrainResult {
  RunMetrics metrics;
  std::map<std::string, AdapterInit> final_adapters;
};

/// First step whose trailing mean over `window` losses is <= tau. Only full
/// windows count.
inline std::optional<std::size_t> smoothed_crossing(const std::vector<std::pair<std::size_t, double>>& curve,
                                                    double tau, std::size_t window) {
  double sum = 0.0;
  for (std::size_t t = 0; t < curve.size(); ++t) {
    sum += curve[t].second;
    if (t >= window) sum -= curve[t - window].second;
    if (t + 1 >= window && sum / static_cast<double>(window) <= tau) return curve[t].first;
  }
  return std::nullopt;
}

namespace detail {

struct AdamState {
  Matrix m, v;
};

inline void adamw_update(Matrix& param, const Matrix& grad, AdamState& st, const TrainConfig& cfg, std::size_t t) {
  if (st.m.empty() && !param.empty()) {
    st.m = Matrix(param.rows(), param.cols());
    st.v = Matrix(param.rows(), param.cols());
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto p = param.data();
  auto g = grad.data();
  auto m = st.m.data();
  auto v = st.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
  }
}

inline void sgd_update(Matrix& param, const Matrix& grad, double lr) {
  auto p = param.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

}  // namespace detail

/// Runs cfg.steps optimizer steps on minibatches drawn by epoch-wise
/// shuffling (no shuffling when the batch covers the whole training set).
/// The recorded loss at step t is the minibatch loss before update t.
inline TrainResult train(const ToyModel& model, const std::map<std::string, AdapterInit>& adapters,
                         const TrainConfig& cfg, const TaskData& data) {
  validate(cfg);
  LoraNetwork net = build_network(model, adapters);
  const std::size_t n = data.x_train.cols();
  if (n == 0) throw Error(ErrorCode::BadConfig, "no training data");
  const std::size_t bs = std::min(cfg.batch_size, n);
  const bool full_batch = bs == n;

  auto rng = make_rng(cfg.seed, 0x747261696eULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;

  std::vector<detail::AdamState> state_b(net.layers.size()), state_a(net.layers.size());
  TrainResult result;
  RunMetrics& metrics = result.metrics;

  auto eval = [&](std::size_t step) {
    if (data.x_eval.empty()) return;
    const double l = compute_loss(cfg.loss, network_forward(net, data.x_eval), data.y_eval);
    if (!std::isfinite(l)) throw Error(ErrorCode::Diverged, "eval loss became non-finite at step " + std::to_string(step));
    metrics.eval_curve.emplace_back(step, l);
  };

  Matrix xb, yb;
  if (full_batch) {
    xb = data.x_train;
    yb = data.y_train;
  }
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (!full_batch) {
      xb = Matrix(data.x_train.rows(), bs);
      yb = Matrix(data.y_train.rows(), bs);
      for (std::size_t j = 0; j < bs; ++j) {
        if (cursor == n) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const std::size_t src = order[cursor++];
        for (std::size_t i = 0; i < xb.rows(); ++i) xb(i, j) = data.x_train(i, src);
        for (std::size_t i = 0; i < yb.rows(); ++i) yb(i, j) = data.y_train(i, src);
      }
    }
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) eval(step);

    const NetworkGrads g = loss_and_grads(net, xb, yb, cfg.loss);
    if (!std::isfinite(g.loss)) {
      throw Error(ErrorCode::Diverged, "training loss became non-finite at step " + std::to_string(step) +
                                           " (learning rate too high?)");
    }
    metrics.loss_curve.emplace_back(step, g.loss);

    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      LoraLayer& layer = net.layers[l];
      if (layer.rank == 0) continue;
      if (cfg.optimizer == OptimizerKind::SGD) {
        detail::sgd_update(layer.B, g.layers[l].dB, cfg.lr);
        detail::sgd_update(layer.A, g.layers[l].dA, cfg.lr);
      } else {
        detail::adamw_update(layer.B, g.layers[l].dB, state_b[l], cfg, step + 1);
        detail::adamw_update(layer.A, g.layers[l].dA, state_a[l], cfg, step + 1);
      }
      if (!layer.B.all_finite() || !layer.A.all_finite()) {
        throw Error(ErrorCode::Diverged, "adapter weights became non-finite at step " + std::to_string(step));
      }
    }
  }
  eval(cfg.steps);
  if (!metrics.eval_curve.empty()) metrics.final_eval_loss = metrics.eval_curve.back().second;
  metrics.steps_to_threshold = smoothed_crossing(metrics.loss_curve, cfg.loss_threshold, cfg.smoothing_window);

  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& id = net.ids[l];
    auto it = adapters.find(id);
    if (it == adapters.end()) continue;
    AdapterInit fin = net.layers[l].adapter(it->second.p);
    metrics.layers[id] = init_final_metrics(it->second, fin);
    result.final_adapters.emplace(id, std::move(fin));
  }
  return result;
}

}  // namespace cntlora
