#pragma once

// Experiment configuration and the capture -> init -> allocate -> train ->
// report pipeline behind the command-line tool. Configs are JSON; every
// entry point validates the whole config before touching the filesystem.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cntlora/capture.hpp"
#include "cntlora/dump_io.hpp"
#include "cntlora/error.hpp"
#include "cntlora/initcore.hpp"
#include "cntlora/numkit.hpp"
#include "cntlora/trainlab.hpp"
#include "cntlora/vas.hpp"

namespace cntlora {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"cross", "self", "shift", "native", "pissa", "olora", "eva", "corda"};
  return m;
}

struct InitSettings {
  std::string method = "cross";
  std::size_t rank = 4;
  double alpha = 8.0;
  double p = 0.5;
  double rcond = 1e-12;
  double c_scale = 1.0;
  Decomposition decomp = Decomposition::SVD;
  std::size_t n_init_samples = 64;
  std::size_t n_batches = 1;
  bool normalize_weights = false;
};

struct VasSettings {
  bool enabled = false;
  std::size_t budget = 0;  // 0: rank * number of points
  std::size_t min_rank = 0;
};

struct SweepSettings {
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  ToyModelConfig model;
  DataConfig data;
  InitSettings init;
  VasSettings vas;
  TrainConfig train;
  std::string output_dir = ".";
  SweepSettings sweep;
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw Error(ErrorCode::BadConfig, section + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw Error(ErrorCode::BadConfig, (section.empty() ? "" : section + ".") + key + ": unknown key");
    }
  }
}

template <typename T>
void read_field(const json& obj, const std::string& section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, section + "." + key + ": " + e.what());
  }
}

template <typename Enum>
Enum read_enum(const json& obj, const std::string& section, const char* key, Enum fallback,
               std::initializer_list<std::pair<const char*, Enum>> names) {
  if (!obj.contains(key)) return fallback;
  std::string value;
  read_field(obj, section, key, value);
  for (const auto& [name, e] : names)
    if (value == name) return e;
  throw Error(ErrorCode::BadConfig, section + "." + key + ": unknown value '" + value + "'");
}

template <typename Enum>
std::string enum_name(Enum e, std::initializer_list<std::pair<const char*, Enum>> names) {
  for (const auto& [name, v] : names)
    if (v == e) return name;
  return "?";
}

inline const std::initializer_list<std::pair<const char*, Architecture>> kArchNames{
    {"linear", Architecture::Linear}, {"mlp2", Architecture::MLP2}};
inline const std::initializer_list<std::pair<const char*, Nonlinearity>> kNonlinNames{
    {"none", Nonlinearity::None}, {"tanh", Nonlinearity::Tanh}, {"relu", Nonlinearity::ReLU}};
inline const std::initializer_list<std::pair<const char*, Decomposition>> kDecompNames{
    {"svd", Decomposition::SVD}, {"qr", Decomposition::QR}};
inline const std::initializer_list<std::pair<const char*, OptimizerKind>> kOptNames{
    {"sgd", OptimizerKind::SGD}, {"adamw", OptimizerKind::AdamW}};
inline const std::initializer_list<std::pair<const char*, LossKind>> kLossNames{
    {"mse", LossKind::MSE}, {"cross_entropy", LossKind::CrossEntropy}};

}  // namespace detail

/// Applies `--section.key=value` style overrides; values are parsed as JSON
/// when possible and taken as strings otherwise.
inline void apply_override(json& cfg, const std::string& dotted_key, const std::string& raw_value) {
  json value;
  try {
    value = json::parse(raw_value);
  } catch (const json::exception&) {
    value = raw_value;
  }
  json* node = &cfg;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw Error(ErrorCode::BadConfig, "empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

inline void validate(const ExperimentConfig& cfg) {
  validate(cfg.model);
  validate(cfg.train);
  const auto& init = cfg.init;
  auto method_ok = [](const std::string& m) {
    return std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end();
  };
  if (!method_ok(init.method)) throw Error(ErrorCode::BadConfig, "init.method: unknown value '" + init.method + "'");
  for (const auto& m : cfg.sweep.methods)
    if (!method_ok(m)) throw Error(ErrorCode::BadConfig, "sweep.methods: unknown value '" + m + "'");
  if (init.rank == 0) throw Error(ErrorCode::BadConfig, "init.rank must be >= 1");
  const auto& dims = cfg.model.dims;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (init.rank > std::min(dims[l], dims[l + 1]) && !cfg.vas.enabled) {
      throw Error(ErrorCode::BadConfig, "init.rank " + std::to_string(init.rank) + " exceeds min(k, d) of " +
                                            point_id(l));
    }
  }
  if (!(init.alpha > 0.0)) throw Error(ErrorCode::BadConfig, "init.alpha must be positive");
  if (!(init.p >= 0.0 && init.p <= 1.0)) throw Error(ErrorCode::BadConfig, "init.p must lie in [0, 1]");
  if (!(init.rcond > 0.0 && init.rcond < 1.0)) throw Error(ErrorCode::BadConfig, "init.rcond must lie in (0, 1)");
  if (init.n_init_samples == 0) throw Error(ErrorCode::BadConfig, "init.n_init_samples must be >= 1");
  if (init.n_batches == 0) throw Error(ErrorCode::BadConfig, "init.n_batches must be >= 1");
  if (init.n_init_samples * init.n_batches > cfg.data.n_train) {
    throw Error(ErrorCode::BadConfig, "init.n_init_samples * init.n_batches exceeds data.n_train");
  }
  if (cfg.data.n_train == 0) throw Error(ErrorCode::BadConfig, "data.n_train must be >= 1");
  if (!(cfg.data.noise_std >= 0.0)) throw Error(ErrorCode::BadConfig, "data.noise_std must be >= 0");
  if (cfg.vas.enabled) {
    auto vas_ok = [](const std::string& m) {
      return m == "cross" || m == "self" || m == "shift" || m == "pissa" || m == "olora";
    };
    if (!vas_ok(init.method)) {
      throw Error(ErrorCode::BadConfig, "vas.enabled: method '" + init.method + "' has no weight delta to rank");
    }
    for (const auto& m : cfg.sweep.methods)
      if (!vas_ok(m)) throw Error(ErrorCode::BadConfig, "vas.enabled: sweep method '" + m + "' has no weight delta to rank");
  }
}

inline ExperimentConfig parse_config(const json& j) {
  using namespace detail;
  ExperimentConfig cfg;
  reject_unknown(j, "", {"model", "data", "init", "vas", "train", "output_dir", "sweep"});
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, "model", {"architecture", "dims", "nonlinearity", "seed", "sigma_w"});
    cfg.model.architecture = read_enum(m, "model", "architecture", cfg.model.architecture, kArchNames);
    read_field(m, "model", "dims", cfg.model.dims);
    cfg.model.nonlinearity = read_enum(m, "model", "nonlinearity", cfg.model.nonlinearity, kNonlinNames);
    read_field(m, "model", "seed", cfg.model.seed);
    read_field(m, "model", "sigma_w", cfg.model.sigma_w);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, "data", {"n_train", "n_eval", "noise_std", "seed"});
    read_field(d, "data", "n_train", cfg.data.n_train);
    read_field(d, "data", "n_eval", cfg.data.n_eval);
    read_field(d, "data", "noise_std", cfg.data.noise_std);
    read_field(d, "data", "seed", cfg.data.seed);
  }
  if (j.contains("init")) {
    const json& i = j["init"];
    reject_unknown(i, "init", {"method", "rank", "alpha", "p", "rcond", "C_scale", "decomp", "n_init_samples",
                               "n_batches", "normalize_weights"});
    read_field(i, "init", "method", cfg.init.method);
    read_field(i, "init", "rank", cfg.init.rank);
    read_field(i, "init", "alpha", cfg.init.alpha);
    read_field(i, "init", "p", cfg.init.p);
    read_field(i, "init", "rcond", cfg.init.rcond);
    read_field(i, "init", "C_scale", cfg.init.c_scale);
    cfg.init.decomp = read_enum(i, "init", "decomp", cfg.init.decomp, kDecompNames);
    read_field(i, "init", "n_init_samples", cfg.init.n_init_samples);
    read_field(i, "init", "n_batches", cfg.init.n_batches);
    read_field(i, "init", "normalize_weights", cfg.init.normalize_weights);
  }
  if (j.contains("vas")) {
    const json& v = j["vas"];
    reject_unknown(v, "vas", {"enabled", "budget", "min_rank"});
    read_field(v, "vas", "enabled", cfg.vas.enabled);
    read_field(v, "vas", "budget", cfg.vas.budget);
    read_field(v, "vas", "min_rank", cfg.vas.min_rank);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, "train", {"optimizer", "lr", "steps", "batch_size", "loss", "seed", "loss_threshold", "beta1",
                                "beta2", "eps", "weight_decay", "eval_every", "smoothing_window"});
    cfg.train.optimizer = read_enum(t, "train", "optimizer", cfg.train.optimizer, kOptNames);
    read_field(t, "train", "lr", cfg.train.lr);
    read_field(t, "train", "steps", cfg.train.steps);
    read_field(t, "train", "batch_size", cfg.train.batch_size);
    cfg.train.loss = read_enum(t, "train", "loss", cfg.train.loss, kLossNames);
    read_field(t, "train", "seed", cfg.train.seed);
    read_field(t, "train", "loss_threshold", cfg.train.loss_threshold);
    read_field(t, "train", "beta1", cfg.train.beta1);
    read_field(t, "train", "beta2", cfg.train.beta2);
    read_field(t, "train", "eps", cfg.train.eps);
    read_field(t, "train", "weight_decay", cfg.train.weight_decay);
    read_field(t, "train", "eval_every", cfg.train.eval_every);
    read_field(t, "train", "smoothing_window", cfg.train.smoothing_window);
  }
  read_field(j, "", "output_dir", cfg.output_dir);
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    reject_unknown(s, "sweep", {"methods", "seeds"});
    read_field(s, "sweep", "methods", cfg.sweep.methods);
    read_field(s, "sweep", "seeds", cfg.sweep.seeds);
  }
  validate(cfg);
  return cfg;
}

inline json to_json(const ExperimentConfig& cfg) {
  using namespace detail;
  json j;
  j["model"] = {{"architecture", enum_name(cfg.model.architecture, kArchNames)},
                {"dims", cfg.model.dims},
                {"nonlinearity", enum_name(cfg.model.nonlinearity, kNonlinNames)},
                {"seed", cfg.model.seed},
                {"sigma_w", cfg.model.sigma_w}};
  j["data"] = {{"n_train", cfg.data.n_train},
               {"n_eval", cfg.data.n_eval},
               {"noise_std", cfg.data.noise_std},
               {"seed", cfg.data.seed}};
  j["init"] = {{"method", cfg.init.method},       {"rank", cfg.init.rank},
               {"alpha", cfg.init.alpha},         {"p", cfg.init.p},
               {"rcond", cfg.init.rcond},         {"C_scale", cfg.init.c_scale},
               {"decomp", enum_name(cfg.init.decomp, kDecompNames)},
               {"n_init_samples", cfg.init.n_init_samples},
               {"n_batches", cfg.init.n_batches}, {"normalize_weights", cfg.init.normalize_weights}};
  j["vas"] = {{"enabled", cfg.vas.enabled}, {"budget", cfg.vas.budget}, {"min_rank", cfg.vas.min_rank}};
  j["train"] = {{"optimizer", enum_name(cfg.train.optimizer, kOptNames)},
                {"lr", cfg.train.lr},
                {"steps", cfg.train.steps},
                {"batch_size", cfg.train.batch_size},
                {"loss", enum_name(cfg.train.loss, kLossNames)},
                {"seed", cfg.train.seed},
                {"loss_threshold", cfg.train.loss_threshold},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"eps", cfg.train.eps},
                {"weight_decay", cfg.train.weight_decay},
                {"eval_every", cfg.train.eval_every},
                {"smoothing_window", cfg.train.smoothing_window}};
  j["output_dir"] = cfg.output_dir;
  j["sweep"] = {{"methods", cfg.sweep.methods}, {"seeds", cfg.sweep.seeds}};
  return j;
}

inline json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::Io, "cannot open config '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, path + ": " + e.what());
  }
}

/// Every seed in the experiment takes the same value.
inline void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.model.seed = seed;
  cfg.data.seed = seed;
  cfg.train.seed = seed;
}

/// CNTLORA_SEED, when set, overrides every seed in the config.
inline void apply_seed_env(ExperimentConfig& cfg) {
  const char* env = std::getenv("CNTLORA_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0') throw Error(ErrorCode::BadConfig, std::string("CNTLORA_SEED: not an integer '") + env + "'");
  apply_seed(cfg, v);
}

// ---------------------------------------------------------------------------
// Pipeline stages.

struct PreparedTask {
  ToyModel model;
  TaskData data;
  std::vector<ActivationBatch> batches;
};

inline PreparedTask prepare_task(const ExperimentConfig& cfg) {
  PreparedTask t;
  t.model = build_toy_model(cfg.model);
  t.data = make_task_data(t.model, cfg.data, cfg.train.loss);
  t.batches = capture_training_batches(t.model, t.data.x_train, cfg.init.n_init_samples, cfg.init.n_batches);
  return t;
}

inline bool is_constraint_mode(const std::string& method) {
  return method == "cross" || method == "self" || method == "shift";
}

inline EstimatorConfig estimator_config(const InitSettings& init) {
  EstimatorConfig e;
  e.mode = init.method == "self"    ? ConstraintMode::self()
           : init.method == "shift" ? ConstraintMode::shift(init.c_scale)
                                    : ConstraintMode::cross();
  e.rcond = init.rcond;
  e.p = init.p;
  e.decomp = init.decomp;
  e.normalize_weights = init.normalize_weights;
  return e;
}

inline BaselineKind baseline_kind(const std::string& method) {
  if (method == "native") return BaselineKind::NativeLoRA;
  if (method == "pissa") return BaselineKind::PiSSA;
  if (method == "olora") return BaselineKind::OLoRA;
  if (method == "eva") return BaselineKind::EVA;
  if (method == "corda") return BaselineKind::CORDA;
  throw Error(ErrorCode::BadConfig, "init.method: '" + method + "' is not a baseline");
}

struct AdapterSet {
  std::map<std::string, AdapterInit> adapters;
  std::map<std::string, Matrix> deltas;  // only for methods with a weight delta
  std::optional<RankAllocation> allocation;
};

/// Weight delta a method would decompose, used for rank allocation.
inline Matrix method_delta(const ExperimentConfig& cfg, const AttachmentPoint& point,
                           const std::vector<ActivationBatch>& batches) {
  if (is_constraint_mode(cfg.init.method)) {
    const auto mine = batches_for(batches, point.id);
    return estimate_delta(point.W_src, mine, estimator_config(cfg.init)).delta;
  }
  if (cfg.init.method == "pissa" || cfg.init.method == "olora") return point.W_src;
  throw Error(ErrorCode::BadConfig, "init.method '" + cfg.init.method + "' has no weight delta");
}

inline RankAllocation allocate_for(const ExperimentConfig& cfg, const ToyModel& model,
                                   const std::map<std::string, Matrix>& deltas) {
  std::vector<SingularProfile> profiles;
  for (const auto& p : model.points) profiles.push_back({p.id, singular_values(deltas.at(p.id))});
  const std::size_t budget = cfg.vas.budget > 0 ? cfg.vas.budget : default_budget(cfg.init.rank, profiles.size());
  return allocate_ranks(profiles, budget, cfg.vas.min_rank);
}

inline AdapterSet compute_adapters(const ExperimentConfig& cfg, const ToyModel& model,
                                   const std::vector<ActivationBatch>& batches) {
  AdapterSet out;
  const bool has_delta = is_constraint_mode(cfg.init.method) || cfg.init.method == "pissa" || cfg.init.method == "olora";
  if (has_delta) {
    for (const auto& p : model.points) out.deltas.emplace(p.id, method_delta(cfg, p, batches));
  }
  if (cfg.vas.enabled) out.allocation = allocate_for(cfg, model, out.deltas);

  for (std::size_t l = 0; l < model.points.size(); ++l) {
    const auto& p = model.points[l];
    const std::size_t rank = out.allocation ? out.allocation->rank_of(p.id) : cfg.init.rank;
    if (rank == 0) continue;
    if (is_constraint_mode(cfg.init.method)) {
      EstimatorConfig e = estimator_config(cfg.init);
      out.adapters.emplace(p.id, decompose(out.deltas.at(p.id), e, rank, cfg.init.alpha));
    } else {
      const auto mine = batches_for(batches, p.id);
      out.adapters.emplace(p.id, init_baseline(baseline_kind(cfg.init.method), p.W_src, mine, rank, cfg.init.alpha,
                                               cfg.train.seed + l, cfg.init.rcond));
    }
  }
  return out;
}

inline std::string adapter_key(const std::string& point, char which) {
  return point + (which == 'B' ? ".lora_B" : ".lora_A");
}

inline json adapter_sidecar(const ExperimentConfig& cfg, const AdapterSet& set) {
  json j = json::object();
  for (const auto& [id, a] : set.adapters) {
    j[id] = {{"rank", a.rank}, {"alpha", a.alpha}, {"p", a.p}, {"mode", cfg.init.method}};
  }
  return j;
}

inline json allocation_json(const RankAllocation& alloc) {
  json j = json::object();
  for (const auto& [id, r] : alloc.ranks) j[id] = r;
  j["budget"] = alloc.budget;
  return j;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw Error(ErrorCode::Io, "write failed for '" + path.string() + "'");
}

inline void write_adapters(const fs::path& weights_path, const ExperimentConfig& cfg, const AdapterSet& set) {
  std::vector<std::pair<std::string, Matrix>> entries;
  for (const auto& [id, a] : set.adapters) {
    entries.emplace_back(adapter_key(id, 'B'), a.B);
    entries.emplace_back(adapter_key(id, 'A'), a.A);
  }
  write_weights(weights_path.string(), entries);
  fs::path sidecar = weights_path;
  sidecar.replace_extension(".json");
  write_text(sidecar, adapter_sidecar(cfg, set).dump(2) + "\n");
}

inline std::map<std::string, AdapterInit> read_adapters(const fs::path& weights_path) {
  fs::path sidecar_path = weights_path;
  sidecar_path.replace_extension(".json");
  const json sidecar = load_json_file(sidecar_path.string());
  std::map<std::string, Matrix> mats;
  for (auto& [id, m] : read_weights(weights_path.string())) mats.emplace(id, std::move(m));
  std::map<std::string, AdapterInit> out;
  for (const auto& [id, meta] : sidecar.items()) {
    auto b = mats.find(adapter_key(id, 'B'));
    auto a = mats.find(adapter_key(id, 'A'));
    if (b == mats.end() || a == mats.end()) {
      throw Error(ErrorCode::BadConfig, weights_path.string() + ": missing factors for '" + id + "'");
    }
    AdapterInit init{b->second, a->second, meta.at("rank").get<std::size_t>(), meta.at("alpha").get<double>(),
                     meta.at("p").get<double>()};
    if (init.B.cols() != init.rank || init.A.rows() != init.rank) {
      throw Error(ErrorCode::ShapeMismatch, "adapter '" + id + "' rank disagrees with its factors");
    }
    out.emplace(id, std::move(init));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const RunMetrics& m) {
  const bool with_eval = !m.eval_curve.empty();
  std::map<std::size_t, double> eval(m.eval_curve.begin(), m.eval_curve.end());
  std::string out = with_eval ? "step,loss,eval_loss\n" : "step,loss\n";
  for (const auto& [step, loss] : m.loss_curve) {
    out += std::to_string(step) + "," + format_double(loss);
    if (with_eval) {
      out += ",";
      if (auto it = eval.find(step); it != eval.end()) out += format_double(it->second);
    }
    out += "\n";
  }
  if (with_eval) {
    // Final evaluation after the last update.
    if (auto it = eval.find(m.loss_curve.size()); it != eval.end()) {
      out += std::to_string(it->first) + ",," + format_double(it->second) + "\n";
    }
  }
  return out;
}

struct RunSummary {
  std::string init_method;
  std::uint64_t seed = 0;
  std::optional<std::size_t> steps_to_threshold;
  std::optional<double> cosine;
  std::optional<double> spectral;
  std::optional<double> final_loss;
  std::map<std::string, LayerSimilarity> layers;
};

inline RunSummary summarize(const std::string& method, std::uint64_t seed, const RunMetrics& m) {
  RunSummary s;
  s.init_method = method;
  s.seed = seed;
  s.steps_to_threshold = m.steps_to_threshold;
  s.final_loss = m.final_eval_loss;
  if (!s.final_loss && !m.loss_curve.empty()) s.final_loss = m.loss_curve.back().second;
  s.layers = m.layers;
  double cos_sum = 0.0, spec_sum = 0.0;
  std::size_t cos_n = 0;
  for (const auto& [_, l] : m.layers) {
    if (l.cosine) {
      cos_sum += *l.cosine;
      ++cos_n;
    }
    spec_sum += l.spectral;
  }
  if (cos_n > 0) s.cosine = cos_sum / static_cast<double>(cos_n);
  if (!m.layers.empty()) s.spectral = spec_sum / static_cast<double>(m.layers.size());
  return s;
}

template <typename T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

inline json summary_json(const RunSummary& s) {
  json layers = json::object();
  for (const auto& [id, l] : s.layers) layers[id] = {{"cosine", opt_json(l.cosine)}, {"spectral", l.spectral}};
  return {{"init_method", s.init_method},
          {"seed", s.seed},
          {"steps_to_threshold", opt_json(s.steps_to_threshold)},
          {"cosine", opt_json(s.cosine)},
          {"spectral", opt_json(s.spectral)},
          {"final_loss", opt_json(s.final_loss)},
          {"layers", layers}};
}

inline RunSummary summary_from_json(const json& j) {
  RunSummary s;
  s.init_method = j.at("init_method").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("steps_to_threshold").is_null()) s.steps_to_threshold = j["steps_to_threshold"].get<std::size_t>();
  if (!j.at("cosine").is_null()) s.cosine = j["cosine"].get<double>();
  if (!j.at("spectral").is_null()) s.spectral = j["spectral"].get<double>();
  if (j.contains("final_loss") && !j["final_loss"].is_null()) s.final_loss = j["final_loss"].get<double>();
  return s;
}

inline std::string summary_csv_header() { return "init_method,seed,steps_to_threshold,cosine,spectral,final_loss\n"; }

inline std::string summary_csv_row(const RunSummary& s) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return s.init_method + "," + std::to_string(s.seed) + "," +
         (s.steps_to_threshold ? std::to_string(*s.steps_to_threshold) : std::string()) + "," + opt(s.cosine) + "," +
         opt(s.spectral) + "," + opt(s.final_loss) + "\n";
}

inline void require_output_dir(const ExperimentConfig& cfg) {
  if (!fs::is_directory(cfg.output_dir)) {
    throw Error(ErrorCode::Io, "output_dir '" + cfg.output_dir + "' does not exist");
  }
}

/// One full pipeline run written to `dir`. Returns the run summary.
inline RunSummary run_single(const ExperimentConfig& cfg, const fs::path& dir) {
  const PreparedTask task = prepare_task(cfg);
  const AdapterSet set = compute_adapters(cfg, task.model, task.batches);
  write_adapters(dir / "adapters.cntw", cfg, set);
  if (set.allocation) write_text(dir / "allocation.json", allocation_json(*set.allocation).dump(2) + "\n");
  const TrainResult result = train(task.model, set.adapters, cfg.train, task.data);
  write_text(dir / "metrics.csv", metrics_csv(result.metrics));
  const RunSummary summary = summarize(cfg.init.method, cfg.train.seed, result.metrics);
  write_text(dir / "summary.json", summary_json(summary).dump(2) + "\n");
  return summary;
}

/// Expands the sweep (methods x seeds) into concrete configs. Without a
/// sweep section this is just the config itself.
inline std::vector<ExperimentConfig> expand_sweep(const ExperimentConfig& cfg) {
  std::vector<std::string> methods = cfg.sweep.methods;
  if (methods.empty()) methods.push_back(cfg.init.method);
  std::vector<ExperimentConfig> out;
  for (const auto& m : methods) {
    if (cfg.sweep.seeds.empty()) {
      ExperimentConfig c = cfg;
      c.init.method = m;
      out.push_back(c);
      continue;
    }
    for (auto seed : cfg.sweep.seeds) {
      ExperimentConfig c = cfg;
      c.init.method = m;
      apply_seed(c, seed);
      out.push_back(c);
    }
  }
  return out;
}

inline std::string run_dir_name(const ExperimentConfig& c) {
  return c.init.method + "_seed" + std::to_string(c.train.seed);
}

/// Runs every sweep entry into its own directory and merges the summaries
/// into <output_dir>/summary.csv.
inline std::vector<RunSummary> run_experiment(const ExperimentConfig& cfg) {
  require_output_dir(cfg);
  std::vector<RunSummary> summaries;
  for (const auto& c : expand_sweep(cfg)) {
    const fs::path dir = fs::path(cfg.output_dir) / run_dir_name(c);
    fs::create_directories(dir);
    summaries.push_back(run_single(c, dir));
  }
  std::string csv = summary_csv_header();
  for (const auto& s : summaries) csv += summary_csv_row(s);
  write_text(fs::path(cfg.output_dir) / "summary.csv", csv);
  return summaries;
}

struct MethodReport {
  std::string method;
  std::size_t runs = 0;
  std::size_t reached = 0;
  std::optional<double> median_steps;
  std::optional<double> mean_cosine;
  std::optional<double> mean_spectral;
  std::optional<double> median_final_loss;
};

inline std::optional<double> median_of(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Median steps-to-threshold counts runs that never crossed as +inf.
inline std::vector<MethodReport> aggregate_summaries(const std::vector<RunSummary>& runs) {
  std::vector<MethodReport> out;
  std::vector<std::string> order;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.init_method) == order.end()) order.push_back(r.init_method);
  for (const auto& m : order) {
    MethodReport rep;
    rep.method = m;
    std::vector<double> steps, cos, spec, fin;
    for (const auto& r : runs) {
      if (r.init_method != m) continue;
      ++rep.runs;
      if (r.steps_to_threshold) ++rep.reached;
      steps.push_back(r.steps_to_threshold ? static_cast<double>(*r.steps_to_threshold)
                                           : std::numeric_limits<double>::infinity());
      if (r.cosine) cos.push_back(*r.cosine);
      if (r.spectral) spec.push_back(*r.spectral);
      if (r.final_loss) fin.push_back(*r.final_loss);
    }
    rep.median_steps = median_of(steps);
    rep.mean_cosine = mean_of(cos);
    rep.mean_spectral = mean_of(spec);
    rep.median_final_loss = median_of(fin);
    out.push_back(rep);
  }
  return out;
}

inline std::vector<RunSummary> load_summaries(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, "report directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path candidate = entry.path() / "summary.json";
    if (entry.is_directory() && fs::exists(candidate)) files.push_back(candidate);
  }
  if (fs::exists(dir / "summary.json")) files.push_back(dir / "summary.json");
  std::sort(files.begin(), files.end());
  std::vector<RunSummary> out;
  for (const auto& f : files) out.push_back(summary_from_json(load_json_file(f.string())));
  return out;
}

inline std::string report_csv(const std::vector<MethodReport>& reps) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string out = "init_method,runs,reached_threshold,median_steps_to_threshold,mean_cosine,mean_spectral,median_final_loss\n";
  for (const auto& r : reps) {
    out += r.method + "," + std::to_string(r.runs) + "," + std::to_string(r.reached) + "," + opt(r.median_steps) + "," +
           opt(r.mean_cosine) + "," + opt(r.mean_spectral) + "," + opt(r.median_final_loss) + "\n";
  }
  return out;
}

}  // namespace cntlora
