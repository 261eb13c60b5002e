// cntlora: capture activations, compute closed-form LoRA initializations,
// allocate ranks, train toy models and report comparisons.
//
// Exit codes: 0 success, 1 configuration or I/O error, 2 training diverged.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cntlora/experiment.hpp"

namespace {

using namespace cntlora;

struct CommonArgs {
  std::string config_path;
};

/// Turns leftover `--section.key=value` / `--section.key value` arguments
/// (and top-level keys such as `--output_dir=...`) into config overrides.
void apply_overrides(json& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() == 2) {
      throw Error(ErrorCode::BadConfig, "unrecognized argument '" + arg + "'");
    }
    std::string key = arg.substr(2);
    std::string value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw Error(ErrorCode::BadConfig, "missing value for '" + arg + "'");
      value = extras[++i];
    }
    apply_override(cfg, key, value);
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  json raw = load_json_file(path);
  apply_overrides(raw, extras);
  ExperimentConfig cfg = parse_config(raw);
  apply_seed_env(cfg);
  return cfg;
}

std::string default_path(const ExperimentConfig& cfg, const std::string& given, const char* name) {
  return given.empty() ? (fs::path(cfg.output_dir) / name).string() : given;
}

void check_points(const ToyModel& model, const std::vector<ActivationBatch>& batches, const std::string& path) {
  for (const auto& b : batches) {
    const auto& p = model.point(b.point_id);
    if (b.X.rows() != p.in_dim()) {
      throw Error(ErrorCode::ShapeMismatch, path + ": batch for '" + b.point_id + "' has " +
                                                std::to_string(b.X.rows()) + " rows, expected " +
                                                std::to_string(p.in_dim()));
    }
  }
  for (const auto& p : model.points) {
    if (batches_for(batches, p.id).empty()) {
      throw Error(ErrorCode::MissingActivations, path + ": no activations for '" + p.id + "'");
    }
  }
}

int cmd_capture(const ExperimentConfig& cfg, const std::string& out_arg) {
  require_output_dir(cfg);
  const std::string out = default_path(cfg, out_arg, "activations.cnta");
  const PreparedTask task = prepare_task(cfg);
  write_dump(out, task.batches);
  for (const auto& b : task.batches) {
    std::printf("%s batch %zu: %zu x %zu\n", b.point_id.c_str(), b.batch_index, b.X.rows(), b.X.cols());
  }
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

std::vector<ActivationBatch> load_batches(const ExperimentConfig& cfg, const ToyModel& model, const std::string& arg) {
  const std::string path = default_path(cfg, arg, "activations.cnta");
  auto batches = read_dump(path);
  check_points(model, batches, path);
  return batches;
}

int cmd_init(const ExperimentConfig& cfg, const std::string& acts_arg, const std::string& out_arg) {
  require_output_dir(cfg);
  const ToyModel model = build_toy_model(cfg.model);
  const auto batches = load_batches(cfg, model, acts_arg);
  const AdapterSet set = compute_adapters(cfg, model, batches);
  const fs::path out = default_path(cfg, out_arg, "adapters.cntw");
  write_adapters(out, cfg, set);
  if (set.allocation) {
    write_text(fs::path(cfg.output_dir) / "allocation.json", allocation_json(*set.allocation).dump(2) + "\n");
  }
  for (const auto& [id, a] : set.adapters) {
    std::printf("%s: rank %zu, |delta|_F = %.6g\n", id.c_str(), a.rank, frobenius_norm(a.effective_delta()));
  }
  std::printf("wrote %s\n", out.string().c_str());
  return 0;
}

int cmd_allocate(ExperimentConfig cfg, const std::string& acts_arg, const std::string& out_arg, bool min_rank_one) {
  if (min_rank_one) cfg.vas.min_rank = std::max<std::size_t>(cfg.vas.min_rank, 1);
  cfg.vas.enabled = true;
  validate(cfg);
  require_output_dir(cfg);
  const ToyModel model = build_toy_model(cfg.model);
  const auto batches = load_batches(cfg, model, acts_arg);
  std::map<std::string, Matrix> deltas;
  for (const auto& p : model.points) deltas.emplace(p.id, method_delta(cfg, p, batches));
  const RankAllocation alloc = allocate_for(cfg, model, deltas);
  const std::string out = default_path(cfg, out_arg, "allocation.json");
  const std::string text = allocation_json(alloc).dump(2) + "\n";
  write_text(out, text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& adapters_arg) {
  require_output_dir(cfg);
  const fs::path adapters_path = default_path(cfg, adapters_arg, "adapters.cntw");
  const ToyModel model = build_toy_model(cfg.model);
  const TaskData data = make_task_data(model, cfg.data, cfg.train.loss);
  const auto adapters = read_adapters(adapters_path);
  const TrainResult result = train(model, adapters, cfg.train, data);
  write_text(fs::path(cfg.output_dir) / "metrics.csv", metrics_csv(result.metrics));
  const RunSummary s = summarize(cfg.init.method, cfg.train.seed, result.metrics);
  const std::string text = summary_json(s).dump(2) + "\n";
  write_text(fs::path(cfg.output_dir) / "summary.json", text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

int cmd_run(const ExperimentConfig& cfg) {
  const auto summaries = run_experiment(cfg);
  std::fputs(summary_csv_header().c_str(), stdout);
  for (const auto& s : summaries) std::fputs(summary_csv_row(s).c_str(), stdout);
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto reps = aggregate_summaries(load_summaries(dir));
  const std::string csv = report_csv(reps);
  write_text(fs::path(dir) / "report.csv", csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-form, training-free LoRA initialization toolkit"};
  app.require_subcommand(1);

  std::string config_path, acts_path, out_path, adapters_path, report_dir;
  bool min_rank_one = false;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Experiment config (JSON)")->required();
    sub->allow_extras();
  };

  auto* capture = app.add_subcommand("capture", "Capture attachment-point activations into a CNTA dump");
  add_config(capture);
  capture->add_option("-o,--out", out_path, "Dump path (default <output_dir>/activations.cnta)");

  auto* init = app.add_subcommand("init", "Compute adapter initializations from an activation dump");
  add_config(init);
  init->add_option("-a,--activations", acts_path, "Activation dump (default <output_dir>/activations.cnta)");
  init->add_option("-o,--out", out_path, "Adapter file (default <output_dir>/adapters.cntw)");

  auto* allocate = app.add_subcommand("allocate", "Allocate a rank budget across attachment points");
  add_config(allocate);
  allocate->add_option("-a,--activations", acts_path, "Activation dump (default <output_dir>/activations.cnta)");
  allocate->add_option("-o,--out", out_path, "Allocation report (default <output_dir>/allocation.json)");
  allocate->add_flag("--min-rank-one", min_rank_one, "Give every attachment point at least rank 1");

  auto* train_cmd = app.add_subcommand("train", "Fine-tune adapters on the toy task");
  add_config(train_cmd);
  train_cmd->add_option("-a,--adapters", adapters_path, "Adapter file (default <output_dir>/adapters.cntw)");

  auto* run = app.add_subcommand("run", "Full pipeline over every sweep entry");
  add_config(run);

  auto* report = app.add_subcommand("report", "Aggregate run summaries in a directory");
  report->add_option("-d,--dir", report_dir, "Directory holding per-run subdirectories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*report) return cmd_report(report_dir);
    CLI::App* sub = app.get_subcommands().front();
    const ExperimentConfig cfg = load_config(config_path, sub->remaining());
    if (*capture) return cmd_capture(cfg, out_path);
    if (*init) return cmd_init(cfg, acts_path, out_path);
    if (*allocate) return cmd_allocate(cfg, acts_path, out_path, min_rank_one);
    if (*train_cmd) return cmd_train(cfg, adapters_path);
    if (*run) return cmd_run(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::Diverged ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
