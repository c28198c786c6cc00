#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "diffcls/error.hpp"
#include "diffcls/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

namespace {

using namespace diffcls;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool seed_required) {
  cmd->add_option("-c,--config", opts.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", opts.overrides, "Override a config value, e.g. schedule.T=20");
  auto* seed = cmd->add_option("--seed", opts.seed, "Run seed");
  if (seed_required) seed->required();
  cmd->add_option("-o,--output-dir", opts.output_dir, "Output directory");
}

RunConfig resolve(const CommonOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_config(opts.config_path);
  for (const auto& o : opts.overrides) apply_override(cfg, o);
  if (opts.seed) cfg.seed = *opts.seed;
  if (!opts.output_dir.empty()) cfg.output_dir = opts.output_dir;
  cfg.validate();
  return cfg;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

int report_error(const std::string& kind, const std::string& message) {
  const nlohmann::json j = {{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << j.dump() << std::endl;
  return kind == "usage" ? 2 : 1;
}

nlohmann::json metrics_json(const MetricsReport& r) { return nlohmann::json::parse(to_json(r)); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based image classification in label space"};
  app.require_subcommand(1);

  CommonOptions gen_opts, guid_opts, diff_opts, abl_opts;

  auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic dataset");
  add_common(gen, gen_opts, false);
  std::string gen_out;
  gen->add_option("--out", gen_out, "Dataset file (a .json manifest is written beside it)")->required();

  auto* guid = app.add_subcommand("pretrain-guidance", "Train the guidance classifier");
  add_common(guid, guid_opts, true);

  auto* diff = app.add_subcommand("train-diffusion", "Train the label-space diffusion model");
  add_common(diff, diff_opts, true);
  std::string guidance_ckpt;
  diff->add_option("--guidance", guidance_ckpt, "Guidance checkpoint (default <output-dir>/guidance.ckpt)");

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a data split");
  std::string eval_ckpt, eval_split = "test", eval_out, eval_config;
  eval->add_option("checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("-o,--output-dir", eval_out, "Where the metrics files go");
  eval->add_option("-c,--config", eval_config, "Reject the checkpoint unless it matches this config")
      ->check(CLI::ExistingFile);

  auto* abl = app.add_subcommand("ablate", "Run the architecture/schedule/embedding grid and T sweep");
  add_common(abl, abl_opts, true);
  std::string abl_out;
  std::size_t abl_threads = 1;
  abl->add_option("--out", abl_out, "Results CSV (default <output-dir>/ablation.csv)");
  abl->add_option("-j,--threads", abl_threads, "Cells run in parallel (0: hardware threads)");

  auto* traj = app.add_subcommand("sample-trajectory", "Export reverse-chain states for one image");
  std::string traj_ckpt, traj_split = "test", traj_out;
  std::size_t traj_index = 0, traj_chains = 5;
  std::uint64_t traj_seed = 0;
  traj->add_option("checkpoint", traj_ckpt, "Diffusion checkpoint")->required()->check(CLI::ExistingFile);
  traj->add_option("--split", traj_split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  traj->add_option("--index", traj_index, "Image position within the split");
  traj->add_option("--chains", traj_chains, "Number of reverse chains")->check(CLI::PositiveNumber);
  traj->add_option("--seed", traj_seed, "Sampling seed");
  traj->add_option("--out", traj_out, "CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what());
  }

  try {
    if (gen->parsed()) {
      const Dataset data = cmd_gen_data(resolve(gen_opts), gen_out);
      print_json({{"dataset", gen_out}, {"samples", data.size()}, {"classes", data.classes}});
    } else if (guid->parsed()) {
      const RunConfig cfg = resolve(guid_opts);
      const GuidanceRun run = cmd_pretrain_guidance(cfg);
      save_config(cfg.output_dir / "config.json", cfg);
      print_json({{"checkpoint", run.checkpoint.string()},
                  {"config_hash", cfg.hash()},
                  {"epochs", run.log.epochs.size()},
                  {"test", metrics_json(run.test)}});
    } else if (diff->parsed()) {
      const RunConfig cfg = resolve(diff_opts);
      const std::filesystem::path g =
          guidance_ckpt.empty() ? cfg.output_dir / "guidance.ckpt" : std::filesystem::path(guidance_ckpt);
      const DiffusionRun run = cmd_train_diffusion(cfg, g);
      save_config(cfg.output_dir / "config.json", cfg);
      print_json({{"checkpoint", run.checkpoint.string()},
                  {"config_hash", cfg.hash()},
                  {"epochs", run.log.epochs.size()}});
    } else if (eval->parsed()) {
      std::optional<RunConfig> expected;
      if (!eval_config.empty()) expected = load_config(eval_config);
      const MetricsReport r =
          cmd_evaluate(eval_ckpt, eval_split, eval_out, expected ? &*expected : nullptr);
      nlohmann::json j = metrics_json(r);
      j["split"] = eval_split;
      print_json(j);
    } else if (abl->parsed()) {
      const RunConfig cfg = resolve(abl_opts);
      const std::filesystem::path out =
          abl_out.empty() ? cfg.output_dir / "ablation.csv" : std::filesystem::path(abl_out);
      const std::size_t threads =
          abl_threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : abl_threads;
      const auto rows = cmd_ablate(cfg, out, threads);
      std::size_t failed = 0;
      for (const auto& row : rows) failed += row.ok ? 0 : 1;
      print_json({{"results", out.string()}, {"cells", rows.size()}, {"failed", failed}});
    } else if (traj->parsed()) {
      const auto points =
          cmd_sample_trajectory(traj_ckpt, traj_split, traj_index, traj_chains, traj_seed, traj_out);
      print_json({{"trajectory", traj_out}, {"rows", points.size()}});
    }
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
  return 0;
}
