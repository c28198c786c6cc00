#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"

#include "diffcls/error.hpp"
#include "diffcls/pipeline.hpp"

using namespace diffcls;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("diffcls_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

RunConfig small_config(const std::filesystem::path& dir) {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.output_dir = dir;
  cfg.data.synthetic.n_per_class = 20;
  cfg.data.synthetic.image_size = 8;
  cfg.embedding.dim = 16;
  cfg.encoder.hidden = 16;
  cfg.encoder.attention_dim = 8;
  cfg.encoder.heads = 2;
  cfg.guidance_backbone.hidden = 16;
  cfg.guidance_train.epochs = 2;
  cfg.diffusion_train.epochs = 1;
  cfg.inference.n_samples = 2;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("ablation cells") {
  const auto cells = ablation_cells(RunConfig{});
  REQUIRE(cells.size() == 11);
  std::set<std::string> grid;
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(cells[i].group == "grid");
    CHECK(cells[i].config.schedule.steps == 10);
    grid.insert(cells[i].variant);
  }
  CHECK(grid.size() == 8);
  CHECK(grid.count("Lin-Cos-Lin") == 1);
  CHECK(grid.count("Att-Lin-Sin") == 1);
  for (std::size_t i = 8; i < 11; ++i) {
    CHECK(cells[i].group == "timesteps");
    CHECK(cells[i].variant == "Lin-Cos-Lin");
  }
  CHECK(cells[8].config.schedule.steps == 10);
  CHECK(cells[9].config.schedule.steps == 20);
  CHECK(cells[10].config.schedule.steps == 30);
}

TEST_CASE("train, reload and evaluate") {
  const auto dir = temp_dir("pipeline");
  const RunConfig cfg = small_config(dir);
  const GuidanceRun g = cmd_pretrain_guidance(cfg);
  CHECK(std::filesystem::exists(g.checkpoint));
  CHECK(g.log.epochs.size() == 2);
  const DiffusionRun d = cmd_train_diffusion(cfg, g.checkpoint);
  CHECK(std::filesystem::exists(d.checkpoint));
  CHECK(std::filesystem::exists(dir / "diffusion_log.csv"));

  const MetricsReport first = cmd_evaluate(d.checkpoint, "test", dir / "eval1", &cfg);
  const MetricsReport second = cmd_evaluate(d.checkpoint, "test", dir / "eval2");
  CHECK(first.accuracy == second.accuracy);
  CHECK(first.cross_entropy == second.cross_entropy);
  CHECK(first.mse == second.mse);
  CHECK(first.samples == 4);
  bool wrote = false;
  for (const auto& e : std::filesystem::directory_iterator(dir / "eval1"))
    wrote = wrote || e.path().extension() == ".json";
  CHECK(wrote);

  RunConfig other = cfg;
  other.schedule.steps = 20;
  CHECK_THROWS_AS(cmd_evaluate(d.checkpoint, "test", dir / "eval3", &other), ConfigError);
  CHECK_THROWS_AS(cmd_evaluate(d.checkpoint, "holdout", dir / "eval3"), ConfigError);

  RunConfig changed = cfg;
  changed.guidance_train.epochs = 3;
  CHECK_THROWS_AS(cmd_train_diffusion(changed, g.checkpoint), ConfigError);
  CHECK_THROWS_AS(cmd_train_diffusion(cfg, d.checkpoint), ConfigError);

  const auto traj = cmd_sample_trajectory(d.checkpoint, "test", 0, 2, 5, dir / "traj.csv");
  CHECK(traj.size() == 2 * 11);
  const std::string csv = slurp(dir / "traj.csv");
  CHECK(csv.rfind("chain,t,z0,z1\n", 0) == 0);
  const auto again = cmd_sample_trajectory(d.checkpoint, "test", 0, 2, 5, dir / "traj2.csv");
  CHECK(slurp(dir / "traj2.csv") == csv);
}

TEST_CASE("ablation smoke run is complete and deterministic") {
  const auto dir = temp_dir("ablate");
  RunConfig cfg = small_config(dir);
  cfg.guidance_train.epochs = 1;
  const auto rows = cmd_ablate(cfg, dir / "a.csv", 4);
  REQUIRE(rows.size() == 11);
  for (const auto& r : rows) {
    CHECK_MESSAGE(r.ok, r.error);
    CHECK(r.metrics.samples == 4);
  }
  const std::string csv = slurp(dir / "a.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == ablation_csv_header());
  int n = 0;
  while (std::getline(lines, line)) {
    ++n;
    CHECK(line.find(",ok") != std::string::npos);
  }
  CHECK(n == 11);
  cmd_ablate(cfg, dir / "b.csv", 1);
  CHECK(slurp(dir / "b.csv") == csv);

  // Same config, same numbers: the repeated T = 10 cell and a standalone run.
  CHECK(rows[2].cell.config.hash() == rows[8].cell.config.hash());
  CHECK(rows[2].metrics.cross_entropy == rows[8].metrics.cross_entropy);
  const RunConfig solo = rows[2].cell.config;
  const GuidanceRun g = cmd_pretrain_guidance(solo);
  const DiffusionRun d = cmd_train_diffusion(solo, g.checkpoint);
  const MetricsReport r = cmd_evaluate(d.checkpoint, "test", dir / "solo");
  CHECK(r.accuracy == rows[2].metrics.accuracy);
  CHECK(r.cross_entropy == rows[2].metrics.cross_entropy);
  CHECK(r.mse == rows[2].metrics.mse);
}

TEST_CASE("data preparation") {
  const auto dir = temp_dir("prep");
  RunConfig cfg = small_config(dir);
  const PreparedData p = prepare_data(cfg);
  CHECK(p.data.size() == 40);
  CHECK(p.splits.train.size() == 32);
  CHECK(split_indices(p.splits, "val").size() == 4);
  CHECK_THROWS_AS(split_indices(p.splits, "everything"), ConfigError);
  const Dataset written = cmd_gen_data(cfg, dir / "d.dset");
  cfg.data.source = "file";
  cfg.data.path = dir / "d.dset";
  const PreparedData loaded = prepare_data(cfg);
  CHECK(loaded.data.labels == written.labels);
  CHECK(loaded.splits.test == p.splits.test);
  cfg.data.path = dir / "none.dset";
  CHECK_THROWS_AS(prepare_data(cfg), FormatError);
}
