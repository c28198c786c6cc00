#include "diffcls/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "diffcls/error.hpp"
#include "json.hpp"

namespace diffcls {

using nlohmann::json;

namespace {

constexpr std::size_t kEvalChunk = 128;

std::vector<std::size_t> gather(const std::vector<std::size_t>& source,
                                std::span<const std::size_t> positions) {
  std::vector<std::size_t> out;
  out.reserve(positions.size());
  for (std::size_t p : positions) out.push_back(source[p]);
  return out;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

void ensure_dir(const std::filesystem::path& dir) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

std::string log_csv(const TrainLog& log, const std::string& hash) {
  std::string out = "config_hash," + TrainLog::csv_header() + "\n";
  for (const auto& r : log.epochs) out += hash + "," + TrainLog::csv_row(r) + "\n";
  return out;
}

StateList diffusion_state(GuidanceClassifier& guidance, EpsilonNetwork& net) {
  StateList out;
  for (auto& e : guidance.state()) {
    e.name = "guidance." + e.name;
    out.push_back(std::move(e));
  }
  for (auto& e : net.state()) out.push_back(std::move(e));
  return out;
}

TrainConfig stage_config(const TrainConfig& base, std::uint64_t seed) {
  TrainConfig t = base;
  t.seed = seed;
  t.log_path.clear();
  return t;
}

void check_compatible(const Dataset& data, const CheckpointInfo& info) {
  if (!(data.image == info.image) || data.classes != info.classes) {
    throw ConfigError("dataset does not match the checkpoint's image shape or class count");
  }
}

}  // namespace

// ---------------------------------------------------------------- building blocks

PreparedData prepare_data(const RunConfig& cfg) {
  cfg.validate();
  PreparedData out;
  if (cfg.data.source == "synthetic") {
    SyntheticSpec spec = cfg.data.synthetic;
    spec.seed = derive_seed(cfg.seed, SeedStream::Data);
    out.data = generate_synthetic(spec);
  } else {
    out.data = load_dataset(cfg.data.path);
  }
  if (cfg.data.positive_class >= out.data.classes) {
    throw ConfigError("data.positive_class is out of range for " +
                      std::to_string(out.data.classes) + " classes");
  }
  SplitSpec spec{cfg.data.train_frac, cfg.data.val_frac, cfg.data.test_frac,
                 derive_seed(cfg.seed, SeedStream::Split)};
  out.splits = split(out.data, spec);
  return out;
}

std::unique_ptr<GuidanceClassifier> build_guidance(const RunConfig& cfg, ImageShape image,
                                                   std::size_t classes) {
  Rng rng = make_rng(derive_seed(cfg.seed, SeedStream::GuidanceInit));
  return std::make_unique<GuidanceClassifier>(image, classes, cfg.guidance_backbone, rng);
}

std::unique_ptr<EpsilonNetwork> build_epsilon(const RunConfig& cfg, ImageShape image,
                                              std::size_t classes, std::uint64_t init_seed) {
  Rng rng = make_rng(init_seed);
  return std::make_unique<EpsilonNetwork>(image, classes, cfg.epsilon_config(), rng);
}

DiffusionSeeds diffusion_seeds(std::uint64_t seed) {
  return {derive_seed(seed, SeedStream::DiffusionInit), derive_seed(seed, SeedStream::DiffusionTrain),
          derive_seed(seed, SeedStream::Inference)};
}

const std::vector<std::size_t>& split_indices(const Splits& splits, const std::string& name) {
  if (name == "train") return splits.train;
  if (name == "val") return splits.val;
  if (name == "test") return splits.test;
  throw ConfigError("unknown split '" + name + "' (expected train|val|test)");
}

TrainLog train_guidance(GuidanceClassifier& model, const PreparedData& prepared,
                        const RunConfig& cfg) {
  const Dataset& data = prepared.data;
  const auto& train = prepared.splits.train;
  const auto& val = prepared.splits.val;
  const AugmentConfig aug = cfg.data.augmentation;
  const bool use_aug = cfg.data.augment;

  BatchFn batch_fn = [&](std::span<const std::size_t> batch, Rng& rng) {
    const auto idx = gather(train, batch);
    Tensor images = data.batch(idx);
    if (use_aug) images = augment_batch(images, rng, aug);
    const auto labels = data.labels_at(idx);
    const Tensor logits = model.logits(images, true);
    BatchResult r;
    r.loss = cross_entropy(logits, labels);
    const auto values = logits.data();
    const std::size_t c = data.classes;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (argmax_row(values.subspan(i * c, c)) == labels[i]) ++r.correct;
    }
    r.count = labels.size();
    return r;
  };
  EvalFn eval_fn = [&](int) {
    const MetricsReport m = evaluate_guidance(model, data, val, cfg.data.positive_class);
    return EvalResult{m.cross_entropy, m.accuracy, m.cross_entropy, m.mse};
  };
  return fit(model.parameters(), train.size(), batch_fn, val.empty() ? EvalFn{} : eval_fn,
             stage_config(cfg.guidance_train, derive_seed(cfg.seed, SeedStream::GuidanceTrain)));
}

TrainLog train_diffusion(EpsilonNetwork& net, GuidanceClassifier& guidance,
                         const PreparedData& prepared, const RunConfig& cfg,
                         std::uint64_t train_seed) {
  const Dataset& data = prepared.data;
  const auto& train = prepared.splits.train;
  const auto& val = prepared.splits.val;
  const Schedule schedule = cfg.schedule.build();
  const std::size_t c = data.classes;
  const AugmentConfig aug = cfg.data.augmentation;
  const bool use_aug = cfg.data.augment;

  auto targets = [c](const std::vector<std::size_t>& labels) {
    std::vector<double> z0(labels.size() * c, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) z0[i * c + labels[i]] = 1.0;
    return Tensor(Shape{labels.size(), c}, std::move(z0));
  };
  // One-step reconstruction of z0 from eps_hat, used as the accuracy proxy.
  auto reconstruct = [&](const LossOutput& out, const Tensor& g, const NoiseDraw& draw) {
    std::vector<Vec> rows;
    const auto zt = out.z_t.data();
    const auto gv = g.data();
    const auto eh = out.eps_hat.data();
    for (std::size_t i = 0; i < draw.t.size(); ++i) {
      rows.push_back(reconstruct_z0(schedule, zt.subspan(i * c, c), gv.subspan(i * c, c),
                                    eh.subspan(i * c, c), draw.t[i]));
    }
    return rows;
  };

  BatchFn batch_fn = [&](std::span<const std::size_t> batch, Rng& rng) {
    const auto idx = gather(train, batch);
    Tensor images = data.batch(idx);
    if (use_aug) images = augment_batch(images, rng, aug);
    const auto labels = data.labels_at(idx);
    const Tensor g = guidance.predict(images);
    const NoiseDraw draw = draw_noise(labels.size(), c, schedule, rng);
    const LossOutput out =
        noise_estimation_loss(network_predictor(net, images, true), schedule, targets(labels), g, draw);
    BatchResult r;
    r.loss = out.loss;
    const auto rows = reconstruct(out, g, draw);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (argmax_row(rows[i]) == labels[i]) ++r.correct;
    }
    r.count = labels.size();
    return r;
  };

  EvalFn eval_fn = [&](int) {
    NoGradGuard no_grad;
    Rng rng = make_rng(mix_seed(train_seed, 0xE7A1));
    double loss_sum = 0.0, ce_sum = 0.0, mse_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < val.size(); begin += kEvalChunk) {
      const std::size_t end = std::min(val.size(), begin + kEvalChunk);
      const std::vector<std::size_t> idx(val.begin() + static_cast<std::ptrdiff_t>(begin),
                                         val.begin() + static_cast<std::ptrdiff_t>(end));
      const Tensor images = data.batch(idx);
      const auto labels = data.labels_at(idx);
      const Tensor g = guidance.predict(images);
      const NoiseDraw draw = draw_noise(labels.size(), c, schedule, rng);
      const LossOutput out = noise_estimation_loss(network_predictor(net, images, false), schedule,
                                                   targets(labels), g, draw);
      loss_sum += out.loss.item() * static_cast<double>(labels.size());
      const auto rows = reconstruct(out, g, draw);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const Tensor p = softmax(Tensor(Shape{c}, rows[i]), 0);
        const auto pv = p.data();
        if (argmax_row(rows[i]) == labels[i]) ++correct;
        ce_sum -= std::log(std::max(pv[labels[i]], kProbabilityFloor));
        for (std::size_t k = 0; k < c; ++k) {
          const double d = pv[k] - (k == labels[i] ? 1.0 : 0.0);
          mse_sum += d * d / static_cast<double>(c);
        }
      }
    }
    const double n = static_cast<double>(val.size());
    return EvalResult{loss_sum / n, static_cast<double>(correct) / n, ce_sum / n, mse_sum / n};
  };

  return fit(net.parameters(), train.size(), batch_fn, val.empty() ? EvalFn{} : eval_fn,
             stage_config(cfg.diffusion_train, train_seed));
}

MetricsReport evaluate_guidance(GuidanceClassifier& model, const Dataset& data,
                                std::span<const std::size_t> indices, std::size_t positive_class) {
  if (indices.empty()) throw UsageError("evaluate: empty split");
  std::vector<std::size_t> preds;
  std::vector<double> probs;
  const std::size_t c = data.classes;
  for (std::size_t begin = 0; begin < indices.size(); begin += kEvalChunk) {
    const auto chunk = indices.subspan(begin, std::min(kEvalChunk, indices.size() - begin));
    const Tensor p = model.predict(data.batch(chunk));
    const auto pv = p.data();
    for (std::size_t i = 0; i < chunk.size(); ++i) preds.push_back(argmax_row(pv.subspan(i * c, c)));
    probs.insert(probs.end(), pv.begin(), pv.end());
  }
  const auto labels = data.labels_at(indices);
  return compute_metrics(preds, probs, labels, c, positive_class);
}

DiffusionEvaluation evaluate_diffusion(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                       const Schedule& schedule, const Dataset& data,
                                       std::span<const std::size_t> indices, std::size_t n_samples,
                                       std::uint64_t seed, std::size_t positive_class) {
  if (indices.empty()) throw UsageError("evaluate: empty split");
  NoGradGuard no_grad;
  DiffusionEvaluation out;
  std::vector<std::size_t> preds;
  std::vector<double> probs;
  for (std::size_t begin = 0; begin < indices.size(); begin += kEvalChunk) {
    const auto chunk = indices.subspan(begin, std::min(kEvalChunk, indices.size() - begin));
    auto batch = predict(net, guidance, schedule, data.batch(chunk), n_samples, seed, begin);
    for (auto& p : batch) {
      preds.push_back(p.label);
      probs.insert(probs.end(), p.probs.begin(), p.probs.end());
      out.predictions.push_back(std::move(p));
    }
  }
  const auto labels = data.labels_at(indices);
  out.report = compute_metrics(preds, probs, labels, data.classes, positive_class);
  return out;
}

// ---------------------------------------------------------------- commands

Dataset cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out) {
  Dataset data = prepare_data(cfg).data;
  ensure_dir(out.parent_path());
  save_dataset(out, data);
  return data;
}

GuidanceRun cmd_pretrain_guidance(const RunConfig& cfg) {
  const PreparedData prepared = prepare_data(cfg);
  auto model = build_guidance(cfg, prepared.data.image, prepared.data.classes);
  GuidanceRun run;
  run.log = train_guidance(*model, prepared, cfg);
  StateList state = model->state();
  quantize_state(state);

  ensure_dir(cfg.output_dir);
  run.checkpoint = cfg.output_dir / "guidance.ckpt";
  CheckpointInfo info;
  info.kind = CheckpointKind::Guidance;
  info.config = cfg;
  info.config_hash = cfg.hash();
  info.guidance_hash = cfg.guidance_hash();
  info.image = prepared.data.image;
  info.classes = prepared.data.classes;
  info.class_names = prepared.data.class_names;
  save_checkpoint(run.checkpoint, info, state);
  write_text(cfg.output_dir / "guidance_log.csv", log_csv(run.log, info.config_hash));
  run.test = evaluate_guidance(*model, prepared.data, prepared.splits.test, cfg.data.positive_class);
  return run;
}

DiffusionRun cmd_train_diffusion(const RunConfig& cfg, const std::filesystem::path& guidance_ckpt) {
  const CheckpointInfo ginfo = read_checkpoint_info(guidance_ckpt);
  if (ginfo.kind != CheckpointKind::Guidance) {
    throw ConfigError(guidance_ckpt.string() + " is not a guidance checkpoint");
  }
  if (ginfo.guidance_hash != cfg.guidance_hash()) {
    throw ConfigError("guidance checkpoint " + guidance_ckpt.string() + " (guidance hash " +
                      ginfo.guidance_hash + ") was trained for a different configuration (" +
                      cfg.guidance_hash() + ")");
  }
  const PreparedData prepared = prepare_data(cfg);
  check_compatible(prepared.data, ginfo);
  auto guidance = build_guidance(cfg, ginfo.image, ginfo.classes);
  StateList gstate = guidance->state();
  load_checkpoint_state(guidance_ckpt, gstate);

  const DiffusionSeeds seeds = diffusion_seeds(cfg.seed);
  auto net = build_epsilon(cfg, ginfo.image, ginfo.classes, seeds.init);
  DiffusionRun run;
  run.log = train_diffusion(*net, *guidance, prepared, cfg, seeds.train);
  StateList state = diffusion_state(*guidance, *net);
  quantize_state(state);

  ensure_dir(cfg.output_dir);
  run.checkpoint = cfg.output_dir / "diffusion.ckpt";
  CheckpointInfo info = ginfo;
  info.kind = CheckpointKind::Diffusion;
  info.config = cfg;
  info.config_hash = cfg.hash();
  info.guidance_hash = cfg.guidance_hash();
  save_checkpoint(run.checkpoint, info, state);
  write_text(cfg.output_dir / "diffusion_log.csv", log_csv(run.log, info.config_hash));
  return run;
}

namespace {

struct LoadedModels {
  CheckpointInfo info;
  std::unique_ptr<GuidanceClassifier> guidance;
  std::unique_ptr<EpsilonNetwork> net;
};

LoadedModels load_models(const std::filesystem::path& checkpoint) {
  LoadedModels m;
  m.info = read_checkpoint_info(checkpoint);
  const RunConfig& cfg = m.info.config;
  m.guidance = build_guidance(cfg, m.info.image, m.info.classes);
  if (m.info.kind == CheckpointKind::Guidance) {
    StateList state = m.guidance->state();
    load_checkpoint_state(checkpoint, state);
  } else {
    m.net = build_epsilon(cfg, m.info.image, m.info.classes, diffusion_seeds(cfg.seed).init);
    StateList state = diffusion_state(*m.guidance, *m.net);
    load_checkpoint_state(checkpoint, state);
  }
  return m;
}

}  // namespace

MetricsReport cmd_evaluate(const std::filesystem::path& checkpoint, const std::string& split,
                           const std::filesystem::path& out_dir, const RunConfig* expected) {
  LoadedModels m = load_models(checkpoint);
  if (expected != nullptr && expected->hash() != m.info.config_hash) {
    throw ConfigError("config hash " + expected->hash() + " does not match checkpoint " +
                      checkpoint.string() + " (" + m.info.config_hash + ")");
  }
  const RunConfig& cfg = m.info.config;
  const PreparedData prepared = prepare_data(cfg);
  check_compatible(prepared.data, m.info);
  const auto& indices = split_indices(prepared.splits, split);

  MetricsReport report;
  if (m.net) {
    report = evaluate_diffusion(*m.net, *m.guidance, cfg.schedule.build(), prepared.data, indices,
                                cfg.inference.n_samples, diffusion_seeds(cfg.seed).inference,
                                cfg.data.positive_class)
                 .report;
  } else {
    report = evaluate_guidance(*m.guidance, prepared.data, indices, cfg.data.positive_class);
  }

  const std::filesystem::path dir = out_dir.empty() ? checkpoint.parent_path() : out_dir;
  const std::string stem = "metrics_" + to_string(m.info.kind) + "_" + split;
  json j = json::parse(to_json(report));
  j["config_hash"] = m.info.config_hash;
  j["checkpoint"] = checkpoint.string();
  j["model"] = to_string(m.info.kind);
  j["split"] = split;
  j["variant"] = cfg.variant_name();
  write_text(dir / (stem + ".json"), j.dump(2) + "\n");
  write_text(dir / (stem + ".csv"), "config_hash,model,split," + metrics_csv_header() + "\n" +
                                        m.info.config_hash + "," + to_string(m.info.kind) + "," +
                                        split + "," + metrics_csv_row(report) + "\n");
  return report;
}

std::vector<TrajectoryPoint> cmd_sample_trajectory(const std::filesystem::path& checkpoint,
                                                   const std::string& split, std::size_t index,
                                                   std::size_t n_chains, std::uint64_t seed,
                                                   const std::filesystem::path& out_csv) {
  LoadedModels m = load_models(checkpoint);
  if (!m.net) throw UsageError("sample-trajectory needs a diffusion checkpoint");
  const RunConfig& cfg = m.info.config;
  const PreparedData prepared = prepare_data(cfg);
  check_compatible(prepared.data, m.info);
  const auto& indices = split_indices(prepared.splits, split);
  if (index >= indices.size()) {
    throw UsageError("index " + std::to_string(index) + " is out of range for the " + split +
                     " split of " + std::to_string(indices.size()) + " images");
  }
  const auto points = sample_trajectory(*m.net, *m.guidance, cfg.schedule.build(),
                                        prepared.data.image_at(indices[index]), n_chains, seed);
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << "chain,t";
  for (std::size_t k = 0; k < m.info.classes; ++k) os << ",z" << k;
  os << '\n';
  for (const auto& p : points) {
    os << p.chain << ',' << p.t;
    for (double v : p.z) os << ',' << v;
    os << '\n';
  }
  if (!out_csv.empty()) write_text(out_csv, os.str());
  return points;
}

// ---------------------------------------------------------------- ablation

std::vector<AblationCell> ablation_cells(const RunConfig& base) {
  std::vector<AblationCell> cells;
  for (EncoderKind arch : {EncoderKind::Linear, EncoderKind::Attention}) {
    for (ScheduleKind sched : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
      for (EmbeddingKind emb : {EmbeddingKind::Learnable, EmbeddingKind::Sinusoidal}) {
        RunConfig c = base;
        c.encoder.kind = arch;
        c.schedule.kind = sched;
        c.embedding.kind = emb;
        cells.push_back({"grid", c.variant_name(), c});
      }
    }
  }
  for (int steps : {10, 20, 30}) {
    RunConfig c = base;
    c.encoder.kind = EncoderKind::Linear;
    c.schedule.kind = ScheduleKind::Cosine;
    c.embedding.kind = EmbeddingKind::Learnable;
    c.schedule.steps = steps;
    cells.push_back({"timesteps", c.variant_name(), c});
  }
  return cells;
}

std::string ablation_csv_header() {
  return "group,variant,architecture,schedule,embedding,T,accuracy,precision,recall,f1,"
         "cross_entropy,mse,config_hash,status";
}

std::string ablation_csv_row(const AblationRow& row) {
  const RunConfig& c = row.cell.config;
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << row.cell.group << ',' << row.cell.variant << ',' << to_string(c.encoder.kind) << ','
     << to_string(c.schedule.kind) << ',' << to_string(c.embedding.kind) << ','
     << c.schedule.steps << ',';
  if (row.ok) {
    const MetricsReport& m = row.metrics;
    os << m.accuracy << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ','
       << m.cross_entropy << ',' << m.mse;
  } else {
    os << ",,,,,";
  }
  std::string status = row.ok ? "ok" : "error: " + row.error;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  os << ',' << c.hash() << ',' << status;
  return os.str();
}

std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::filesystem::path& out_csv,
                                    std::size_t threads) {
  const PreparedData prepared = prepare_data(base);
  auto guidance = build_guidance(base, prepared.data.image, prepared.data.classes);
  train_guidance(*guidance, prepared, base);
  {
    StateList state = guidance->state();
    quantize_state(state);
  }

  const auto cells = ablation_cells(base);
  std::vector<AblationRow> rows(cells.size());
  auto run_cell = [&](std::size_t i) {
    AblationRow& row = rows[i];
    row.cell = cells[i];
    try {
      const RunConfig& cfg = row.cell.config;
      cfg.validate();
      const DiffusionSeeds seeds = diffusion_seeds(cfg.seed);
      auto net = build_epsilon(cfg, prepared.data.image, prepared.data.classes, seeds.init);
      train_diffusion(*net, *guidance, prepared, cfg, seeds.train);
      StateList state = net->state();
      quantize_state(state);
      row.metrics = evaluate_diffusion(*net, *guidance, cfg.schedule.build(), prepared.data,
                                       prepared.splits.test, cfg.inference.n_samples,
                                       seeds.inference, cfg.data.positive_class)
                        .report;
      row.ok = true;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, cells.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    }
  }

  if (!out_csv.empty()) {
    std::string text = ablation_csv_header() + "\n";
    for (const auto& row : rows) text += ablation_csv_row(row) + "\n";
    write_text(out_csv, text);
  }
  return rows;
}

}  // namespace diffcls
