#include "xcot/pipeline.hpp"

#include <fstream>

#include "xcot/error.hpp"
#include "xcot/util.hpp"

namespace xcot::pipeline {

namespace {

void require_dir(const fs::path& dir) {
  if (dir.empty()) throw IoError("output directory not set");
  const auto parent = dir.parent_path();
  if (!parent.empty() && !fs::exists(parent)) {
    throw IoError("parent directory '" + parent.string() + "' does not exist");
  }
  fs::create_directories(dir);
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
  }
  void operator()(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    if (!out_) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  std::ofstream out_;
  fs::path path_;
};

nlohmann::json lineage_entry(const fs::path& manifest) {
  return {{"path", manifest.string()}, {"hash", hash_file(manifest)}};
}

}  // namespace

world::DatasetFiles gen_data(const config::RunConfig& cfg, const fs::path& out_dir, const Log& log) {
  cfg.check();
  world::DatasetConfig dc;
  dc.n_train = cfg.world.n_train;
  dc.n_eval = cfg.world.n_eval;
  dc.seed = cfg.world.seed;
  dc.out_dir = out_dir;
  auto files = world::build_dataset(dc);
  config::RunManifest m;
  m.command = "gen-data";
  m.config = config::to_json(cfg);
  m.add_output("train", files.train);
  m.add_output("eval", files.eval);
  m.add_output("train_manifest", files.train_manifest);
  m.add_output("eval_manifest", files.eval_manifest);
  config::write_json(out_dir / config::kManifestName, m.to_json());
  if (log) {
    log("train: " + std::to_string(dc.n_train) + " records, hash " + files.train_hash);
    log("eval: " + std::to_string(dc.n_eval) + " records, hash " + files.eval_hash);
  }
  return files;
}

world::Dataset load_verified_split(const fs::path& data_dir, world::Split split) {
  const auto name = std::string(world::split_name(split)) + ".manifest.json";
  config::verify_pinned(data_dir / name);
  return world::load_split(data_dir, split);
}

policy::Params<float> load_pinned_checkpoint(const fs::path& checkpoint) {
  config::verify_pinned(checkpoint);
  return policy::load_checkpoint(checkpoint);
}

SftOutputs train_sft(const config::RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                     bool baseline, const Log& log) {
  cfg.check();
  const auto train = load_verified_split(data_dir, world::Split::kTrain);
  const auto heldout = load_verified_split(data_dir, world::Split::kEval);
  require_dir(out_dir);
  SftOutputs out{out_dir / "sft.ckpt", out_dir / "final.ckpt", out_dir / "metrics.jsonl"};
  JsonlWriter metrics(out.metrics);
  const long every = std::max<long>(1, cfg.sft.log_every);
  auto sink = [&](const nlohmann::json& j) {
    metrics(j);
    if (log && (j.contains("heldout_loss") || j.at("step").get<long>() % (every * 10) == 0)) log(j.dump());
  };
  const auto held = std::span<const world::XCoTSample>(heldout.samples)
                        .first(std::min(cfg.sft.heldout_size, heldout.samples.size()));
  auto result = baseline ? sft::build_no_cot_baseline(cfg.sft, train.samples, held, cfg.policy, sink)
                         : sft::train_sft(cfg.sft, train.samples, held, cfg.policy, sink);
  policy::save_checkpoint(result.best_params, out.checkpoint);
  policy::save_checkpoint(result.final_params, out.final_checkpoint);

  config::RunManifest m;
  m.command = baseline ? "train-sft --baseline" : "train-sft";
  m.config = config::to_json(cfg);
  m.add_input("train", data_dir / "train.jsonl");
  m.add_input("eval", data_dir / "eval.jsonl");
  m.lineage.push_back(lineage_entry(data_dir / config::kManifestName));
  m.add_output("checkpoint", out.checkpoint);
  m.add_output("final_checkpoint", out.final_checkpoint);
  m.add_output("metrics", out.metrics);
  auto j = m.to_json();
  j["best_step"] = result.best_step;
  j["best_heldout_loss"] = result.best_heldout_loss;
  config::write_json(out_dir / config::kManifestName, j);
  return out;
}

GrpoOutputs train_grpo(const config::RunConfig& cfg, const fs::path& init_checkpoint,
                       const fs::path& out_dir, const fs::path& rollout_dump, const Log& log) {
  cfg.check();
  const auto init = load_pinned_checkpoint(init_checkpoint);
  require_dir(out_dir);
  GrpoOutputs out{out_dir / "grpo.ckpt", out_dir / "metrics.jsonl"};
  JsonlWriter metrics(out.metrics);
  auto sink = [&](const nlohmann::json& j) {
    metrics(j);
    if (log && j.at("step").get<long>() % 25 == 0) log(j.dump());
  };
  std::optional<JsonlWriter> dump;
  sft::MetricsSink rollout_sink;
  if (!rollout_dump.empty()) {
    dump.emplace(rollout_dump);
    rollout_sink = [&](const nlohmann::json& j) { (*dump)(j); };
  }
  auto result = grpo::train_grpo(init, cfg.grpo, cfg.rewards, sink, rollout_sink);
  policy::save_checkpoint(result.params, out.checkpoint);

  config::RunManifest m;
  m.command = "train-grpo";
  m.config = config::to_json(cfg);
  m.add_input("init_checkpoint", init_checkpoint);
  m.lineage.push_back(lineage_entry(init_checkpoint.parent_path() / config::kManifestName));
  m.add_output("checkpoint", out.checkpoint);
  m.add_output("metrics", out.metrics);
  config::write_json(out_dir / config::kManifestName, m.to_json());
  return out;
}

eval::EvalReport evaluate(const config::RunConfig& cfg, const fs::path& checkpoint,
                          const fs::path& report_path, const fs::path& data_dir) {
  cfg.check();
  const auto bench = eval::GridBench::build(cfg.eval.bench_seed);
  if (!data_dir.empty()) {
    const auto train = load_verified_split(data_dir, world::Split::kTrain);
    eval::check_zero_shot(bench, eval::manifest_combos(train.manifest));
    eval::check_zero_shot(bench, eval::observed_combos(train.samples));
  }
  eval::PolicySource source(load_pinned_checkpoint(checkpoint));
  auto report = eval::run_benchmark(source, bench, cfg.eval.decode, cfg.rewards);
  if (!report_path.empty()) config::write_json(report_path, eval::to_json(report));
  return report;
}

}  // namespace xcot::pipeline
