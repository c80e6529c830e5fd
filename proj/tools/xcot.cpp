// Command-line entry point for the grid-world X-CoT pipeline.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xcot/config.hpp"
#include "xcot/error.hpp"
#include "xcot/pipeline.hpp"
#include "xcot/util.hpp"

namespace {

namespace fs = std::filesystem;
using namespace xcot;

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitAssert = 3;

struct Common {
  std::string config_path;
  std::string profile;
  std::vector<std::string> overrides;
  unsigned threads = 1;
  bool quiet = false;

  config::RunConfig resolve() const {
    const fs::path p(config_path);
    auto cfg = config::resolve(config_path.empty() ? nullptr : &p, overrides, profile);
    cfg.set_threads(threads);
    return cfg;
  }
  pipeline::Log log() const {
    if (quiet) return {};
    return [](const std::string& line) { std::cerr << line << '\n'; };
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON run configuration");
  cmd->add_option("--profile", c.profile, "Preset: quick or paper-analog");
  cmd->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
  cmd->add_option("--threads", c.threads, "Worker threads (1 is bit-deterministic)")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
}

std::uint8_t parse_named(std::string_view what, const std::string& value,
                         std::span<const std::string_view> names, std::size_t offset = 0) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == value) return static_cast<std::uint8_t>(i + offset);
  }
  std::string allowed;
  for (auto n : names) allowed += (allowed.empty() ? "" : ", ") + std::string(n);
  throw CLI::ValidationError(std::string(what), "'" + value + "' is not one of: " + allowed);
}

struct SceneArgs {
  std::string subject = "cat";
  std::string color = "red";
  std::string background = "stone";
  std::string anchor = "center";

  void add(CLI::App* cmd) {
    cmd->add_option("--subject", subject, "Subject word (cat, dog, ...)");
    cmd->add_option("--color", color, "Subject color: red, orange, purple or white");
    cmd->add_option("--background", background, "Background: stone, sky, grass or sand");
    cmd->add_option("--anchor", anchor, "Anchor word (top-left ... bottom-right)");
  }

  world::SceneSpec scene() const {
    world::SceneSpec s;
    s.glyph_id = parse_named("--subject", subject, kSubjectWords);
    s.subject_color = parse_named("--color", color,
                                  std::span(kColorWords).subspan(world::kFirstSubjectColor),
                                  world::kFirstSubjectColor);
    s.background_color = parse_named("--background", background, kBackgroundWords);
    s.anchor = world::Anchor{parse_named("--anchor", anchor, kPositionWords)};
    s.check();
    return s;
  }
};

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Grid-world X-CoT generation with GRPO fine-tuning"};
  app.require_subcommand(1);

  Common common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Synthesize the train/eval dataset");
  add_common(gen, common);
  std::string out_dir;
  gen->add_option("--out", out_dir, "Dataset directory")->required();

  // train-sft
  auto* tsft = app.add_subcommand("train-sft", "Cold-start supervised training");
  add_common(tsft, common);
  std::string data_dir;
  bool baseline = false;
  tsft->add_option("--data", data_dir, "Dataset directory from gen-data")->required();
  tsft->add_option("--out", out_dir, "Run directory")->required();
  tsft->add_flag("--baseline", baseline, "Train the direct-generation baseline (no thinking block)");

  // train-grpo
  auto* tgrpo = app.add_subcommand("train-grpo", "Reinforcement fine-tuning with GRPO");
  add_common(tgrpo, common);
  std::string init_ckpt, rollout_dump;
  tgrpo->add_option("--init", init_ckpt, "Starting checkpoint (also the KL reference)")->required();
  tgrpo->add_option("--out", out_dir, "Run directory")->required();
  tgrpo->add_option("--dump-rollouts", rollout_dump, "Write every rollout to this JSONL file");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on the held-out bench");
  add_common(ev, common);
  std::string ckpt, report_path;
  bool oracle = false;
  ev->add_option("--ckpt", ckpt, "Checkpoint to evaluate");
  ev->add_flag("--oracle", oracle, "Replay the data engine's traces instead of a checkpoint");
  ev->add_option("--out", report_path, "Report JSON path")->required();
  ev->add_option("--data", data_dir, "Dataset directory; enables the zero-shot check");

  // ablation
  auto* abl = app.add_subcommand("ablation", "Compare variants on the bench");
  add_common(abl, common);
  std::vector<std::string> variants;
  std::string table_path;
  bool assert_mode = false;
  abl->add_option("--variant", variants, "name=checkpoint, repeatable")->required();
  abl->add_option("--out", report_path, "Comparison JSON path")->required();
  abl->add_option("--table", table_path, "Plain-text table path (default: stdout)");
  abl->add_option("--data", data_dir, "Dataset directory; enables the zero-shot check");
  abl->add_flag("--assert", assert_mode, "Exit non-zero if any directional verdict fails");

  // sample
  auto* smp = app.add_subcommand("sample", "Decode one trace and write its images");
  add_common(smp, common);
  std::string prompt_text;
  SceneArgs scene_args;
  std::uint64_t sample_seed = 1;
  double temperature = 0.8;
  bool grammar_mask = false;
  smp->add_option("--ckpt", ckpt, "Checkpoint")->required();
  smp->add_option("--prompt", prompt_text, "Prompt words, e.g. \"put the subject at top on sky\"")
      ->required();
  scene_args.add(smp);
  smp->add_option("--out", out_dir, "Output directory")->required();
  smp->add_option("--seed", sample_seed, "Sampling seed");
  smp->add_option("--temperature", temperature, "Decoding temperature (0 = greedy)");
  smp->add_flag("--grammar-mask", grammar_mask, "Restrict decoding to grammatical traces");

  // render
  auto* rnd = app.add_subcommand("render", "Render a scene or a dataset record as PPM");
  SceneArgs render_scene;
  render_scene.add(rnd);
  std::string ppm_path, split_name = "train";
  std::size_t record_index = 0;
  int scale = 16;
  bool from_data = false;
  rnd->add_option("--out", ppm_path, "PPM path")->required();
  rnd->add_option("--scale", scale, "Pixels per cell")->check(CLI::Range(1, 256));
  rnd->add_option("--data", data_dir, "Render record --index of a dataset (reference, focus, result)");
  rnd->add_option("--split", split_name, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  rnd->add_option("--index", record_index, "Record index");

  // vocab
  auto* voc = app.add_subcommand("vocab", "Print the unified vocabulary");

  // config
  auto* cfgcmd = app.add_subcommand("config", "Print the resolved configuration");
  add_common(cfgcmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }
  from_data = !data_dir.empty();

  try {
    if (gen->parsed()) {
      const auto cfg = common.resolve();
      const auto files = pipeline::gen_data(cfg, out_dir, common.log());
      std::cout << "train " << cfg.world.n_train << " " << files.train_hash << "\n"
                << "eval " << cfg.world.n_eval << " " << files.eval_hash << "\n";
    } else if (tsft->parsed()) {
      const auto out = pipeline::train_sft(common.resolve(), data_dir, out_dir, baseline, common.log());
      std::cout << out.checkpoint.string() << " " << hash_file(out.checkpoint) << "\n";
    } else if (tgrpo->parsed()) {
      const auto out = pipeline::train_grpo(common.resolve(), init_ckpt, out_dir, rollout_dump, common.log());
      std::cout << out.checkpoint.string() << " " << hash_file(out.checkpoint) << "\n";
    } else if (ev->parsed()) {
      const auto cfg = common.resolve();
      if (oracle == !ckpt.empty()) throw CLI::ValidationError("eval", "give exactly one of --ckpt or --oracle");
      eval::EvalReport report;
      if (oracle) {
        const auto bench = eval::GridBench::build(cfg.eval.bench_seed);
        report = eval::run_benchmark(eval::OracleSource{}, bench, cfg.eval.decode, cfg.rewards);
        config::write_json(report_path, eval::to_json(report));
      } else {
        report = pipeline::evaluate(cfg, ckpt, report_path, data_dir);
      }
      std::cout << eval::to_json(report)["means"].dump(2) << "\n";
    } else if (abl->parsed()) {
      const auto cfg = common.resolve();
      const auto bench = eval::GridBench::build(cfg.eval.bench_seed);
      if (from_data) {
        const auto train = pipeline::load_verified_split(data_dir, world::Split::kTrain);
        eval::check_zero_shot(bench, eval::manifest_combos(train.manifest));
        eval::check_zero_shot(bench, eval::observed_combos(train.samples));
      }
      std::vector<eval::AblationRow> rows;
      for (const auto& v : variants) {
        const auto eq = v.find('=');
        if (eq == std::string::npos || eq == 0) {
          throw CLI::ValidationError("--variant", "'" + v + "' is not name=checkpoint");
        }
        eval::PolicySource source(pipeline::load_pinned_checkpoint(v.substr(eq + 1)));
        rows.push_back({v.substr(0, eq), eval::run_benchmark(source, bench, cfg.eval.decode, cfg.rewards).means});
      }
      const auto table = eval::build_table(std::move(rows));
      config::write_json(report_path, eval::to_json(table));
      const auto text = eval::format_table(table);
      if (table_path.empty()) {
        std::cout << text;
      } else {
        config::write_text(table_path, text);
      }
      if (assert_mode) {
        for (const auto& v : table.verdicts) {
          if (!v.holds) {
            std::cerr << "verdict failed: " << v.name << "\n";
            return kExitAssert;
          }
        }
      }
    } else if (smp->parsed()) {
      const auto cfg = common.resolve();
      const auto params = pipeline::load_pinned_checkpoint(ckpt);
      const auto words = split_words(prompt_text);
      const auto prompt_tokens = vocab().encode_text(words);
      const auto prompt = world::parse_prompt(prompt_tokens);
      if (!prompt) throw CLI::ValidationError("--prompt", "expected \"put the subject at <position> on <background>\"");
      const auto scene = scene_args.scene();
      const auto reference = world::render(scene);
      policy::SampleOptions o;
      o.temperature = temperature;
      o.rng_seed = sample_seed;
      o.grammar_mask = grammar_mask;
      o.max_new_tokens = cfg.eval.decode.max_new_tokens;
      const auto result = policy::sample(params, world::conditioning_context(prompt_tokens, reference), o);
      const auto style = params.config().trace_style;
      std::cout << vocab().decode(result.tokens) << "\n";
      fs::create_directories(out_dir);
      std::vector<GridImage> strip{reference};
      if (format::validate(result.tokens, style).accepted) {
        if (style == format::TraceStyle::kXCoT) {
          const auto seg = format::parse(result.tokens);
          std::cout << "understanding: " << vocab().decode(seg.think_a()) << "\n"
                    << "plan: " << vocab().decode(seg.think_b()) << "\n";
          world::write_ppm(fs::path(out_dir) / "focus.ppm", std::span(&seg.focus_image(), 1), scale);
          strip.push_back(seg.focus_image());
        }
        const auto img = *format::result_image(result.tokens, style);
        world::write_ppm(fs::path(out_dir) / "result.ppm", std::span(&img, 1), scale);
        strip.push_back(img);
      } else {
        std::cout << "trace is not format-valid\n";
      }
      world::write_ppm(fs::path(out_dir) / "triptych.ppm", strip, scale);
      const auto breakdown = rewards::score_trace(result.tokens, scene, *prompt, cfg.rewards, style);
      std::cout << rewards::to_json(breakdown).dump() << "\n";
    } else if (rnd->parsed()) {
      if (from_data) {
        const auto split = split_name == "train" ? world::Split::kTrain : world::Split::kEval;
        const auto ds = pipeline::load_verified_split(data_dir, split);
        if (record_index >= ds.samples.size()) throw CLI::ValidationError("--index", "out of range");
        const auto& s = ds.samples[record_index];
        const std::vector<GridImage> imgs{s.reference_image, s.focus_image, s.result_image};
        world::write_ppm(ppm_path, imgs, scale);
        std::cout << vocab().decode(s.prompt_tokens) << "\n" << vocab().decode(s.trace()) << "\n";
      } else {
        const auto img = world::render(render_scene.scene());
        world::write_ppm(ppm_path, std::span(&img, 1), scale);
      }
    } else if (voc->parsed()) {
      std::cout << vocab().dump() << "hash " << vocab().hash() << "\n";
    } else if (cfgcmd->parsed()) {
      std::cout << config::to_json(common.resolve()).dump(2) << "\n";
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UnknownWord& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
