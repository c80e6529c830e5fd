#include <doctest.h>

#include <set>

#include "test_support.hpp"
#include "xcot/error.hpp"
#include "xcot/eval.hpp"

using namespace xcot;
using namespace xcot::eval;

namespace {

GridImage random_image(Rng& rng) {
  GridImage img;
  for (auto& c : img.cells) c = static_cast<std::uint8_t>(rng.below(8));
  return img;
}

Means means(double fidelity, double total) {
  Means m;
  m.subject_fidelity = fidelity;
  m.total_reward = total;
  return m;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("bench covers the held-out combos with every anchor and background") {
  const auto bench = GridBench::build(4242);
  REQUIRE(bench.cases().size() == 80);
  const auto combos = bench.combos();
  CHECK(combos.size() == 8);
  for (auto c : combos) CHECK(world::is_eval_combo(c));
  for (std::size_t c = 0; c < 8; ++c) {
    std::set<int> anchors, backgrounds;
    for (std::size_t p = 0; p < kPromptsPerCombo; ++p) {
      const auto& bc = bench.cases()[c * kPromptsPerCombo + p];
      CHECK(bc.index == c * kPromptsPerCombo + p);
      anchors.insert(bc.prompt.target_anchor.index);
      backgrounds.insert(bc.prompt.target_background);
      CHECK((bc.reference.anchor != bc.prompt.target_anchor ||
             bc.reference.background_color != bc.prompt.target_background));
      CHECK(bc.reference_image == world::render(bc.reference));
      CHECK(bc.context == world::conditioning_context(world::verbalize_prompt(bc.prompt), bc.reference_image));
    }
    CHECK(anchors.size() == 9);
    CHECK(backgrounds.size() == 4);
  }
}

TEST_CASE("bench regeneration is byte-identical") {
  const auto a = GridBench::build(4242), b = GridBench::build(4242), c = GridBench::build(7);
  CHECK(a.to_json().dump() == b.to_json().dump());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
}

TEST_CASE("zero-shot guard") {
  const auto bench = GridBench::build(1);
  const auto train = world::combos(world::Split::kTrain);
  CHECK_NOTHROW(check_zero_shot(bench, train));
  std::vector<world::Combo> leaked(train.begin(), train.end());
  leaked.push_back(world::combos(world::Split::kEval)[3]);
  CHECK_THROWS_AS(check_zero_shot(bench, leaked), ZeroShotViolation);

  testing::TempDir tmp;
  world::build_dataset({200, 20, 1, tmp / "data"});
  const auto split = world::load_split(tmp / "data", world::Split::kTrain);
  const auto listed = manifest_combos(split.manifest);
  CHECK(listed.size() == 56);
  CHECK_NOTHROW(check_zero_shot(bench, listed));
  const auto seen = observed_combos(split.samples);
  CHECK_FALSE(seen.empty());
  for (auto c : seen) CHECK_FALSE(world::is_eval_combo(c));
  CHECK_NOTHROW(check_zero_shot(bench, seen));
  const auto eval_split = world::load_split(tmp / "data", world::Split::kEval);
  CHECK_THROWS_AS(check_zero_shot(bench, observed_combos(eval_split.samples)), ZeroShotViolation);
}

TEST_CASE("metrics share the reward implementation") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const world::SceneSpec ref{static_cast<int>(rng.below(16)), static_cast<std::uint8_t>(4 + rng.below(4)),
                               static_cast<std::uint8_t>(rng.below(4)), world::Anchor{static_cast<int>(rng.below(9))}};
    const world::PromptSpec prompt{world::Anchor{static_cast<int>(rng.below(9))}, static_cast<std::uint8_t>(rng.below(4))};
    auto img = random_image(rng);
    if (i % 2) img = world::render(ref);
    CHECK(metric_subject_fidelity(img, ref) == rewards::reward_subject(img, ref));
    CHECK(metric_text_alignment(img, prompt, ref) == rewards::reward_text(img, prompt, ref));
  }
  const world::SceneSpec ref{2, 7, 0, world::kCenter};
  CHECK(metric_subject_fidelity(world::render(world::SceneSpec{2, 7, 3, world::Anchor{8}}), ref) == 1.0);
  CHECK(metric_subject_fidelity(GridImage::filled(1), ref) == 0.0);
  const world::PromptSpec prompt{world::Anchor{8}, 3};
  CHECK(metric_text_alignment(world::render(world::SceneSpec{2, 7, 3, world::Anchor{8}}), prompt, ref) == 1.0);
  CHECK(metric_text_alignment(world::render(world::SceneSpec{2, 7, 1, world::Anchor{8}}), prompt, ref) == 0.5);
}

TEST_CASE("image similarity examples") {
  Rng rng(2);
  const auto img = random_image(rng);
  CHECK(metric_image_similarity(img, img) == 1.0);
  auto other = img;
  for (auto& c : other.cells) c = static_cast<std::uint8_t>((c + 1) % 8);
  CHECK(metric_image_similarity(other, img) == 0.0);
  other = img;
  other.cells[17] = static_cast<std::uint8_t>((other.cells[17] + 3) % 8);
  CHECK(metric_image_similarity(other, img) == 63.0 / 64.0);
}

TEST_CASE("oracle replay scores perfectly on the reward metrics") {
  const auto bench = GridBench::build(4242);
  DecodeOptions opts;
  const auto report = run_benchmark(OracleSource{}, bench, opts);
  CHECK(report.means.subject_fidelity == 1.0);
  CHECK(report.means.text_alignment == 1.0);
  CHECK(report.means.format_valid == 1.0);
  CHECK(report.means.total_reward == 3.0);
  // similarity is to the reference image, which the edit deliberately changes
  double expected = 0;
  for (const auto& bc : bench.cases()) {
    const auto target = world::render({bc.reference.glyph_id, bc.reference.subject_color,
                                       bc.prompt.target_background, bc.prompt.target_anchor});
    int same = 0;
    for (int i = 0; i < 64; ++i) same += target.cells[static_cast<std::size_t>(i)] == bc.reference_image.cells[static_cast<std::size_t>(i)];
    expected += same / 64.0;
  }
  expected /= 80.0;
  CHECK(report.means.image_similarity == doctest::Approx(expected).epsilon(1e-12));
  CHECK(report.means.image_similarity < 1.0);
  CHECK(report.metadata["source"] == "oracle");
  CHECK(report.metadata["bench_hash"] == bench.hash());
}

TEST_CASE("means are exact averages of the cases") {
  policy::PolicyConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.init_scale = 0.5f;
  const PolicySource random_policy(policy::init(c, 3));
  const auto bench = GridBench::build(4242);
  DecodeOptions opts;
  opts.samples_per_case = 1;
  const auto report = run_benchmark(random_policy, bench, opts);
  double valid = 0, total = 0;
  for (const auto& cr : report.cases) {
    valid += cr.format_valid;
    total += cr.total_reward;
  }
  CHECK(report.means.format_valid == valid / 80.0);
  CHECK(report.means.total_reward == total / 80.0);
  CHECK(report.means.format_valid == 0.0);
  CHECK(report.means.subject_fidelity == 0.0);

  // determinism, including across thread counts
  const auto again = run_benchmark(random_policy, bench, opts);
  CHECK(to_json(again).dump() == to_json(report).dump());
  opts.threads = 2;
  const auto threaded = run_benchmark(random_policy, bench, opts);
  CHECK(to_json(threaded)["cases"] == to_json(report)["cases"]);
  CHECK(report.metadata["source"].get<std::string>().size() == 16);
  CHECK(report.metadata["decode"]["temperature"] == 0.8);
}

TEST_CASE("ablation table contract") {
  const auto single = build_table({{"sft_xcot", means(0.5, 2.0)}});
  CHECK(single.rows.size() == 1);
  CHECK(single.verdicts.empty());

  const auto table = build_table({{"base_no_cot", means(0.4, 1.8)},
                                  {"sft_xcot", means(0.6, 2.1)},
                                  {"grpo_full", means(0.9, 2.0)}});
  REQUIRE(table.rows.size() == 3);
  CHECK(table.rows[0].variant == "grpo_full");
  CHECK(table.rows[1].variant == "sft_xcot");
  CHECK(table.rows[2].variant == "base_no_cot");
  REQUIRE(table.verdicts.size() == 2);
  CHECK(table.verdicts[0].name == "grpo_full > sft_xcot on total_reward");
  CHECK_FALSE(table.verdicts[0].holds);
  CHECK(table.verdicts[0].left_value == 2.0);
  CHECK(table.verdicts[1].name == "sft_xcot > base_no_cot on subject_fidelity");
  CHECK(table.verdicts[1].holds);

  const auto text = format_table(table);
  CHECK(text.find("[fails] grpo_full > sft_xcot on total_reward") != std::string::npos);
  CHECK(text.find("[holds] sft_xcot > base_no_cot") != std::string::npos);
  CHECK(to_json(table)["rows"][0]["variant"] == "grpo_full");
  CHECK_THROWS_AS(metric_value(Means{}, "dino"), ConfigError);
}

TEST_CASE("ablation matrix over live sources") {
  policy::PolicyConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 1;
  const PolicySource weak(policy::init(c, 4));
  const OracleSource oracle;
  const std::vector<Variant> variants{{"sft_xcot", &weak}, {"grpo_full", &oracle}};
  DecodeOptions opts;
  opts.samples_per_case = 1;
  opts.max_new_tokens = 40;
  const auto table = run_ablation_matrix(variants, GridBench::build(4242), opts);
  REQUIRE(table.verdicts.size() == 1);
  CHECK(table.verdicts[0].holds);
  CHECK(table.rows[0].variant == "grpo_full");
  const std::vector<Variant> broken{{"x", nullptr}};
  CHECK_THROWS_AS(run_ablation_matrix(broken, GridBench::build(1), opts), Error);
}

}  // TEST_SUITE
