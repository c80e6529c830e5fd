#include "xcot/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "parallel.hpp"
#include "xcot/error.hpp"
#include "xcot/format.hpp"
#include "xcot/util.hpp"

namespace xcot::eval {

GridBench GridBench::build(std::uint64_t seed) {
  GridBench bench;
  bench.seed_ = seed;
  const auto pool = world::combos(world::Split::kEval);
  for (std::size_t c = 0; c < pool.size(); ++c) {
    for (std::size_t p = 0; p < kPromptsPerCombo; ++p) {
      const std::size_t i = c * kPromptsPerCombo + p;
      BenchCase bc;
      bc.index = i;
      bc.prompt.target_anchor = world::Anchor{static_cast<int>(i % world::kNumAnchors)};
      bc.prompt.target_background = static_cast<std::uint8_t>(i % world::kNumBackgrounds);
      Rng rng(derive_seed(seed, 0xbe7c, i));
      bc.reference.glyph_id = pool[c].glyph_id;
      bc.reference.subject_color = pool[c].color;
      do {
        bc.reference.anchor = world::Anchor{static_cast<int>(rng.below(world::kNumAnchors))};
        bc.reference.background_color = static_cast<std::uint8_t>(rng.below(world::kNumBackgrounds));
      } while (bc.reference.anchor == bc.prompt.target_anchor &&
               bc.reference.background_color == bc.prompt.target_background);
      bc.reference_image = world::render(bc.reference);
      bc.context = world::conditioning_context(world::verbalize_prompt(bc.prompt), bc.reference_image);
      bench.cases_.push_back(std::move(bc));
    }
  }
  return bench;
}

std::vector<world::Combo> GridBench::combos() const {
  std::vector<world::Combo> out;
  for (const auto& c : cases_) {
    world::Combo k{c.reference.glyph_id, c.reference.subject_color};
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  return out;
}

nlohmann::json GridBench::to_json() const {
  auto cases = nlohmann::json::array();
  for (const auto& c : cases_) {
    cases.push_back({{"index", c.index},
                     {"glyph", c.reference.glyph_id},
                     {"color", c.reference.subject_color},
                     {"ref_background", c.reference.background_color},
                     {"ref_anchor", c.reference.anchor.index},
                     {"target_anchor", c.prompt.target_anchor.index},
                     {"target_background", c.prompt.target_background}});
  }
  return {{"seed", seed_}, {"cases", cases}};
}

std::string GridBench::hash() const { return hex64(fnv1a(to_json().dump())); }

std::vector<world::Combo> observed_combos(std::span<const world::XCoTSample> samples) {
  std::set<std::pair<int, int>> seen;
  for (const auto& s : samples) seen.insert({s.reference_scene.glyph_id, s.reference_scene.subject_color});
  std::vector<world::Combo> out;
  for (auto [g, c] : seen) out.push_back({g, static_cast<std::uint8_t>(c)});
  return out;
}

void check_zero_shot(const GridBench& bench, std::span<const world::Combo> train_combos) {
  for (const auto& c : bench.combos()) {
    if (std::find(train_combos.begin(), train_combos.end(), c) != train_combos.end()) {
      throw ZeroShotViolation("bench subject (glyph " + std::to_string(c.glyph_id) + ", color " +
                              std::to_string(c.color) + ") occurs in training data");
    }
  }
}

std::vector<world::Combo> manifest_combos(const nlohmann::json& manifest) {
  if (!manifest.contains("combos")) throw Error("manifest has no combos list");
  std::vector<world::Combo> out;
  for (const auto& c : manifest.at("combos")) {
    out.push_back({c.at(0).get<int>(), c.at(1).get<std::uint8_t>()});
  }
  return out;
}

double metric_subject_fidelity(const GridImage& generated, const world::SceneSpec& reference) {
  return rewards::reward_subject(generated, reference);
}

double metric_image_similarity(const GridImage& generated, const GridImage& reference) {
  int same = 0;
  for (std::size_t i = 0; i < generated.cells.size(); ++i) same += generated.cells[i] == reference.cells[i];
  return static_cast<double>(same) / static_cast<double>(kGridCells);
}

double metric_text_alignment(const GridImage& generated, const world::PromptSpec& prompt,
                             const world::SceneSpec& reference) {
  return rewards::reward_text(generated, prompt, reference);
}

nlohmann::json to_json(const DecodeOptions& o) {
  return {{"temperature", o.temperature},
          {"samples_per_case", o.samples_per_case},
          {"max_new_tokens", o.max_new_tokens},
          {"grammar_mask", o.grammar_mask},
          {"seed", o.seed}};
}

PolicySource::PolicySource(policy::Params<float> params)
    : params_(std::move(params)), identity_(hex64([&] {
        const auto bytes = policy::checkpoint_bytes(params_);
        Fnv1a h;
        h.update(std::span<const std::uint8_t>(bytes));
        return h.digest();
      }())) {}

std::uint64_t case_sample_seed(std::uint64_t seed, std::size_t index, std::size_t k) {
  return derive_seed(seed, 0xe7a1, index, k);
}

std::vector<TokenSeq> PolicySource::generate(const BenchCase& c, const DecodeOptions& options) const {
  std::vector<policy::SampleOptions> opts(options.samples_per_case);
  for (std::size_t k = 0; k < opts.size(); ++k) {
    opts[k].temperature = options.temperature;
    opts[k].max_new_tokens = options.max_new_tokens;
    opts[k].grammar_mask = options.grammar_mask;
    opts[k].rng_seed = case_sample_seed(options.seed, c.index, k);
  }
  auto results = policy::sample_batch(params_, c.context, opts);
  std::vector<TokenSeq> out;
  for (auto& r : results) out.push_back(std::move(r.tokens));
  return out;
}

std::vector<TokenSeq> OracleSource::generate(const BenchCase& c, const DecodeOptions& options) const {
  const auto trace = world::make_sample(c.reference, c.prompt, world::Split::kEval).trace();
  return std::vector<TokenSeq>(options.samples_per_case, trace);
}

namespace {

nlohmann::json means_json(const Means& m) {
  return {{"subject_fidelity", m.subject_fidelity},
          {"image_similarity", m.image_similarity},
          {"text_alignment", m.text_alignment},
          {"format_valid", m.format_valid},
          {"total_reward", m.total_reward}};
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  auto cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"index", c.index},
                     {"subject_fidelity", c.subject_fidelity},
                     {"image_similarity", c.image_similarity},
                     {"text_alignment", c.text_alignment},
                     {"format_valid", c.format_valid},
                     {"total_reward", c.total_reward}});
  }
  return {{"metadata", r.metadata}, {"means", means_json(r.means)}, {"cases", cases}};
}

EvalReport run_benchmark(const TraceSource& source, const GridBench& bench,
                         const DecodeOptions& options, const rewards::RewardWeights& weights) {
  if (options.samples_per_case == 0) throw ConfigError("samples_per_case must be >= 1");
  weights.check();
  for (const auto& c : bench.combos()) {
    if (!world::is_eval_combo(c)) throw ZeroShotViolation("bench holds a training-split subject");
  }
  const auto style = source.style();
  const auto cases = bench.cases();
  EvalReport report;
  report.cases.resize(cases.size());
  parallel_for(cases.size(), options.threads, [&](std::size_t i, unsigned) {
    const auto& bc = cases[i];
    const auto traces = source.generate(bc, options);
    CaseResult cr;
    cr.index = bc.index;
    for (const auto& t : traces) {
      const auto r = rewards::score_trace(t, bc.reference, bc.prompt, weights, style);
      cr.total_reward += r.total;
      if (!format::validate(t, style).accepted) continue;
      const auto img = *format::result_image(t, style);
      cr.format_valid += 1.0;
      cr.subject_fidelity += metric_subject_fidelity(img, bc.reference);
      cr.image_similarity += metric_image_similarity(img, bc.reference_image);
      cr.text_alignment += metric_text_alignment(img, bc.prompt, bc.reference);
    }
    const double n = static_cast<double>(traces.size());
    cr.format_valid /= n;
    cr.subject_fidelity /= n;
    cr.image_similarity /= n;
    cr.text_alignment /= n;
    cr.total_reward /= n;
    report.cases[i] = cr;
  });
  for (const auto& c : report.cases) {
    report.means.subject_fidelity += c.subject_fidelity;
    report.means.image_similarity += c.image_similarity;
    report.means.text_alignment += c.text_alignment;
    report.means.format_valid += c.format_valid;
    report.means.total_reward += c.total_reward;
  }
  const double n = static_cast<double>(report.cases.size());
  report.means.subject_fidelity /= n;
  report.means.image_similarity /= n;
  report.means.text_alignment /= n;
  report.means.format_valid /= n;
  report.means.total_reward /= n;
  report.metadata = {{"source", source.identity()},
                     {"trace_style", format::style_name(style)},
                     {"bench_seed", bench.seed()},
                     {"bench_hash", bench.hash()},
                     {"decode", to_json(options)},
                     {"reward_weights",
                      {{"format", weights.format},
                       {"subject", weights.subject},
                       {"text", weights.text},
                       {"gating", weights.gating}}}};
  return report;
}

std::span<const Comparison> standard_comparisons() {
  static const std::vector<Comparison> kList = {
      {"grpo_full", "sft_xcot", "total_reward"},
      {"sft_xcot", "base_no_cot", "subject_fidelity"},
      {"grpo_f_i", "grpo_f", "subject_fidelity"},
      {"grpo_f_t", "grpo_f", "text_alignment"},
  };
  return kList;
}

double metric_value(const Means& m, const std::string& metric) {
  if (metric == "subject_fidelity") return m.subject_fidelity;
  if (metric == "image_similarity") return m.image_similarity;
  if (metric == "text_alignment") return m.text_alignment;
  if (metric == "format_valid") return m.format_valid;
  if (metric == "total_reward") return m.total_reward;
  throw ConfigError("unknown metric '" + metric + "'");
}

AblationTable build_table(std::vector<AblationRow> rows, std::span<const Comparison> comparisons) {
  AblationTable table;
  auto find = [&](const std::string& name) -> const AblationRow* {
    for (const auto& r : rows) {
      if (r.variant == name) return &r;
    }
    return nullptr;
  };
  for (const auto& c : comparisons) {
    const auto* l = find(c.left);
    const auto* r = find(c.right);
    if (!l || !r) continue;
    Verdict v;
    v.left = c.left;
    v.right = c.right;
    v.metric = c.metric;
    v.name = c.left + " > " + c.right + " on " + c.metric;
    v.left_value = metric_value(l->means, c.metric);
    v.right_value = metric_value(r->means, c.metric);
    v.holds = v.left_value > v.right_value;
    table.verdicts.push_back(v);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    return a.means.subject_fidelity > b.means.subject_fidelity;
  });
  table.rows = std::move(rows);
  return table;
}

AblationTable run_ablation_matrix(std::span<const Variant> variants, const GridBench& bench,
                                  const DecodeOptions& options,
                                  const rewards::RewardWeights& weights) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    if (!v.source) throw Error("variant '" + v.name + "' has no trace source");
    rows.push_back({v.name, run_benchmark(*v.source, bench, options, weights).means});
  }
  return build_table(std::move(rows));
}

nlohmann::json to_json(const AblationTable& t) {
  auto rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    auto j = means_json(r.means);
    j["variant"] = r.variant;
    rows.push_back(j);
  }
  auto verdicts = nlohmann::json::array();
  for (const auto& v : t.verdicts) {
    verdicts.push_back({{"name", v.name},
                        {"left_value", v.left_value},
                        {"right_value", v.right_value},
                        {"holds", v.holds}});
  }
  return {{"rows", rows}, {"verdicts", verdicts}};
}

std::string format_table(const AblationTable& t) {
  std::size_t width = 7;
  for (const auto& r : t.rows) width = std::max(width, r.variant.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %9s  %9s  %9s  %9s  %9s\n", static_cast<int>(width),
                "variant", "fidelity", "img_sim", "text", "valid", "total");
  out << buf;
  for (const auto& r : t.rows) {
    const auto& m = r.means;
    std::snprintf(buf, sizeof buf, "%-*s  %9.4f  %9.4f  %9.4f  %9.4f  %9.4f\n",
                  static_cast<int>(width), r.variant.c_str(), m.subject_fidelity,
                  m.image_similarity, m.text_alignment, m.format_valid, m.total_reward);
    out << buf;
  }
  for (const auto& v : t.verdicts) {
    std::snprintf(buf, sizeof buf, "[%s] %s (%.4f vs %.4f)\n", v.holds ? "holds" : "fails",
                  v.name.c_str(), v.left_value, v.right_value);
    out << buf;
  }
  return out.str();
}

}  // namespace xcot::eval
