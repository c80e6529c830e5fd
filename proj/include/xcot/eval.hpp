#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xcot/policy.hpp"
#include "xcot/rewards.hpp"
#include "xcot/world.hpp"

namespace xcot::eval {

inline constexpr std::size_t kPromptsPerCombo = 10;

struct BenchCase {
  std::size_t index = 0;
  world::SceneSpec reference;
  world::PromptSpec prompt;
  GridImage reference_image;
  TokenSeq context;
};

/// The fixed zero-shot suite: every held-out (glyph, color) combo with 10
/// prompts whose anchors and backgrounds cycle through all values.
class GridBench {
 public:
  static GridBench build(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::span<const BenchCase> cases() const { return cases_; }
  std::vector<world::Combo> combos() const;
  /// FNV-1a over the serialized suite.
  std::string hash() const;
  nlohmann::json to_json() const;

 private:
  std::uint64_t seed_ = 0;
  std::vector<BenchCase> cases_;
};

/// Combos that actually occur in a set of records.
std::vector<world::Combo> observed_combos(std::span<const world::XCoTSample> samples);

/// Throws ZeroShotViolation if any bench combo is in `train_combos`.
void check_zero_shot(const GridBench& bench, std::span<const world::Combo> train_combos);

/// Combos listed in a dataset manifest.
std::vector<world::Combo> manifest_combos(const nlohmann::json& manifest);

double metric_subject_fidelity(const GridImage& generated, const world::SceneSpec& reference);
double metric_image_similarity(const GridImage& generated, const GridImage& reference);
double metric_text_alignment(const GridImage& generated, const world::PromptSpec& prompt,
                             const world::SceneSpec& reference);

struct DecodeOptions {
  double temperature = 0.8;
  std::size_t samples_per_case = 4;
  std::size_t max_new_tokens = 192;
  bool grammar_mask = false;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

nlohmann::json to_json(const DecodeOptions& o);

/// Produces traces for a bench case.
class TraceSource {
 public:
  virtual ~TraceSource() = default;
  virtual format::TraceStyle style() const = 0;
  /// Stable identity recorded in reports (checkpoint hash for policies).
  virtual std::string identity() const = 0;
  virtual std::vector<TokenSeq> generate(const BenchCase& c, const DecodeOptions& options) const = 0;
};

class PolicySource : public TraceSource {
 public:
  explicit PolicySource(policy::Params<float> params);
  format::TraceStyle style() const override { return params_.config().trace_style; }
  std::string identity() const override { return identity_; }
  std::vector<TokenSeq> generate(const BenchCase& c, const DecodeOptions& options) const override;

 private:
  policy::Params<float> params_;
  std::string identity_;
};

/// Replays the data engine's own traces for each case.
class OracleSource : public TraceSource {
 public:
  format::TraceStyle style() const override { return format::TraceStyle::kXCoT; }
  std::string identity() const override { return "oracle"; }
  std::vector<TokenSeq> generate(const BenchCase& c, const DecodeOptions& options) const override;
};

/// Seed of sample `k` of case `index`.
std::uint64_t case_sample_seed(std::uint64_t seed, std::size_t index, std::size_t k);

struct CaseResult {
  std::size_t index = 0;
  double subject_fidelity = 0;
  double image_similarity = 0;
  double text_alignment = 0;
  double format_valid = 0;
  double total_reward = 0;
};

struct Means {
  double subject_fidelity = 0;
  double image_similarity = 0;
  double text_alignment = 0;
  double format_valid = 0;
  double total_reward = 0;
};

struct EvalReport {
  std::vector<CaseResult> cases;
  Means means;
  nlohmann::json metadata;
};

nlohmann::json to_json(const EvalReport& r);

/// Samples every case `samples_per_case` times and averages. Invalid traces
/// score 0 on the content metrics. Throws ZeroShotViolation if the bench
/// holds a training combo.
EvalReport run_benchmark(const TraceSource& source, const GridBench& bench,
                         const DecodeOptions& options, const rewards::RewardWeights& weights = {});

struct Verdict {
  std::string name;  // e.g. "grpo_full > sft_xcot on total_reward"
  std::string left, right, metric;
  double left_value = 0, right_value = 0;
  bool holds = false;
};

struct AblationRow {
  std::string variant;
  Means means;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // sorted by subject_fidelity, descending
  std::vector<Verdict> verdicts;
};

struct Variant {
  std::string name;
  const TraceSource* source = nullptr;
};

/// Directional comparisons evaluated when both variants are present.
struct Comparison {
  std::string left, right, metric;
};
std::span<const Comparison> standard_comparisons();

double metric_value(const Means& m, const std::string& metric);

AblationTable build_table(std::vector<AblationRow> rows,
                          std::span<const Comparison> comparisons = standard_comparisons());

AblationTable run_ablation_matrix(std::span<const Variant> variants, const GridBench& bench,
                                  const DecodeOptions& options,
                                  const rewards::RewardWeights& weights = {});

nlohmann::json to_json(const AblationTable& t);
/// Aligned plain-text rendering.
std::string format_table(const AblationTable& t);

}  // namespace xcot::eval
