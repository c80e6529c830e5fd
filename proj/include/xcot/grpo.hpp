#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "xcot/policy.hpp"
#include "xcot/rewards.hpp"
#include "xcot/sft.hpp"
#include "xcot/world.hpp"

namespace xcot::grpo {

struct GrpoConfig {
  long steps = 500;
  std::size_t group_size = 8;
  std::size_t prompts_per_step = 4;
  double rollout_temperature = 1.0;
  double clip_epsilon = 0.2;
  double kl_beta = 0.01;
  double advantage_epsilon = 1e-6;
  double learning_rate = 1e-5;
  std::size_t max_new_tokens = 192;
  /// Replace totals by their within-group ranks before normalizing (experiment flag).
  bool rank_rewards = false;
  std::uint64_t seed = 1;
  unsigned threads = 1;

  void check() const;
};

nlohmann::json to_json(const GrpoConfig& c);

struct GroupRollout {
  TokenSeq context;
  world::SceneSpec reference;
  world::PromptSpec prompt;
  std::vector<std::uint64_t> member_seeds;
  std::vector<TokenSeq> traces;
  std::vector<std::vector<double>> old_log_probs;  // from the sampling snapshot
  std::vector<rewards::RewardBreakdown> rewards;   // filled by score_group
  std::vector<double> advantages;                  // filled by score_group

  std::size_t size() const { return traces.size(); }
};

/// hash(seed, step, input_index, member_index)
std::uint64_t member_seed(std::uint64_t seed, long step, std::size_t input_index,
                          std::size_t member_index);

/// G rollouts from one conditioning context; rewards left empty.
GroupRollout sample_group(const policy::Params<float>& snapshot, const world::XCoTSample& input,
                          std::size_t group_size, const policy::SampleOptions& options,
                          std::uint64_t seed, long step, std::size_t input_index);

/// A_i = (r_i - mean) / (population std + eps)
std::vector<double> compute_advantages(std::span<const double> totals, double eps);

/// Average ranks (1-based, ties share the mean rank).
std::vector<double> rank_transform(std::span<const double> totals);

void score_group(GroupRollout& rollout, const rewards::RewardWeights& weights,
                 format::TraceStyle style, const GrpoConfig& config);

struct TokenStats {
  double kl_sum = 0;         // sum of k3 over tokens
  std::size_t tokens = 0;
  std::size_t clipped = 0;   // tokens whose clipped branch is active
  double max_ratio_dev = 0;  // max |rho - 1|
};

/// Clipped-surrogate + k3-KL objective over one or more groups. Every
/// sequence carries weight 1 / (groups * G) so that the value is the mean
/// of the per-group losses.
class GrpoObjective : public policy::SequenceObjective {
 public:
  GrpoObjective(std::span<const GroupRollout> groups,
                std::span<const std::vector<double>> ref_log_probs, const GrpoConfig& config);

  double evaluate(std::size_t index, std::span<const double> logp,
                  std::span<double> dlogp) const override;

  TokenStats stats() const;

 private:
  struct Item {
    const std::vector<double>* old_lp;
    const std::vector<double>* ref_lp;
    double advantage;
  };
  std::vector<Item> items_;
  double weight_;
  double clip_;
  double beta_;
  mutable std::vector<TokenStats> stats_;
};

/// Scored sequences (context + trace) for every member of the groups, in order.
std::vector<policy::ScoredSequence> rollout_sequences(std::span<const GroupRollout> groups);

/// The per-group loss; `grad` (optional) receives dLoss/dParams.
template <typename S>
double grpo_loss(const policy::Params<S>& params, const GroupRollout& rollout,
                 const policy::Params<S>& ref_params, const GrpoConfig& config,
                 std::span<S> grad = {});

struct GrpoResult {
  policy::Params<float> params;
  double last_max_ratio_dev = 0.0;
};

/// Fine-tunes `init` (also the frozen reference) with fresh train-split inputs.
GrpoResult train_grpo(const policy::Params<float>& init, const GrpoConfig& config,
                      const rewards::RewardWeights& weights,
                      const sft::MetricsSink& sink = {}, const sft::MetricsSink& rollout_sink = {});

}  // namespace xcot::grpo
