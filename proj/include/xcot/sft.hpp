#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "xcot/policy.hpp"
#include "xcot/world.hpp"

namespace xcot::sft {

struct SftConfig {
  long steps = 16000;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  long warmup_steps = 200;
  double final_lr_fraction = 0.1;  // cosine decays to this fraction of the peak
  std::uint64_t seed = 1;
  long log_every = 50;
  long eval_every = 500;
  std::size_t heldout_size = 64;  // held-out records scored at each eval
  unsigned threads = 1;

  void check() const;
};

nlohmann::json to_json(const SftConfig& c);

/// Learning rate after `step` completed updates: linear warmup, then cosine.
double learning_rate_at(const SftConfig& c, long step);

/// Packs a sample as context + trace; only trace tokens are scored.
policy::ScoredSequence pack_example(const world::XCoTSample& sample,
                                    format::TraceStyle style = format::TraceStyle::kXCoT);
/// The supervised trace for a style (full X-CoT or the direct baseline).
TokenSeq target_trace(const world::XCoTSample& sample, format::TraceStyle style);

/// Mean next-token cross-entropy over every scored token of the batch.
class CrossEntropy : public policy::SequenceObjective {
 public:
  explicit CrossEntropy(std::span<const policy::ScoredSequence> batch);
  double evaluate(std::size_t index, std::span<const double> logp,
                  std::span<double> dlogp) const override;

 private:
  double inv_count_;
};

template <typename S>
double sft_loss(const policy::Params<S>& params, std::span<const policy::ScoredSequence> batch,
                unsigned threads = 1);

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct SftResult {
  policy::Params<float> final_params;
  policy::Params<float> best_params;
  double best_heldout_loss = 0.0;
  long best_step = 0;
};

/// Cold-start supervised training. The policy is initialized from
/// (policy_config, config.seed); its trace_style picks X-CoT or direct targets.
SftResult train_sft(const SftConfig& config, std::span<const world::XCoTSample> train,
                    std::span<const world::XCoTSample> heldout,
                    const policy::PolicyConfig& policy_config, const MetricsSink& sink = {});

/// Same budget, thinking block removed: targets are IMG_BEGIN result IMG_END EOS.
SftResult build_no_cot_baseline(const SftConfig& config,
                                std::span<const world::XCoTSample> train,
                                std::span<const world::XCoTSample> heldout,
                                policy::PolicyConfig policy_config, const MetricsSink& sink = {});

}  // namespace xcot::sft
