#include "xcot/sft.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "xcot/error.hpp"
#include "xcot/optim.hpp"
#include "xcot/util.hpp"

namespace xcot::sft {

void SftConfig::check() const {
  if (steps < 0) throw ConfigError("sft.steps must be >= 0");
  if (steps > 0 && steps <= warmup_steps) throw ConfigError("sft.steps must exceed warmup_steps");
  if (warmup_steps < 0) throw ConfigError("sft.warmup_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("sft.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("sft.learning_rate must be positive");
  if (!(final_lr_fraction >= 0 && final_lr_fraction <= 1)) {
    throw ConfigError("sft.final_lr_fraction must be in [0, 1]");
  }
  if (log_every < 1 || eval_every < 1) throw ConfigError("sft logging intervals must be >= 1");
  if (threads < 1) throw ConfigError("sft.threads must be >= 1");
}

nlohmann::json to_json(const SftConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"warmup_steps", c.warmup_steps},
          {"final_lr_fraction", c.final_lr_fraction},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"eval_every", c.eval_every},
          {"heldout_size", c.heldout_size},
          {"schedule", "cosine"},
          {"loss_masking", "trace-only"}};
}

double learning_rate_at(const SftConfig& c, long step) {
  if (step < c.warmup_steps) {
    return c.learning_rate * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const double span = static_cast<double>(std::max(1L, c.steps - c.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.learning_rate * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * cosine);
}

TokenSeq target_trace(const world::XCoTSample& sample, format::TraceStyle style) {
  return style == format::TraceStyle::kXCoT ? sample.trace()
                                            : format::serialize_direct(sample.result_image);
}

policy::ScoredSequence pack_example(const world::XCoTSample& sample, format::TraceStyle style) {
  policy::ScoredSequence seq;
  seq.tokens = world::conditioning_context(sample);
  seq.first_target = seq.tokens.size();
  auto trace = target_trace(sample, style);
  seq.tokens.insert(seq.tokens.end(), trace.begin(), trace.end());
  return seq;
}

CrossEntropy::CrossEntropy(std::span<const policy::ScoredSequence> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.num_targets();
  if (n == 0) throw EmptyMask("batch has no supervised positions");
  inv_count_ = 1.0 / static_cast<double>(n);
}

double CrossEntropy::evaluate(std::size_t, std::span<const double> logp,
                              std::span<double> dlogp) const {
  double sum = 0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    sum -= logp[i];
    dlogp[i] = -inv_count_;
  }
  return sum * inv_count_;
}

template <typename S>
double sft_loss(const policy::Params<S>& params, std::span<const policy::ScoredSequence> batch,
                unsigned threads) {
  CrossEntropy ce(batch);
  return policy::evaluate_objective(params, batch, ce, threads);
}

template double sft_loss(const policy::Params<float>&, std::span<const policy::ScoredSequence>,
                         unsigned);
template double sft_loss(const policy::Params<double>&, std::span<const policy::ScoredSequence>,
                         unsigned);

namespace {

/// Epoch-wise shuffled order; the permutation stream depends only on the seed.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(derive_seed(seed, 0x5f7)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }
  std::size_t next() {
    if (pos_ == order_.size()) {
      shuffle();
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng_.below(static_cast<std::uint32_t>(i))]);
    }
  }
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace

SftResult train_sft(const SftConfig& config, std::span<const world::XCoTSample> train,
                    std::span<const world::XCoTSample> heldout,
                    const policy::PolicyConfig& policy_config, const MetricsSink& sink) {
  config.check();
  if (train.empty()) throw EmptyDataset("SFT needs at least one training record");
  const auto style = policy_config.trace_style;

  auto params = policy::init(policy_config, config.seed);
  for (const auto& s : train.first(std::min<std::size_t>(train.size(), 1))) {
    if (pack_example(s, style).tokens.size() > policy_config.context_len) {
      throw ContextTooLong("training records do not fit context_len");
    }
  }

  std::vector<policy::ScoredSequence> heldout_batch;
  for (std::size_t i = 0; i < std::min(config.heldout_size, heldout.size()); ++i) {
    heldout_batch.push_back(pack_example(heldout[i], style));
  }
  auto heldout_loss = [&]() { return sft_loss(params, std::span<const policy::ScoredSequence>(heldout_batch), config.threads); };

  SftResult result{params, params, std::numeric_limits<double>::infinity(), 0};
  if (!heldout_batch.empty()) {
    result.best_heldout_loss = heldout_loss();
  }

  Adam adam(params.size());
  std::vector<float> grad(params.size());
  Sampler sampler(train.size(), config.seed);
  std::vector<policy::ScoredSequence> batch(config.batch_size);

  for (long step = 0; step < config.steps; ++step) {
    for (auto& b : batch) b = pack_example(train[sampler.next()], style);
    CrossEntropy ce(batch);
    const double loss = policy::backward(params, std::span<const policy::ScoredSequence>(batch), ce,
                                         std::span<float>(grad), config.threads);
    if (!std::isfinite(loss)) throw NonFiniteLoss("SFT loss is not finite", step);
    const double lr = learning_rate_at(config, step);
    const double gnorm = adam.step(params.values(), grad, lr);
    const long done = step + 1;

    const bool log = done % config.log_every == 0 || done == config.steps;
    const bool eval = !heldout_batch.empty() && (done % config.eval_every == 0 || done == config.steps);
    if (!log && !eval) continue;
    nlohmann::json line{{"step", done}, {"loss", loss}, {"lr", lr}, {"grad_norm", gnorm}};
    if (eval) {
      const double h = heldout_loss();
      line["heldout_loss"] = h;
      if (h < result.best_heldout_loss) {
        result.best_heldout_loss = h;
        result.best_params = params;
        result.best_step = done;
      }
    }
    if (sink) sink(line);
  }
  result.final_params = params;
  if (heldout_batch.empty()) {
    result.best_params = params;
    result.best_step = config.steps;
  }
  return result;
}

SftResult build_no_cot_baseline(const SftConfig& config, std::span<const world::XCoTSample> train,
                                std::span<const world::XCoTSample> heldout,
                                policy::PolicyConfig policy_config, const MetricsSink& sink) {
  policy_config.trace_style = format::TraceStyle::kDirect;
  return train_sft(config, train, heldout, policy_config, sink);
}

}  // namespace xcot::sft
