#include "xcot/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "parallel.hpp"
#include "xcot/error.hpp"
#include "xcot/optim.hpp"
#include "xcot/util.hpp"

namespace xcot::grpo {

void GrpoConfig::check() const {
  if (steps < 0) throw ConfigError("grpo.steps must be >= 0");
  if (group_size < 2) throw ConfigError("grpo.group_size must be >= 2");
  if (prompts_per_step < 1) throw ConfigError("grpo.prompts_per_step must be >= 1");
  for (double v : {rollout_temperature, clip_epsilon, kl_beta, advantage_epsilon, learning_rate}) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError("grpo rates must be positive and finite");
  }
  if (max_new_tokens < 1) throw ConfigError("grpo.max_new_tokens must be >= 1");
  if (threads < 1) throw ConfigError("grpo.threads must be >= 1");
}

nlohmann::json to_json(const GrpoConfig& c) {
  return {{"steps", c.steps},
          {"group_size", c.group_size},
          {"prompts_per_step", c.prompts_per_step},
          {"rollout_temperature", c.rollout_temperature},
          {"clip_epsilon", c.clip_epsilon},
          {"kl_beta", c.kl_beta},
          {"advantage_epsilon", c.advantage_epsilon},
          {"learning_rate", c.learning_rate},
          {"max_new_tokens", c.max_new_tokens},
          {"rank_rewards", c.rank_rewards},
          {"seed", c.seed}};
}

std::uint64_t member_seed(std::uint64_t seed, long step, std::size_t input_index,
                          std::size_t member_index) {
  return derive_seed(seed, static_cast<std::uint64_t>(step), input_index, member_index);
}

GroupRollout sample_group(const policy::Params<float>& snapshot, const world::XCoTSample& input,
                          std::size_t group_size, const policy::SampleOptions& options,
                          std::uint64_t seed, long step, std::size_t input_index) {
  GroupRollout g;
  g.context = world::conditioning_context(input);
  g.reference = input.reference_scene;
  g.prompt = input.prompt;
  std::vector<policy::SampleOptions> opts(group_size, options);
  for (std::size_t m = 0; m < group_size; ++m) {
    opts[m].grammar_mask = false;
    opts[m].rng_seed = member_seed(seed, step, input_index, m);
    g.member_seeds.push_back(opts[m].rng_seed);
  }
  auto results = policy::sample_batch(snapshot, g.context, opts);
  for (auto& r : results) {
    g.traces.push_back(std::move(r.tokens));
    g.old_log_probs.push_back(std::move(r.log_probs));
  }
  return g;
}

std::vector<double> compute_advantages(std::span<const double> totals, double eps) {
  if (totals.size() < 2) throw Error("advantages need a group of at least 2");
  const double n = static_cast<double>(totals.size());
  double mean = 0;
  for (double r : totals) mean += r;
  mean /= n;
  double var = 0;
  for (double r : totals) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(totals.size());
  for (std::size_t i = 0; i < totals.size(); ++i) out[i] = (totals[i] - mean) / (sd + eps);
  return out;
}

std::vector<double> rank_transform(std::span<const double> totals) {
  std::vector<std::size_t> idx(totals.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return totals[a] < totals[b]; });
  std::vector<double> ranks(totals.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && totals[idx[j + 1]] == totals[idx[i]]) ++j;
    const double r = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

void score_group(GroupRollout& g, const rewards::RewardWeights& weights, format::TraceStyle style,
                 const GrpoConfig& config) {
  g.rewards.clear();
  std::vector<double> totals;
  for (const auto& t : g.traces) {
    g.rewards.push_back(rewards::score_trace(t, g.reference, g.prompt, weights, style));
    totals.push_back(g.rewards.back().total);
  }
  if (config.rank_rewards) totals = rank_transform(totals);
  g.advantages = compute_advantages(totals, config.advantage_epsilon);
}

std::vector<policy::ScoredSequence> rollout_sequences(std::span<const GroupRollout> groups) {
  std::vector<policy::ScoredSequence> out;
  for (const auto& g : groups) {
    for (const auto& t : g.traces) {
      policy::ScoredSequence s;
      s.tokens = g.context;
      s.first_target = s.tokens.size();
      s.tokens.insert(s.tokens.end(), t.begin(), t.end());
      out.push_back(std::move(s));
    }
  }
  return out;
}

GrpoObjective::GrpoObjective(std::span<const GroupRollout> groups,
                             std::span<const std::vector<double>> ref_log_probs,
                             const GrpoConfig& config)
    : clip_(config.clip_epsilon), beta_(config.kl_beta) {
  std::size_t count = 0;
  for (const auto& g : groups) {
    if (g.advantages.size() != g.size()) throw Error("rollout has no advantages");
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (count >= ref_log_probs.size()) throw Error("missing reference log-probs");
      items_.push_back({&g.old_log_probs[i], &ref_log_probs[count], g.advantages[i]});
      ++count;
    }
  }
  if (count != ref_log_probs.size()) throw Error("reference log-prob count mismatch");
  weight_ = 1.0 / static_cast<double>(std::max<std::size_t>(1, count));
  stats_.resize(count);
}

double GrpoObjective::evaluate(std::size_t index, std::span<const double> logp,
                               std::span<double> dlogp) const {
  const auto& it = items_.at(index);
  const auto& old_lp = *it.old_lp;
  const auto& ref_lp = *it.ref_lp;
  if (old_lp.size() != logp.size() || ref_lp.size() != logp.size()) {
    throw Error("log-prob length mismatch in GRPO objective");
  }
  auto& st = stats_[index];
  st = {};
  if (logp.empty()) return 0.0;
  const double a = it.advantage;
  const double scale = weight_ / static_cast<double>(logp.size());
  double sum = 0;
  for (std::size_t t = 0; t < logp.size(); ++t) {
    const double ratio = std::exp(logp[t] - old_lp[t]);
    const double clipped = std::clamp(ratio, 1.0 - clip_, 1.0 + clip_);
    const double unclipped_obj = ratio * a;
    const double clipped_obj = clipped * a;
    double surrogate, dsurrogate;
    if (unclipped_obj <= clipped_obj) {
      surrogate = unclipped_obj;
      dsurrogate = unclipped_obj;  // d(rho A)/dlogp = rho A
    } else {
      surrogate = clipped_obj;
      dsurrogate = 0.0;
      ++st.clipped;
    }
    const double diff = ref_lp[t] - logp[t];
    const double e = std::exp(diff);
    const double k3 = e - diff - 1.0;
    sum += -surrogate + beta_ * k3;
    dlogp[t] = scale * (-dsurrogate + beta_ * (1.0 - e));
    st.kl_sum += k3;
    st.max_ratio_dev = std::max(st.max_ratio_dev, std::abs(ratio - 1.0));
  }
  st.tokens = logp.size();
  return scale * sum;
}

TokenStats GrpoObjective::stats() const {
  TokenStats total;
  for (const auto& s : stats_) {
    total.kl_sum += s.kl_sum;
    total.tokens += s.tokens;
    total.clipped += s.clipped;
    total.max_ratio_dev = std::max(total.max_ratio_dev, s.max_ratio_dev);
  }
  return total;
}

namespace {

template <typename S>
std::vector<std::vector<double>> reference_log_probs(const policy::Params<S>& ref,
                                                     std::span<const GroupRollout> groups,
                                                     unsigned threads) {
  std::vector<std::pair<const TokenSeq*, const TokenSeq*>> jobs;
  for (const auto& g : groups) {
    for (const auto& t : g.traces) jobs.emplace_back(&g.context, &t);
  }
  std::vector<std::vector<double>> out(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i, unsigned) {
    out[i] = policy::log_prob(ref, *jobs[i].first, *jobs[i].second);
  });
  return out;
}

}  // namespace

template <typename S>
double grpo_loss(const policy::Params<S>& params, const GroupRollout& rollout,
                 const policy::Params<S>& ref_params, const GrpoConfig& config,
                 std::span<S> grad) {
  std::span<const GroupRollout> groups(&rollout, 1);
  auto ref_lp = reference_log_probs(ref_params, groups, 1);
  GrpoObjective objective(groups, ref_lp, config);
  auto seqs = rollout_sequences(groups);
  const double loss = grad.empty()
                          ? policy::evaluate_objective(params, std::span<const policy::ScoredSequence>(seqs), objective)
                          : policy::backward(params, std::span<const policy::ScoredSequence>(seqs), objective, grad);
  if (!std::isfinite(loss)) throw NonFiniteLoss("GRPO loss is not finite", 0);
  return loss;
}

template double grpo_loss(const policy::Params<float>&, const GroupRollout&,
                          const policy::Params<float>&, const GrpoConfig&, std::span<float>);
template double grpo_loss(const policy::Params<double>&, const GroupRollout&,
                          const policy::Params<double>&, const GrpoConfig&, std::span<double>);

GrpoResult train_grpo(const policy::Params<float>& init, const GrpoConfig& config,
                      const rewards::RewardWeights& weights, const sft::MetricsSink& sink,
                      const sft::MetricsSink& rollout_sink) {
  config.check();
  weights.check();
  const auto style = init.config().trace_style;
  const policy::Params<float> reference = init;
  policy::Params<float> params = init;
  Adam adam(params.size());
  std::vector<float> grad(params.size());
  GrpoResult result{params, 0.0};

  policy::SampleOptions base;
  base.temperature = config.rollout_temperature;
  base.max_new_tokens = config.max_new_tokens;

  for (long step = 0; step < config.steps; ++step) {
    // Sampling phase: params are read-only, so they double as the snapshot.
    std::vector<GroupRollout> groups(config.prompts_per_step);
    parallel_for(groups.size(), config.threads, [&](std::size_t p, unsigned) {
      auto input = world::synth_sample(derive_seed(config.seed, static_cast<std::uint64_t>(step), p, 0xda7a),
                                       world::Split::kTrain);
      groups[p] = sample_group(params, input, config.group_size, base, config.seed, step, p);
      score_group(groups[p], weights, style, config);
    });
    auto ref_lp = reference_log_probs(reference, std::span<const GroupRollout>(groups), config.threads);
    GrpoObjective objective(groups, ref_lp, config);
    auto seqs = rollout_sequences(groups);
    const double loss = policy::backward(params, std::span<const policy::ScoredSequence>(seqs),
                                         objective, std::span<float>(grad), config.threads);
    if (!std::isfinite(loss)) throw NonFiniteLoss("GRPO loss is not finite", step);
    const double gnorm = adam.step(params.values(), grad, config.learning_rate);

    const auto st = objective.stats();
    result.last_max_ratio_dev = st.max_ratio_dev;
    double sf = 0, si = 0, stx = 0, stot = 0;
    std::size_t n = 0;
    for (const auto& g : groups) {
      for (const auto& r : g.rewards) {
        sf += r.r_f;
        si += r.r_i;
        stx += r.r_t;
        stot += r.total;
        ++n;
      }
    }
    const double dn = static_cast<double>(n);
    if (sink) {
      sink({{"step", step + 1},
            {"loss", loss},
            {"mean_total", stot / dn},
            {"mean_r_f", sf / dn},
            {"mean_r_i", si / dn},
            {"mean_r_t", stx / dn},
            {"kl", st.tokens ? st.kl_sum / static_cast<double>(st.tokens) : 0.0},
            {"clip_fraction", st.tokens ? static_cast<double>(st.clipped) / static_cast<double>(st.tokens) : 0.0},
            {"max_ratio_dev", st.max_ratio_dev},
            {"grad_norm", gnorm}});
    }
    if (rollout_sink) {
      for (std::size_t p = 0; p < groups.size(); ++p) {
        const auto& g = groups[p];
        for (std::size_t m = 0; m < g.size(); ++m) {
          rollout_sink({{"step", step + 1},
                        {"input", p},
                        {"member", m},
                        {"trace", vocab().decode(g.traces[m])},
                        {"reward", rewards::to_json(g.rewards[m])},
                        {"advantage", g.advantages[m]}});
        }
      }
    }
  }
  result.params = std::move(params);
  return result;
}

}  // namespace xcot::grpo
