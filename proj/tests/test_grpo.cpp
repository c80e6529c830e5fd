#include <doctest.h>

#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "xcot/error.hpp"
#include "xcot/grpo.hpp"

using namespace xcot;
using namespace xcot::grpo;

namespace {

policy::PolicyConfig small_policy(std::uint32_t d = 8) {
  policy::PolicyConfig c;
  c.d_model = d;
  c.n_layers = 1;
  c.n_heads = 2;
  c.init_scale = 0.2f;
  return c;
}

GroupRollout rollout(const policy::Params<float>& p, std::size_t G, std::size_t max_new,
                     std::uint64_t seed) {
  policy::SampleOptions o;
  o.max_new_tokens = max_new;
  const auto input = world::synth_sample(seed, world::Split::kTrain);
  return sample_group(p, input, G, o, seed, 0, 0);
}

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double drift(const policy::Params<float>& a, const policy::Params<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// A briefly supervised model that emits a valid trace some of the time, so
// groups have reward variance. Built once per process.
const policy::Params<float>& warm_policy() {
  static const auto params = [] {
    auto c = small_policy(32);
    c.init_scale = 0.02f;
    std::vector<world::XCoTSample> train;
    for (std::uint64_t i = 0; i < 256; ++i) train.push_back(world::synth_sample(i, world::Split::kTrain));
    sft::SftConfig sc;
    sc.steps = 300;
    sc.warmup_steps = 10;
    sc.batch_size = 8;
    sc.learning_rate = 3e-3;
    return sft::train_sft(sc, train, {}, c).final_params;
  }();
  return params;
}

}  // namespace

TEST_SUITE("grpo") {

TEST_CASE("advantage examples") {
  const std::vector<double> flat{1, 1, 1, 1};
  for (double a : compute_advantages(flat, 1e-6)) CHECK(a == 0.0);
  const std::vector<double> two{0, 2};
  const auto a = compute_advantages(two, 1e-6);
  CHECK(a[0] == doctest::Approx(-1.0 / (1.0 + 1e-6)).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(1.0 / (1.0 + 1e-6)).epsilon(1e-15));
  CHECK(a[1] < 1.0);
  const std::vector<double> one{3};
  CHECK_THROWS_AS(compute_advantages(one, 1e-6), Error);
}

TEST_CASE("advantages are centered and scaled by the population std") {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> r(2 + rng.below(15));
    for (auto& x : r) x = rng.below(3) == 0 ? 3.0 : 3.0 * rng.uniform();
    const auto a = compute_advantages(r, 1e-6);
    const double sum = std::accumulate(a.begin(), a.end(), 0.0);
    CHECK(std::abs(sum) < 1e-6 * static_cast<double>(r.size()));
    CHECK(std::abs(sum / static_cast<double>(r.size())) < 1e-9);
    double sq = 0;
    for (double x : a) sq += x * x;
    const double var = sq / static_cast<double>(r.size());
    if (var > 0) CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("rank transform averages ties") {
  const std::vector<double> r{0.5, 3.0, 0.5, 1.0};
  CHECK(rank_transform(r) == std::vector<double>{1.5, 4.0, 1.5, 3.0});
  const std::vector<double> flat{2, 2, 2};
  CHECK(rank_transform(flat) == std::vector<double>{2, 2, 2});
}

TEST_CASE("member seeds") {
  CHECK(member_seed(1, 0, 0, 0) == member_seed(1, 0, 0, 0));
  CHECK(member_seed(1, 0, 0, 0) != member_seed(1, 0, 0, 1));
  CHECK(member_seed(1, 0, 0, 0) != member_seed(1, 0, 1, 0));
  CHECK(member_seed(1, 0, 0, 0) != member_seed(1, 1, 0, 0));
  CHECK(member_seed(1, 0, 0, 0) != member_seed(2, 0, 0, 0));
}

TEST_CASE("group sampling is seeded, capped and records the sampler's log-probs") {
  const auto p = policy::init(small_policy(16), 1);
  const auto a = rollout(p, 4, 40, 3);
  const auto b = rollout(p, 4, 40, 3);
  CHECK(a.traces == b.traces);
  CHECK(a.member_seeds == b.member_seeds);
  CHECK(a.member_seeds[0] != a.member_seeds[1]);
  CHECK(a.traces[0] != a.traces[1]);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.traces[i].size() <= 40);
    REQUIRE(a.old_log_probs[i].size() == a.traces[i].size());
    // ratio sanity: the current policy reproduces the snapshot's log-probs
    const auto lp = policy::log_prob(p, std::span(a.context), std::span(a.traces[i]));
    for (std::size_t t = 0; t < lp.size(); ++t) CHECK(std::abs(std::exp(lp[t] - a.old_log_probs[i][t]) - 1) < 1e-5);
  }
}

TEST_CASE("scoring fills rewards and advantages") {
  const auto p = policy::init(small_policy(), 2);
  auto g = rollout(p, 6, 30, 4);
  GrpoConfig cfg;
  score_group(g, {}, format::TraceStyle::kXCoT, cfg);
  REQUIRE(g.rewards.size() == 6);
  REQUIRE(g.advantages.size() == 6);
  for (const auto& r : g.rewards) CHECK(r.total == 0.0);  // random traces never parse
  for (double a : g.advantages) CHECK(a == 0.0);

  // a group with one engine trace: that member gets the only positive advantage
  const auto input = world::synth_sample(4, world::Split::kTrain);
  g.traces[2] = input.trace();
  score_group(g, {}, format::TraceStyle::kXCoT, cfg);
  CHECK(g.rewards[2].total == 3.0);
  CHECK(g.advantages[2] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-5));
  CHECK(g.advantages[0] == doctest::Approx(-1.0 / std::sqrt(5.0)).epsilon(1e-5));
  cfg.rank_rewards = true;
  score_group(g, {}, format::TraceStyle::kXCoT, cfg);
  CHECK(g.advantages[2] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-5));
}

TEST_CASE("ratio-one identity: theta = old = ref gives zero loss") {
  const auto p = policy::init(small_policy(), 5);
  auto g = rollout(p, 8, 25, 6);
  Rng rng(6);
  std::vector<double> totals(8);
  for (auto& t : totals) t = 3 * rng.uniform();
  g.advantages = compute_advantages(totals, 1e-6);
  const GrpoConfig cfg;
  // float: the sampler and the scorer share the forward pass bit for bit
  CHECK(std::abs(grpo_loss(p, g, p, cfg)) < 1e-9);
}

TEST_CASE("degenerate group contributes no gradient at theta = ref") {
  const auto p = policy::init(small_policy(), 7).cast<double>();
  auto g = rollout(policy::init(small_policy(), 7), 4, 25, 8);
  g.advantages.assign(4, 0.0);
  std::vector<double> grad(p.size());
  const double loss = grpo_loss(p, g, p, GrpoConfig{}, std::span(grad));
  CHECK(loss == 0.0);
  CHECK(norm(grad) < 1e-12);
}

TEST_CASE("two-trace hand example with a clipped token") {
  const auto theta = policy::init(small_policy(), 9).cast<double>();
  const auto ref = policy::init(small_policy(), 10).cast<double>();
  GroupRollout g;
  g.context = {TokenId{1}, TokenId{30}, TokenId{4}};
  g.traces = {{TokenId{5}, TokenId{12}, TokenId{2}}, {TokenId{60}, TokenId{2}}};
  g.advantages = {1.0, -1.0};
  // old log-probs offset from the current ones: ratios e^0.5, e^-0.05, e^0.1 | e^-0.4, e^0.02
  const std::vector<std::vector<double>> offsets{{0.5, -0.05, 0.1}, {-0.4, 0.02}};
  GrpoConfig cfg;
  cfg.kl_beta = 0.3;
  double expected = 0;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto lp = policy::log_prob(theta, std::span(g.context), std::span(g.traces[i]));
    const auto lr = policy::log_prob(ref, std::span(g.context), std::span(g.traces[i]));
    std::vector<double> old(lp.size());
    double term = 0;
    for (std::size_t t = 0; t < lp.size(); ++t) {
      old[t] = lp[t] - offsets[i][t];
      const double rho = std::exp(lp[t] - old[t]);
      const double A = g.advantages[i];
      const double clip = std::clamp(rho, 1 - cfg.clip_epsilon, 1 + cfg.clip_epsilon);
      const double surrogate = std::min(rho * A, clip * A);
      clipped += surrogate != rho * A;
      const double k3 = std::exp(lr[t] - lp[t]) - (lr[t] - lp[t]) - 1;
      CHECK(k3 >= 0.0);
      MESSAGE("trace " << i << " token " << t << " rho " << rho << " A " << A << " k3 " << k3);
      term += -surrogate + cfg.kl_beta * k3;
    }
    expected += term / static_cast<double>(lp.size()) / 2.0;
    g.old_log_probs.push_back(old);
  }
  // +A with rho=e^0.5 and -A with rho=e^-0.4 take the clipped branch
  CHECK(clipped == 2);
  std::vector<double> grad(theta.size());
  CHECK(grpo_loss(theta, g, ref, cfg, std::span(grad)) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(grpo_loss(theta, g, ref, cfg) == doctest::Approx(expected).epsilon(1e-12));

  const std::vector<std::vector<double>> ref_lp{
      policy::log_prob(ref, std::span(g.context), std::span(g.traces[0])),
      policy::log_prob(ref, std::span(g.context), std::span(g.traces[1]))};
  GrpoObjective objective(std::span(&g, 1), ref_lp, cfg);
  const auto seqs = rollout_sequences(std::span(&g, 1));
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[1].first_target == 3);
  policy::evaluate_objective(theta, std::span<const policy::ScoredSequence>(seqs), objective);
  const auto stats = objective.stats();
  CHECK(stats.tokens == 5);
  CHECK(stats.clipped == 2);
  CHECK(stats.kl_sum >= 0.0);
  CHECK(stats.max_ratio_dev == doctest::Approx(std::exp(0.5) - 1));
}

TEST_CASE("grpo_loss gradient matches central differences") {
  for (std::uint64_t k = 0; k < 3; ++k) {
    auto c = small_policy();
    c.context_len = 96;
    const auto pf = policy::init(c, 20 + k);
    auto g = rollout(pf, 4, 12, 30 + k);
    g.advantages = {1.2, -0.4, 0.3, -1.1};
    // move old log-probs so some tokens sit in the clipped region, away from the kinks
    Rng rng(40 + k);
    for (auto& lp : g.old_log_probs) {
      for (auto& v : lp) v -= rng.below(3) == 0 ? 0.6 : 0.05;
    }
    const auto theta = pf.cast<double>();
    // the reference sits near theta, as it does during training
    auto ref = theta;
    for (auto& v : ref.values()) v += 0.02 * rng.normal();
    GrpoConfig cfg;
    cfg.kl_beta = 0.1;
    std::vector<double> grad(theta.size());
    grpo_loss(theta, g, ref, cfg, std::span(grad));
    const auto report = testing::finite_difference_check(
        theta, grad, [&](const policy::Params<double>& q) { return grpo_loss(q, g, ref, cfg); }, 100, 60 + k);
    INFO("index " << report.worst_index << " analytic " << report.analytic << " numeric " << report.numeric);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("config validation") {
  GrpoConfig c;
  CHECK_NOTHROW(c.check());
  c.group_size = 1;
  CHECK_THROWS_AS(c.check(), ConfigError);
  c = GrpoConfig{};
  c.clip_epsilon = 0;
  CHECK_THROWS_AS(c.check(), ConfigError);
  c = GrpoConfig{};
  c.steps = -1;
  CHECK_THROWS_AS(c.check(), ConfigError);
  CHECK(to_json(GrpoConfig{})["group_size"] == 8);
}

TEST_CASE("zero steps returns the input") {
  const auto p = policy::init(small_policy(), 11);
  GrpoConfig cfg;
  cfg.steps = 0;
  CHECK(train_grpo(p, cfg, {}).params == p);
}

TEST_CASE("training is deterministic and reports per-step metrics") {
  const auto& p = warm_policy();
  GrpoConfig cfg;
  cfg.steps = 3;
  cfg.group_size = 4;
  cfg.prompts_per_step = 2;
    cfg.learning_rate = 1e-3;
  std::vector<nlohmann::json> m1, m2, dumps;
  const auto r1 = train_grpo(p, cfg, {}, [&](const auto& j) { m1.push_back(j); },
                             [&](const auto& j) { dumps.push_back(j); });
  cfg.threads = 2;
  const auto r2 = train_grpo(p, cfg, {}, [&](const auto& j) { m2.push_back(j); });
  CHECK(r1.params == r2.params);
  CHECK(m1 == m2);
  REQUIRE(m1.size() == 3);
  for (const char* key : {"step", "loss", "mean_total", "mean_r_f", "mean_r_i", "mean_r_t", "kl",
                          "clip_fraction", "grad_norm"}) {
    CHECK(m1[0].contains(key));
  }
  CHECK(m1[0]["kl"].get<double>() == 0.0);
  CHECK(m1[1]["kl"].get<double>() > 0.0);
  CHECK(m1[0]["clip_fraction"].get<double>() == 0.0);
  CHECK(r1.last_max_ratio_dev < 1e-5);
  CHECK(dumps.size() == 3 * 2 * 4);
  for (const char* key : {"step", "input", "member", "trace", "reward", "advantage"}) CHECK(dumps[0].contains(key));
  CHECK_FALSE(r1.params == p);
}

TEST_CASE("a heavy KL weight keeps the policy closer to the reference") {
  const auto& start = warm_policy();
  GrpoConfig cfg;
  cfg.steps = 50;
  cfg.group_size = 4;
  cfg.prompts_per_step = 2;
  cfg.learning_rate = 1e-3;
  cfg.kl_beta = 0.01;
  const double loose = drift(train_grpo(start, cfg, {}).params, start);
  cfg.kl_beta = 100.0;
  const double tight = drift(train_grpo(start, cfg, {}).params, start);
  MESSAGE("drift beta=0.01: " << loose << "  beta=100: " << tight);
  CHECK(tight < loose);
}

}  // TEST_SUITE
