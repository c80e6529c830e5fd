#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "xcot/error.hpp"
#include "xcot/sft.hpp"

using namespace xcot;
using policy::ScoredSequence;

namespace {

policy::PolicyConfig small_policy() {
  policy::PolicyConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  return c;
}

sft::SftConfig short_run(long steps) {
  sft::SftConfig c;
  c.steps = steps;
  c.warmup_steps = 2;
  c.batch_size = 4;
  c.learning_rate = 3e-3;
  c.log_every = 5;
  c.eval_every = 10;
  c.heldout_size = 8;
  return c;
}

std::vector<world::XCoTSample> samples(world::Split split, std::size_t n, std::uint64_t base = 0) {
  std::vector<world::XCoTSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(world::synth_sample(base + i, split));
  return out;
}

// -log softmax(row)[k], by hand in double.
double nll(std::span<const double> row, std::uint32_t k) {
  double mx = row[0];
  for (auto x : row) mx = std::max(mx, x);
  double z = 0;
  for (auto x : row) z += std::exp(x - mx);
  return -(row[k] - mx - std::log(z));
}

}  // namespace

TEST_SUITE("sft") {

TEST_CASE("packing puts the trace after the conditioning context") {
  const auto s = world::synth_sample(3, world::Split::kTrain);
  const auto packed = sft::pack_example(s);
  const auto ctx = world::conditioning_context(s);
  CHECK(packed.first_target == ctx.size());
  CHECK(packed.first_target == 76);
  CHECK(packed.tokens.size() == 76 + s.trace().size());
  CHECK(std::equal(ctx.begin(), ctx.end(), packed.tokens.begin()));
  CHECK(vocab().is(packed.tokens[packed.first_target - 1], Structural::kGen));
  const auto direct = sft::pack_example(s, format::TraceStyle::kDirect);
  CHECK(direct.num_targets() == 67);
  CHECK(sft::target_trace(s, format::TraceStyle::kDirect) == format::serialize_direct(s.result_image));
}

TEST_CASE("uniform model has loss ln 66") {
  auto c = small_policy();
  c.init_scale = 0.0f;
  const auto p = policy::init(c, 1);
  std::vector<ScoredSequence> batch;
  for (const auto& s : samples(world::Split::kTrain, 3)) batch.push_back(sft::pack_example(s));
  CHECK(sft::sft_loss(p, std::span<const ScoredSequence>(batch)) == doctest::Approx(std::log(66.0)).epsilon(1e-9));
  CHECK(std::log(66.0) == doctest::Approx(4.1897).epsilon(1e-4));
}

TEST_CASE("certain targets give zero loss") {
  const std::vector<ScoredSequence> batch{{TokenSeq(5), 2}};
  const sft::CrossEntropy ce(batch);
  const std::vector<double> logp(3, 0.0);
  std::vector<double> d(3);
  CHECK(ce.evaluate(0, logp, d) == 0.0);
  for (auto g : d) CHECK(g == doctest::Approx(-1.0 / 3.0));
}

TEST_CASE("hand-built three-token example") {
  auto c = small_policy();
  c.init_scale = 0.5f;
  c.context_len = 8;
  const auto p = policy::init(c, 2).cast<double>();
  const TokenSeq tokens{TokenId{1}, TokenId{20}, TokenId{60}};
  const std::vector<ScoredSequence> batch{{tokens, 1}};
  const auto logits = policy::forward_logits(p, std::span(tokens));
  const std::span<const double> all(logits);
  const double expected = (nll(all.subspan(0, 66), 20) + nll(all.subspan(66, 66), 60)) / 2.0;
  CHECK(sft::sft_loss(p, std::span<const ScoredSequence>(batch)) == doctest::Approx(expected).epsilon(1e-12));

  // mean over the pooled tokens of two sequences, not a mean of means
  const std::vector<ScoredSequence> two{{tokens, 1}, {tokens, 2}};
  const double pooled = (nll(all.subspan(0, 66), 20) + 2 * nll(all.subspan(66, 66), 60)) / 3.0;
  CHECK(sft::sft_loss(p, std::span<const ScoredSequence>(two)) == doctest::Approx(pooled).epsilon(1e-12));
}

TEST_CASE("loss covers exactly the trace tokens") {
  const auto p = policy::init(small_policy(), 3);
  const auto s = world::synth_sample(4, world::Split::kTrain);
  const auto packed = sft::pack_example(s);
  const std::vector<ScoredSequence> batch{packed};
  const auto ctx = world::conditioning_context(s);
  const auto trace = s.trace();
  const auto lp = policy::log_prob(p, std::span(ctx), std::span(trace));
  double mean = 0;
  for (auto v : lp) mean -= v;
  mean /= static_cast<double>(lp.size());
  CHECK(sft::sft_loss(p, std::span<const ScoredSequence>(batch)) == doctest::Approx(mean).epsilon(1e-12));

  // Moving the mask boundary changes which positions count and nothing else.
  const std::vector<ScoredSequence> last{{packed.tokens, packed.tokens.size() - 1}};
  const auto lp_last = policy::log_prob(p, std::span(packed.tokens).first(packed.tokens.size() - 1),
                                        std::span(packed.tokens).last(1));
  CHECK(sft::sft_loss(p, std::span<const ScoredSequence>(last)) == doctest::Approx(-lp_last[0]).epsilon(1e-12));
}

TEST_CASE("empty supervision is rejected") {
  const auto p = policy::init(small_policy(), 4);
  const std::vector<ScoredSequence> none{{TokenSeq(4), 4}};
  CHECK_THROWS_AS(sft::sft_loss(p, std::span<const ScoredSequence>(none)), EmptyMask);
  const std::vector<ScoredSequence> empty;
  CHECK_THROWS_AS(sft::sft_loss(p, std::span<const ScoredSequence>(empty)), EmptyMask);
}

TEST_CASE("learning rate schedule: linear warmup then cosine to 10%") {
  sft::SftConfig c;
  c.steps = 1000;
  c.warmup_steps = 100;
  c.learning_rate = 1e-3;
  CHECK(sft::learning_rate_at(c, 0) == doctest::Approx(1e-5));
  CHECK(sft::learning_rate_at(c, 49) == doctest::Approx(5e-4));
  CHECK(sft::learning_rate_at(c, 99) == doctest::Approx(1e-3));
  CHECK(sft::learning_rate_at(c, 550) == doctest::Approx(0.55e-3).epsilon(1e-2));
  CHECK(sft::learning_rate_at(c, 999) == doctest::Approx(1e-4).epsilon(1e-3));
  for (long s = 100; s < 999; ++s) CHECK(sft::learning_rate_at(c, s + 1) <= sft::learning_rate_at(c, s));
}

TEST_CASE("config validation") {
  auto c = short_run(10);
  c.warmup_steps = 10;
  CHECK_THROWS_AS(c.check(), ConfigError);
  c = short_run(10);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.check(), ConfigError);
  c = short_run(-1);
  CHECK_THROWS_AS(c.check(), ConfigError);
  CHECK_NOTHROW(short_run(0).check());
  const std::vector<world::XCoTSample> none;
  CHECK_THROWS_AS(sft::train_sft(short_run(10), none, none, small_policy()), EmptyDataset);
}

TEST_CASE("zero steps returns the initialization") {
  const auto train = samples(world::Split::kTrain, 4);
  auto cfg = short_run(0);
  cfg.seed = 9;
  const auto r = sft::train_sft(cfg, train, {}, small_policy());
  CHECK(r.final_params == policy::init(small_policy(), 9));
  CHECK(r.best_params == r.final_params);
  CHECK(r.best_step == 0);
}

TEST_CASE("training is deterministic, logs on schedule and lowers the loss") {
  const auto train = samples(world::Split::kTrain, 32);
  const auto heldout = samples(world::Split::kEval, 8, 1000);
  std::vector<nlohmann::json> a, b;
  auto cfg = short_run(40);
  const auto ra = sft::train_sft(cfg, train, heldout, small_policy(), [&](const auto& j) { a.push_back(j); });
  cfg.threads = 2;
  const auto rb = sft::train_sft(cfg, train, heldout, small_policy(), [&](const auto& j) { b.push_back(j); });
  CHECK(a == b);
  CHECK(ra.final_params == rb.final_params);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]["step"] == 5 * static_cast<long>(i + 1));
    for (const char* key : {"loss", "lr", "grad_norm"}) CHECK(a[i].contains(key));
    CHECK(a[i].contains("heldout_loss") == ((i + 1) % 2 == 0));
  }
  CHECK(a.back()["loss"].get<double>() < a.front()["loss"].get<double>());
  CHECK(a.back()["heldout_loss"].get<double>() < std::log(66.0));
  CHECK(ra.best_heldout_loss <= a.back()["heldout_loss"].get<double>());
  CHECK(ra.best_step % 10 == 0);
}

TEST_CASE("no-CoT baseline trains on the direct grammar") {
  const auto train = samples(world::Split::kTrain, 16);
  auto cfg = short_run(10);
  const auto r1 = sft::build_no_cot_baseline(cfg, train, {}, small_policy());
  const auto r2 = sft::build_no_cot_baseline(cfg, train, {}, small_policy());
  CHECK(r1.final_params == r2.final_params);
  CHECK(r1.final_params.config().trace_style == format::TraceStyle::kDirect);
  for (const auto& s : train) {
    const auto direct = sft::target_trace(s, format::TraceStyle::kDirect);
    CHECK_FALSE(format::validate(direct).accepted);
    CHECK(format::validate(direct, format::TraceStyle::kDirect).accepted);
    CHECK(direct.size() < s.trace().size());
  }
}

}  // TEST_SUITE
