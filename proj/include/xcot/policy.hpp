#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "xcot/format.hpp"
#include "xcot/vocab.hpp"

namespace xcot::policy {

struct PolicyConfig {
  std::uint32_t vocab_size = 66;
  std::uint32_t d_model = 128;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t mlp_ratio = 4;
  std::uint32_t context_len = 256;
  float init_scale = 0.02f;
  bool tied_embeddings = false;
  /// Grammar the policy is trained to emit; decides how its samples are parsed.
  format::TraceStyle trace_style = format::TraceStyle::kXCoT;

  void check() const;
  std::uint32_t head_dim() const { return d_model / n_heads; }
  std::uint32_t hidden() const { return d_model * mlp_ratio; }
  bool operator==(const PolicyConfig&) const = default;
};

nlohmann::json to_json(const PolicyConfig& c);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Offsets of every tensor inside the flat parameter vector.
struct Layout {
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out;
    std::size_t ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::size_t wte = 0, wpe = 0;
  std::vector<Block> blocks;
  std::size_t lnf_g = 0, lnf_b = 0;
  std::size_t lm_head = 0;  // == wte when tied (stored V x d, used transposed)
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  explicit Layout(const PolicyConfig& c);
};

template <typename S>
class Params {
 public:
  Params() = default;
  explicit Params(const PolicyConfig& config);

  const PolicyConfig& config() const noexcept { return config_; }
  const Layout& layout() const noexcept { return *layout_; }
  std::span<S> values() noexcept { return values_; }
  std::span<const S> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  S* data() noexcept { return values_.data(); }
  const S* data() const noexcept { return values_.data(); }

  std::span<S> tensor(std::string_view name);
  std::span<const S> tensor(std::string_view name) const;

  template <typename T>
  Params<T> cast() const {
    Params<T> out(config_);
    for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<T>(values_[i]);
    return out;
  }

  bool operator==(const Params& o) const { return config_ == o.config_ && values_ == o.values_; }

 private:
  PolicyConfig config_;
  std::shared_ptr<const Layout> layout_;
  std::vector<S> values_;
};

/// Deterministic initialization: weights ~ N(0, init_scale^2), biases 0,
/// layer-norm gains 1.
Params<float> init(const PolicyConfig& config, std::uint64_t seed);

/// Row-major (len x vocab) logits. Throws ContextTooLong.
template <typename S>
std::vector<S> forward_logits(const Params<S>& params, std::span<const TokenId> tokens);

/// log p(continuation[i] | context, continuation[<i]) at temperature 1.
template <typename S>
std::vector<double> log_prob(const Params<S>& params, std::span<const TokenId> context,
                             std::span<const TokenId> continuation);

/// log softmax(row)[token], accumulated in double. Shared by the sampler
/// and the training objectives so stored and recomputed values agree.
template <typename S>
double log_softmax_at(std::span<const S> row, std::uint32_t token);

/// A token stream whose tokens [first_target, size) are scored.
struct ScoredSequence {
  TokenSeq tokens;
  std::size_t first_target = 1;

  std::size_t num_targets() const { return tokens.size() - first_target; }
};

/// A loss that decomposes over sequences and depends on the policy only
/// through the log-probabilities of the scored tokens.
class SequenceObjective {
 public:
  virtual ~SequenceObjective() = default;
  /// Returns sequence `index`'s loss term and writes d(term)/d(logp[i]).
  virtual double evaluate(std::size_t index, std::span<const double> logp,
                          std::span<double> dlogp) const = 0;
};

/// Loss value and dLoss/dParams (overwrites `grad`, same size as params).
/// Per-sequence gradients are reduced in index order, so the result does
/// not depend on `threads`.
template <typename S>
double backward(const Params<S>& params, std::span<const ScoredSequence> batch,
                const SequenceObjective& objective, std::span<S> grad, unsigned threads = 1);

/// Loss value only.
template <typename S>
double evaluate_objective(const Params<S>& params, std::span<const ScoredSequence> batch,
                          const SequenceObjective& objective, unsigned threads = 1);

struct SampleOptions {
  double temperature = 1.0;  // 0 => argmax
  std::size_t max_new_tokens = 256;
  std::uint64_t rng_seed = 0;
  bool grammar_mask = false;
  bool record_uniforms = false;
};

struct SampleResult {
  TokenSeq tokens;
  std::vector<double> log_probs;  // temperature-1, unmasked
  std::vector<double> uniforms;   // only with record_uniforms
  bool finished = false;          // emitted EOS
};

/// Ancestral sampling of one continuation. Throws ContextTooLong.
SampleResult sample(const Params<float>& params, std::span<const TokenId> context,
                    const SampleOptions& options);

/// One continuation per options entry, all from the same context, decoded
/// in lockstep. Each member's output depends only on its own options.
std::vector<SampleResult> sample_batch(const Params<float>& params,
                                       std::span<const TokenId> context,
                                       std::span<const SampleOptions> options);

// Checkpoint file: "XCF1", u32 version, config block, tensor table, u64 FNV-1a.
void save_checkpoint(const Params<float>& params, const std::filesystem::path& path);
Params<float> load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> checkpoint_bytes(const Params<float>& params);
Params<float> checkpoint_from_bytes(std::span<const std::uint8_t> bytes);

}  // namespace xcot::policy
