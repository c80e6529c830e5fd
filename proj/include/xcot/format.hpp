#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

#include "xcot/grid.hpp"
#include "xcot/util.hpp"
#include "xcot/vocab.hpp"

namespace xcot::format {

/// Which trace language a policy emits after GEN.
///   kXCoT:   THINK_OPEN word+ IMG_BEGIN color^64 IMG_END word+ THINK_CLOSE
///            IMG_BEGIN color^64 IMG_END EOS
///   kDirect: IMG_BEGIN color^64 IMG_END EOS  (no-reasoning baseline)
enum class TraceStyle : std::uint8_t { kXCoT = 0, kDirect = 1 };

std::string_view style_name(TraceStyle style) noexcept;
TraceStyle style_from_name(std::string_view name);

enum class FailureReason : std::uint8_t {
  kUnexpectedKind,
  kWrongImageLength,
  kMissingDelimiter,
  kTrailingTokens,
  kTruncated,
};

std::string_view reason_name(FailureReason r) noexcept;

struct ValidationResult {
  bool accepted = false;
  std::optional<std::size_t> failure_position;
  std::optional<FailureReason> failure_reason;

  static ValidationResult accept() { return {true, std::nullopt, std::nullopt}; }
  static ValidationResult reject(std::size_t pos, FailureReason why) { return {false, pos, why}; }
};

/// Incremental recognizer for the trace grammar. One token per feed(),
/// O(1) per step, no lookahead.
class TraceAutomaton {
 public:
  explicit TraceAutomaton(TraceStyle style = TraceStyle::kXCoT);

  /// Consumes a token. Returns the failure reason if no accepted trace
  /// has the current prefix; the automaton is then stuck.
  std::optional<FailureReason> feed(TokenId t);
  /// Would feed(t) succeed?
  bool allows(TokenId t) const;
  bool accepting() const noexcept;
  bool failed() const noexcept { return failed_; }
  /// Length of the shortest token sequence that completes the trace.
  std::size_t min_remaining() const noexcept;

 private:
  enum class State : std::uint8_t {
    kOpen,
    kThinkAFirst,
    kThinkA,
    kFocus,
    kFocusEnd,
    kThinkBFirst,
    kThinkB,
    kResultBegin,
    kResult,
    kResultEnd,
    kEos,
    kDone,
  };

  std::optional<FailureReason> check(TokenId t) const;

  State state_;
  int pixels_ = 0;
  bool failed_ = false;
};

ValidationResult validate(std::span<const TokenId> tokens, TraceStyle style = TraceStyle::kXCoT);

/// Length of the longest prefix the grammar can still extend. Diagnostic
/// only; rewards never use it.
std::size_t valid_prefix_length(std::span<const TokenId> tokens,
                                TraceStyle style = TraceStyle::kXCoT);

class TraceSegments {
 public:
  /// Throws Error when a thinking span is empty or contains a non-word token.
  TraceSegments(TokenSeq think_a, GridImage focus, TokenSeq think_b, GridImage result);

  const TokenSeq& think_a() const noexcept { return think_a_; }
  const GridImage& focus_image() const noexcept { return focus_; }
  const TokenSeq& think_b() const noexcept { return think_b_; }
  const GridImage& result_image() const noexcept { return result_; }

  bool operator==(const TraceSegments&) const = default;

 private:
  TokenSeq think_a_;
  GridImage focus_;
  TokenSeq think_b_;
  GridImage result_;
};

TokenSeq image_tokens(const GridImage& img);
/// Precondition: exactly 64 image-color tokens.
GridImage image_from_tokens(std::span<const TokenId> tokens);

/// Throws ParseOnInvalid unless validate(tokens) accepts.
TraceSegments parse(std::span<const TokenId> tokens);
TokenSeq serialize(const TraceSegments& segments);

/// Baseline grammar helpers.
GridImage parse_direct(std::span<const TokenId> tokens);
TokenSeq serialize_direct(const GridImage& result);

/// Extracts the result image under either grammar; nullopt if the trace is invalid.
std::optional<GridImage> result_image(std::span<const TokenId> tokens, TraceStyle style);

enum class Mutation : std::uint8_t {
  kDeleteStructural,
  kSubstituteStructural,  // structural token replaced by a text word
  kTruncate,              // keep tokens [0, position)
  kInsertImageToken,      // extra color inserted before `position`
};

/// Test support: applies one mutation and returns a stream that the
/// grammar must reject. For delete/substitute, `position` must index a
/// structural token.
TokenSeq mutate_for_test(std::span<const TokenId> tokens, Mutation kind, std::size_t position,
                         Rng& rng);

}  // namespace xcot::format
