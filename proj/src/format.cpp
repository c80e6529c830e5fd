#include "xcot/format.hpp"

#include <algorithm>
#include <string>

#include "xcot/error.hpp"

namespace xcot::format {

std::string_view style_name(TraceStyle style) noexcept {
  return style == TraceStyle::kXCoT ? "xcot" : "direct";
}

TraceStyle style_from_name(std::string_view name) {
  if (name == "xcot") return TraceStyle::kXCoT;
  if (name == "direct") return TraceStyle::kDirect;
  throw ConfigError("unknown trace style '" + std::string(name) + "'");
}

std::string_view reason_name(FailureReason r) noexcept {
  switch (r) {
    case FailureReason::kUnexpectedKind: return "UnexpectedKind";
    case FailureReason::kWrongImageLength: return "WrongImageLength";
    case FailureReason::kMissingDelimiter: return "MissingDelimiter";
    case FailureReason::kTrailingTokens: return "TrailingTokens";
    case FailureReason::kTruncated: return "Truncated";
  }
  return "?";
}

TraceAutomaton::TraceAutomaton(TraceStyle style)
    : state_(style == TraceStyle::kXCoT ? State::kOpen : State::kResultBegin) {}

std::optional<FailureReason> TraceAutomaton::check(TokenId t) const {
  const auto& v = vocab();
  auto delimiter = [&](Structural s) -> std::optional<FailureReason> {
    if (v.is(t, s)) return std::nullopt;
    return FailureReason::kMissingDelimiter;
  };
  auto image_end = [&]() -> std::optional<FailureReason> {
    if (v.is(t, Structural::kImgEnd)) return std::nullopt;
    return v.is_color(t) ? FailureReason::kWrongImageLength : FailureReason::kMissingDelimiter;
  };
  auto pixel = [&]() -> std::optional<FailureReason> {
    if (v.is_color(t)) return std::nullopt;
    return FailureReason::kWrongImageLength;
  };
  auto word_or = [&](Structural s) -> std::optional<FailureReason> {
    if (v.is_word(t) || v.is(t, s)) return std::nullopt;
    return FailureReason::kUnexpectedKind;
  };
  auto first_word = [&]() -> std::optional<FailureReason> {
    if (v.is_word(t)) return std::nullopt;
    return FailureReason::kUnexpectedKind;
  };

  if (failed_) return FailureReason::kUnexpectedKind;
  switch (state_) {
    case State::kOpen: return delimiter(Structural::kThinkOpen);
    case State::kThinkAFirst: return first_word();
    case State::kThinkA: return word_or(Structural::kImgBegin);
    case State::kFocus: return pixel();
    case State::kFocusEnd: return image_end();
    case State::kThinkBFirst: return first_word();
    case State::kThinkB: return word_or(Structural::kThinkClose);
    case State::kResultBegin: return delimiter(Structural::kImgBegin);
    case State::kResult: return pixel();
    case State::kResultEnd: return image_end();
    case State::kEos: return delimiter(Structural::kEos);
    case State::kDone: return FailureReason::kTrailingTokens;
  }
  return FailureReason::kUnexpectedKind;
}

bool TraceAutomaton::allows(TokenId t) const { return !check(t).has_value(); }

std::size_t TraceAutomaton::min_remaining() const noexcept {
  // result block: IMG_BEGIN color^64 IMG_END EOS
  constexpr std::size_t kResult = 1 + kGridCells + 2;
  // IMG_END word THINK_CLOSE, then the result block
  constexpr std::size_t kAfterFocus = 3 + kResult;
  const auto left = static_cast<std::size_t>(kGridCells - pixels_);
  switch (state_) {
    case State::kOpen: return 3 + kGridCells + kAfterFocus;
    case State::kThinkAFirst: return 2 + kGridCells + kAfterFocus;
    case State::kThinkA: return 1 + kGridCells + kAfterFocus;
    case State::kFocus: return left + kAfterFocus;
    case State::kFocusEnd: return kAfterFocus;
    case State::kThinkBFirst: return kAfterFocus - 1;
    case State::kThinkB: return kResult + 1;
    case State::kResultBegin: return kResult;
    case State::kResult: return left + 2;
    case State::kResultEnd: return 2;
    case State::kEos: return 1;
    case State::kDone: return 0;
  }
  return 0;
}

bool TraceAutomaton::accepting() const noexcept { return !failed_ && state_ == State::kDone; }

std::optional<FailureReason> TraceAutomaton::feed(TokenId t) {
  if (auto why = check(t)) {
    failed_ = true;
    return why;
  }
  const auto& v = vocab();
  switch (state_) {
    case State::kOpen: state_ = State::kThinkAFirst; break;
    case State::kThinkAFirst: state_ = State::kThinkA; break;
    case State::kThinkA:
      if (v.is(t, Structural::kImgBegin)) {
        state_ = State::kFocus;
        pixels_ = 0;
      }
      break;
    case State::kFocus:
      if (++pixels_ == kGridCells) state_ = State::kFocusEnd;
      break;
    case State::kFocusEnd: state_ = State::kThinkBFirst; break;
    case State::kThinkBFirst: state_ = State::kThinkB; break;
    case State::kThinkB:
      if (v.is(t, Structural::kThinkClose)) state_ = State::kResultBegin;
      break;
    case State::kResultBegin:
      state_ = State::kResult;
      pixels_ = 0;
      break;
    case State::kResult:
      if (++pixels_ == kGridCells) state_ = State::kResultEnd;
      break;
    case State::kResultEnd: state_ = State::kEos; break;
    case State::kEos: state_ = State::kDone; break;
    case State::kDone: break;
  }
  return std::nullopt;
}

namespace {

void check_ids(std::span<const TokenId> tokens) {
  const auto size = vocab().size();
  for (auto t : tokens) {
    if (t.value >= size) throw OutOfRange("token " + std::to_string(t.value) + " out of range");
  }
}

}  // namespace

ValidationResult validate(std::span<const TokenId> tokens, TraceStyle style) {
  check_ids(tokens);
  TraceAutomaton fsm(style);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (auto why = fsm.feed(tokens[i])) return ValidationResult::reject(i, *why);
  }
  if (!fsm.accepting()) return ValidationResult::reject(tokens.size(), FailureReason::kTruncated);
  return ValidationResult::accept();
}

std::size_t valid_prefix_length(std::span<const TokenId> tokens, TraceStyle style) {
  auto r = validate(tokens, style);
  return r.accepted ? tokens.size() : *r.failure_position;
}

TraceSegments::TraceSegments(TokenSeq think_a, GridImage focus, TokenSeq think_b,
                             GridImage result)
    : think_a_(std::move(think_a)),
      focus_(focus),
      think_b_(std::move(think_b)),
      result_(result) {
  const auto& v = vocab();
  auto all_words = [&](const TokenSeq& s) {
    return std::all_of(s.begin(), s.end(), [&](TokenId t) { return v.is_word(t); });
  };
  if (think_a_.empty() || think_b_.empty()) throw Error("thinking span must be non-empty");
  if (!all_words(think_a_) || !all_words(think_b_)) {
    throw Error("thinking span may only contain text words");
  }
  for (auto c : focus_.cells) {
    if (c >= kNumColors) throw OutOfRange("focus image palette index");
  }
  for (auto c : result_.cells) {
    if (c >= kNumColors) throw OutOfRange("result image palette index");
  }
}

TokenSeq image_tokens(const GridImage& img) {
  TokenSeq out;
  out.reserve(kGridCells);
  for (auto c : img.cells) out.push_back(vocab().color(c));
  return out;
}

GridImage image_from_tokens(std::span<const TokenId> tokens) {
  if (tokens.size() != kGridCells) throw Error("image block must have 64 tokens");
  GridImage img;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!vocab().is_color(tokens[i])) throw Error("non-color token inside image block");
    img.cells[i] = vocab().color_of(tokens[i]);
  }
  return img;
}

TraceSegments parse(std::span<const TokenId> tokens) {
  auto r = validate(tokens);
  if (!r.accepted) {
    throw ParseOnInvalid("trace rejected at token " + std::to_string(*r.failure_position) + ": " +
                         std::string(reason_name(*r.failure_reason)));
  }
  const auto& v = vocab();
  // THINK_OPEN a+ IMG_BEGIN img IMG_END b+ THINK_CLOSE IMG_BEGIN img IMG_END EOS
  std::size_t i = 1;
  std::size_t a_end = i;
  while (v.is_word(tokens[a_end])) ++a_end;
  TokenSeq think_a(tokens.begin() + i, tokens.begin() + a_end);
  auto focus = image_from_tokens(tokens.subspan(a_end + 1, kGridCells));
  std::size_t b_begin = a_end + 1 + kGridCells + 1;
  std::size_t b_end = b_begin;
  while (v.is_word(tokens[b_end])) ++b_end;
  TokenSeq think_b(tokens.begin() + b_begin, tokens.begin() + b_end);
  auto result = image_from_tokens(tokens.subspan(b_end + 2, kGridCells));
  return TraceSegments(std::move(think_a), focus, std::move(think_b), result);
}

TokenSeq serialize(const TraceSegments& s) {
  const auto& v = vocab();
  TokenSeq out;
  out.reserve(s.think_a().size() + s.think_b().size() + 2 * kGridCells + 7);
  auto append_image = [&](const GridImage& img) {
    out.push_back(v.structural(Structural::kImgBegin));
    for (auto c : img.cells) out.push_back(v.color(c));
    out.push_back(v.structural(Structural::kImgEnd));
  };
  out.push_back(v.structural(Structural::kThinkOpen));
  out.insert(out.end(), s.think_a().begin(), s.think_a().end());
  append_image(s.focus_image());
  out.insert(out.end(), s.think_b().begin(), s.think_b().end());
  out.push_back(v.structural(Structural::kThinkClose));
  append_image(s.result_image());
  out.push_back(v.structural(Structural::kEos));
  return out;
}

GridImage parse_direct(std::span<const TokenId> tokens) {
  auto r = validate(tokens, TraceStyle::kDirect);
  if (!r.accepted) throw ParseOnInvalid("direct trace rejected");
  return image_from_tokens(tokens.subspan(1, kGridCells));
}

TokenSeq serialize_direct(const GridImage& result) {
  const auto& v = vocab();
  TokenSeq out;
  out.reserve(kGridCells + 3);
  out.push_back(v.structural(Structural::kImgBegin));
  for (auto c : result.cells) out.push_back(v.color(c));
  out.push_back(v.structural(Structural::kImgEnd));
  out.push_back(v.structural(Structural::kEos));
  return out;
}

std::optional<GridImage> result_image(std::span<const TokenId> tokens, TraceStyle style) {
  if (!validate(tokens, style).accepted) return std::nullopt;
  if (style == TraceStyle::kDirect) return parse_direct(tokens);
  return parse(tokens).result_image();
}

TokenSeq mutate_for_test(std::span<const TokenId> tokens, Mutation kind, std::size_t position,
                         Rng& rng) {
  const auto& v = vocab();
  TokenSeq out(tokens.begin(), tokens.end());
  auto require_structural = [&]() {
    if (position >= out.size() || out[position].value >= kNumStructural) {
      throw Error("mutation position must index a structural token");
    }
  };
  switch (kind) {
    case Mutation::kDeleteStructural:
      require_structural();
      out.erase(out.begin() + static_cast<std::ptrdiff_t>(position));
      break;
    case Mutation::kSubstituteStructural:
      require_structural();
      out[position] = TokenId{v.first_word() + rng.below(v.num_words())};
      break;
    case Mutation::kTruncate:
      out.resize(std::min(position, out.size()));
      break;
    case Mutation::kInsertImageToken:
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(std::min(position, out.size())),
                 v.color(static_cast<std::uint8_t>(rng.below(kNumColors))));
      break;
  }
  return out;
}

}  // namespace xcot::format
