#include "xcot/rewards.hpp"

#include <cmath>
#include <cstdlib>

#include "xcot/error.hpp"

namespace xcot::rewards {

using world::Cell;
using world::kGlyphSide;

void RewardWeights::check() const {
  for (double w : {format, subject, text}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("reward weights must be finite and >= 0");
  }
  if (format + subject + text <= 0.0) throw ConfigError("at least one reward weight must be > 0");
}

SubjectMatch match_subject(const GridImage& image, const world::SceneSpec& reference) {
  const auto& g = world::glyph(reference.glyph_id);
  const int pop = g.popcount();
  int best = 0;
  Cell best_at{};
  for (int r0 = 0; r0 + kGlyphSide <= kGridSide; ++r0) {
    for (int c0 = 0; c0 + kGlyphSide <= kGridSide; ++c0) {
      int hits = 0;
      for (int r = 0; r < kGlyphSide; ++r) {
        for (int c = 0; c < kGlyphSide; ++c) {
          if (g.cell(r, c) && image.at(r0 + r, c0 + c) == reference.subject_color) ++hits;
        }
      }
      if (hits > best) {
        best = hits;
        best_at = {r0, c0};
      }
    }
  }
  SubjectMatch m;
  if (best > 0) {
    m.score = static_cast<double>(best) / pop;
    m.placement = best_at;
  }
  return m;
}

double reward_format(std::span<const TokenId> trace, format::TraceStyle style) {
  return format::validate(trace, style).accepted ? 1.0 : 0.0;
}

double reward_subject(const GridImage& result, const world::SceneSpec& reference) {
  return match_subject(result, reference).score;
}

double reward_text(const GridImage& result, const world::PromptSpec& prompt,
                   const world::SceneSpec& reference) {
  const auto match = match_subject(result, reference);
  const auto& g = world::glyph(reference.glyph_id);
  double pos_score = 0.0;
  bool in_footprint[kGridSide][kGridSide] = {};
  if (match.placement) {
    const auto target = prompt.target_anchor.top_left();
    const int dist = std::abs(match.placement->row - target.row) +
                     std::abs(match.placement->col - target.col);
    pos_score = dist == 0 ? 1.0 : std::max(0.0, 1.0 - dist / 6.0);
    for (int r = 0; r < kGlyphSide; ++r) {
      for (int c = 0; c < kGlyphSide; ++c) {
        if (g.cell(r, c)) in_footprint[match.placement->row + r][match.placement->col + c] = true;
      }
    }
  }
  int outside = 0;
  int agree = 0;
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c < kGridSide; ++c) {
      if (in_footprint[r][c]) continue;
      ++outside;
      if (result.at(r, c) == prompt.target_background) ++agree;
    }
  }
  const double bg_score = static_cast<double>(agree) / outside;
  return (pos_score + bg_score) / 2.0;
}

namespace {

// Last IMG_BEGIN followed by 64 color tokens; only used when gating is off.
std::optional<GridImage> lenient_result(std::span<const TokenId> trace) {
  const auto& v = vocab();
  for (std::size_t i = trace.size(); i-- > 0;) {
    if (!v.is(trace[i], Structural::kImgBegin)) continue;
    if (i + 1 + kGridCells > trace.size()) continue;
    auto block = trace.subspan(i + 1, kGridCells);
    bool ok = true;
    for (auto t : block) ok = ok && v.is_color(t);
    if (ok) return format::image_from_tokens(block);
  }
  return std::nullopt;
}

}  // namespace

RewardBreakdown score_trace(std::span<const TokenId> trace, const world::SceneSpec& reference,
                            const world::PromptSpec& prompt, const RewardWeights& weights,
                            format::TraceStyle style) {
  RewardBreakdown b;
  b.r_f = reward_format(trace, style);
  std::optional<GridImage> result;
  if (b.r_f == 1.0) {
    result = format::result_image(trace, style);
  } else if (!weights.gating) {
    result = lenient_result(trace);
  }
  if (result) {
    auto match = match_subject(*result, reference);
    b.r_i = match.score;
    b.best_match_anchor = match.placement;
    b.r_t = reward_text(*result, prompt, reference);
  }
  b.total = weights.format * b.r_f + weights.subject * b.r_i + weights.text * b.r_t;
  return b;
}

nlohmann::json to_json(const RewardBreakdown& b) {
  nlohmann::json j{{"r_f", b.r_f}, {"r_i", b.r_i}, {"r_t", b.r_t}, {"total", b.total}};
  if (b.best_match_anchor) {
    j["best_match_anchor"] = {b.best_match_anchor->row, b.best_match_anchor->col};
  } else {
    j["best_match_anchor"] = nullptr;
  }
  return j;
}

}  // namespace xcot::rewards
