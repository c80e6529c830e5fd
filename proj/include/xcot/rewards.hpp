#pragma once

#include <optional>
#include <span>

#include <json.hpp>

#include "xcot/format.hpp"
#include "xcot/grid.hpp"
#include "xcot/world.hpp"

namespace xcot::rewards {

struct RewardWeights {
  double format = 1.0;
  double subject = 1.0;
  double text = 1.0;
  bool gating = true;

  /// Throws ConfigError on negative weights or all-zero weights.
  void check() const;
  double max_total() const { return format + subject + text; }
};

/// Best placement of the reference glyph inside an image.
struct SubjectMatch {
  double score = 0.0;                      // matched mask cells / popcount
  std::optional<world::Cell> placement;    // none when nothing matches
};

/// Scans all 36 top-left placements; ties go to the lowest row-major one.
SubjectMatch match_subject(const GridImage& image, const world::SceneSpec& reference);

double reward_format(std::span<const TokenId> trace,
                     format::TraceStyle style = format::TraceStyle::kXCoT);
double reward_subject(const GridImage& result, const world::SceneSpec& reference);
double reward_text(const GridImage& result, const world::PromptSpec& prompt,
                   const world::SceneSpec& reference);

struct RewardBreakdown {
  double r_f = 0.0;
  double r_i = 0.0;
  double r_t = 0.0;
  double total = 0.0;
  std::optional<world::Cell> best_match_anchor;
};

RewardBreakdown score_trace(std::span<const TokenId> trace, const world::SceneSpec& reference,
                            const world::PromptSpec& prompt, const RewardWeights& weights,
                            format::TraceStyle style = format::TraceStyle::kXCoT);

nlohmann::json to_json(const RewardBreakdown& b);

}  // namespace xcot::rewards
