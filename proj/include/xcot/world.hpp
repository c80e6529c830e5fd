#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xcot/format.hpp"
#include "xcot/grid.hpp"
#include "xcot/vocab.hpp"

namespace xcot::world {

inline constexpr int kNumGlyphs = 16;
inline constexpr int kNumAnchors = 9;
inline constexpr int kGlyphSide = 3;
inline constexpr int kNumPlacements = (kGridSide - kGlyphSide + 1) * (kGridSide - kGlyphSide + 1);
inline constexpr std::uint8_t kNeutral = 0;
inline constexpr std::uint8_t kFirstSubjectColor = 4;
inline constexpr int kNumSubjectColors = 4;
inline constexpr int kNumBackgrounds = 4;

struct Glyph {
  int id = 0;
  std::uint16_t mask = 0;  // bit r*3+c set => cell (r, c) belongs to the subject

  bool cell(int r, int c) const { return (mask >> (r * kGlyphSide + c)) & 1u; }
  int popcount() const;
};

const Glyph& glyph(int id);

struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

/// Named anchor index in [0, 9), row-major over {0, 2, 5} x {0, 2, 5}.
struct Anchor {
  int index = 0;
  Cell top_left() const;
  std::string_view name() const { return kPositionWords[static_cast<std::size_t>(index)]; }
  bool operator==(const Anchor&) const = default;
};

inline constexpr Anchor kCenter{4};

struct SceneSpec {
  int glyph_id = 0;
  std::uint8_t subject_color = kFirstSubjectColor;  // {4..7}
  std::uint8_t background_color = 0;                // {0..3}
  Anchor anchor;

  /// Throws Error on out-of-domain fields.
  void check() const;
  bool operator==(const SceneSpec&) const = default;
};

struct PromptSpec {
  Anchor target_anchor;
  std::uint8_t target_background = 0;

  void check() const;
  bool operator==(const PromptSpec&) const = default;
};

struct Combo {
  int glyph_id = 0;
  std::uint8_t color = kFirstSubjectColor;
  bool operator==(const Combo&) const = default;
};

enum class Split : std::uint8_t { kTrain, kEval };
std::string_view split_name(Split s) noexcept;

/// 56 train combos and 8 held-out eval combos; every held-out glyph and
/// color still occurs in training under other pairings.
std::span<const Combo> combos(Split split);
bool is_eval_combo(Combo c) noexcept;

GridImage render(const SceneSpec& scene);
GridImage make_focus(int glyph_id, std::uint8_t subject_color);

TokenSeq verbalize_prompt(const PromptSpec& prompt);
TokenSeq verbalize_understanding(const SceneSpec& scene);
TokenSeq verbalize_plan(const PromptSpec& prompt, const SceneSpec& scene);

std::optional<PromptSpec> parse_prompt(std::span<const TokenId> tokens);
std::optional<SceneSpec> parse_understanding(std::span<const TokenId> tokens);
/// Recovers (target anchor, target background) from a plan.
std::optional<PromptSpec> parse_plan(std::span<const TokenId> tokens);

struct XCoTSample {
  TokenSeq prompt_tokens;
  PromptSpec prompt;
  GridImage reference_image;
  SceneSpec reference_scene;
  TokenSeq think_a;
  GridImage focus_image;
  TokenSeq think_b;
  GridImage result_image;
  Split split = Split::kTrain;

  format::TraceSegments segments() const;
  TokenSeq trace() const;
  SceneSpec target_scene() const;
};

/// Builds the sample that the data engine would emit for these latents.
/// [BOS, prompt, SEP, IMG_BEGIN, reference, IMG_END, GEN]; the trace follows.
TokenSeq conditioning_context(std::span<const TokenId> prompt_tokens, const GridImage& reference);
TokenSeq conditioning_context(const XCoTSample& s);

XCoTSample make_sample(const SceneSpec& reference, const PromptSpec& prompt, Split split);
XCoTSample synth_sample(std::uint64_t rng_seed, Split split);

nlohmann::json to_json(const XCoTSample& s);
XCoTSample sample_from_json(const nlohmann::json& j, Split split);

struct DatasetConfig {
  std::size_t n_train = 20000;
  std::size_t n_eval = 500;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;
};

struct DatasetFiles {
  std::filesystem::path train;
  std::filesystem::path eval;
  std::filesystem::path train_manifest;
  std::filesystem::path eval_manifest;
  std::string train_hash;
  std::string eval_hash;
};

std::uint64_t record_seed(std::uint64_t seed, Split split, std::size_t index);

/// Writes train.jsonl / eval.jsonl and a manifest per split.
DatasetFiles build_dataset(const DatasetConfig& config);

struct Dataset {
  std::vector<XCoTSample> samples;
  nlohmann::json manifest;
};

/// Loads a split and verifies its file hash against the manifest.
Dataset load_split(const std::filesystem::path& dir, Split split);

/// Binary PPM (P6) of the images side by side, one black column between
/// them, each cell `scale` x `scale` pixels.
void write_ppm(const std::filesystem::path& path, std::span<const GridImage> images, int scale = 1);
std::array<std::uint8_t, 3> palette_rgb(std::uint8_t color);

}  // namespace xcot::world
