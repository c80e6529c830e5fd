#include "xcot/world.hpp"

#include <bit>
#include <fstream>

#include "xcot/error.hpp"
#include "xcot/util.hpp"

namespace xcot::world {

namespace {

// Drawn once by rejection sampling (>= 5 cells, pairwise distinct) and frozen.
constexpr std::array<std::uint16_t, kNumGlyphs> kGlyphMasks = {
    0b100110011, 0b010111100, 0b101011110, 0b101011010, 0b101101011, 0b110001101,
    0b110001011, 0b111101101, 0b111010010, 0b111111100, 0b011101101, 0b111111101,
    0b100111010, 0b110000111, 0b101100111, 0b111100011,
};

const std::array<Glyph, kNumGlyphs>& glyph_table() {
  static const auto table = [] {
    std::array<Glyph, kNumGlyphs> t{};
    for (int i = 0; i < kNumGlyphs; ++i) t[static_cast<std::size_t>(i)] = Glyph{i, kGlyphMasks[static_cast<std::size_t>(i)]};
    return t;
  }();
  return table;
}

constexpr std::array<int, 3> kAnchorOffsets = {0, 2, 5};

struct ComboTable {
  std::vector<Combo> train;
  std::vector<Combo> eval;
};

const ComboTable& combo_table() {
  static const ComboTable table = [] {
    ComboTable t;
    for (int g = 0; g < kNumGlyphs; ++g) {
      for (int c = 0; c < kNumSubjectColors; ++c) {
        Combo combo{g, static_cast<std::uint8_t>(kFirstSubjectColor + c)};
        (is_eval_combo(combo) ? t.eval : t.train).push_back(combo);
      }
    }
    return t;
  }();
  return table;
}

std::string_view color_word(std::uint8_t c) { return kColorWords[c]; }
std::string_view subject_word(int g) { return kSubjectWords[static_cast<std::size_t>(g)]; }

template <std::size_t N>
std::optional<int> find_word(const std::array<std::string_view, N>& group, TokenId t) {
  if (!vocab().is_word(t)) return std::nullopt;
  auto w = vocab().word_of(t);
  for (std::size_t i = 0; i < N; ++i) {
    if (group[i] == w) return static_cast<int>(i);
  }
  return std::nullopt;
}

bool is_word(TokenId t, std::string_view w) {
  return vocab().is_word(t) && vocab().word_of(t) == w;
}

nlohmann::json ids(std::span<const TokenId> tokens) {
  auto arr = nlohmann::json::array();
  for (auto t : tokens) arr.push_back(t.value);
  return arr;
}

TokenSeq tokens_from(const nlohmann::json& arr) {
  TokenSeq out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    auto id = v.get<std::uint32_t>();
    if (id >= vocab().size()) throw OutOfRange("token id " + std::to_string(id) + " in dataset");
    out.emplace_back(id);
  }
  return out;
}

}  // namespace

int Glyph::popcount() const { return std::popcount(static_cast<unsigned>(mask)); }

const Glyph& glyph(int id) {
  if (id < 0 || id >= kNumGlyphs) throw OutOfRange("glyph id " + std::to_string(id));
  return glyph_table()[static_cast<std::size_t>(id)];
}

Cell Anchor::top_left() const {
  return {kAnchorOffsets[static_cast<std::size_t>(index / 3)],
          kAnchorOffsets[static_cast<std::size_t>(index % 3)]};
}

void SceneSpec::check() const {
  if (glyph_id < 0 || glyph_id >= kNumGlyphs) throw Error("scene glyph out of range");
  if (subject_color < kFirstSubjectColor || subject_color >= kNumColors) {
    throw Error("scene subject color must be in [4, 8)");
  }
  if (background_color >= kNumBackgrounds) throw Error("scene background must be in [0, 4)");
  if (anchor.index < 0 || anchor.index >= kNumAnchors) throw Error("scene anchor out of range");
}

void PromptSpec::check() const {
  if (target_anchor.index < 0 || target_anchor.index >= kNumAnchors) {
    throw Error("prompt anchor out of range");
  }
  if (target_background >= kNumBackgrounds) throw Error("prompt background must be in [0, 4)");
}

std::string_view split_name(Split s) noexcept { return s == Split::kTrain ? "train" : "eval"; }

bool is_eval_combo(Combo c) noexcept {
  // Glyph 2k is held out in color 4 + k % 4.
  return c.glyph_id % 2 == 0 && c.color == kFirstSubjectColor + (c.glyph_id / 2) % 4;
}

std::span<const Combo> combos(Split split) {
  const auto& t = combo_table();
  return split == Split::kTrain ? std::span<const Combo>(t.train) : std::span<const Combo>(t.eval);
}

GridImage render(const SceneSpec& scene) {
  scene.check();
  auto img = GridImage::filled(scene.background_color);
  const auto& g = glyph(scene.glyph_id);
  auto origin = scene.anchor.top_left();
  for (int r = 0; r < kGlyphSide; ++r) {
    for (int c = 0; c < kGlyphSide; ++c) {
      if (g.cell(r, c)) img.at(origin.row + r, origin.col + c) = scene.subject_color;
    }
  }
  return img;
}

GridImage make_focus(int glyph_id, std::uint8_t subject_color) {
  return render(SceneSpec{glyph_id, subject_color, kNeutral, kCenter});
}

TokenSeq verbalize_prompt(const PromptSpec& p) {
  p.check();
  return vocab().encode_text({"put", "the", "subject", "at", p.target_anchor.name(), "on",
                              kBackgroundWords[p.target_background]});
}

TokenSeq verbalize_understanding(const SceneSpec& s) {
  s.check();
  return vocab().encode_text({color_word(s.subject_color), subject_word(s.glyph_id), "at",
                              s.anchor.name(), "on", color_word(s.background_color),
                              "background"});
}

TokenSeq verbalize_plan(const PromptSpec& p, const SceneSpec& s) {
  p.check();
  s.check();
  return vocab().encode_text({"place", color_word(s.subject_color), subject_word(s.glyph_id), "at",
                              p.target_anchor.name(), "on", color_word(p.target_background),
                              "background"});
}

std::optional<PromptSpec> parse_prompt(std::span<const TokenId> t) {
  if (t.size() != 7 || !is_word(t[0], "put") || !is_word(t[1], "the") ||
      !is_word(t[2], "subject") || !is_word(t[3], "at") || !is_word(t[5], "on")) {
    return std::nullopt;
  }
  auto anchor = find_word(kPositionWords, t[4]);
  auto bg = find_word(kBackgroundWords, t[6]);
  if (!anchor || !bg) return std::nullopt;
  return PromptSpec{Anchor{*anchor}, static_cast<std::uint8_t>(*bg)};
}

std::optional<SceneSpec> parse_understanding(std::span<const TokenId> t) {
  if (t.size() != 7 || !is_word(t[2], "at") || !is_word(t[4], "on") ||
      !is_word(t[6], "background")) {
    return std::nullopt;
  }
  auto color = find_word(kColorWords, t[0]);
  auto subject = find_word(kSubjectWords, t[1]);
  auto anchor = find_word(kPositionWords, t[3]);
  auto bg = find_word(kColorWords, t[5]);
  if (!color || !subject || !anchor || !bg) return std::nullopt;
  SceneSpec s{*subject, static_cast<std::uint8_t>(*color), static_cast<std::uint8_t>(*bg),
              Anchor{*anchor}};
  try {
    s.check();
  } catch (const Error&) {
    return std::nullopt;
  }
  return s;
}

std::optional<PromptSpec> parse_plan(std::span<const TokenId> t) {
  if (t.size() != 8 || !is_word(t[0], "place") || !is_word(t[3], "at") ||
      !is_word(t[5], "on") || !is_word(t[7], "background")) {
    return std::nullopt;
  }
  auto anchor = find_word(kPositionWords, t[4]);
  auto bg = find_word(kColorWords, t[6]);
  if (!anchor || !bg || *bg >= kNumBackgrounds) return std::nullopt;
  return PromptSpec{Anchor{*anchor}, static_cast<std::uint8_t>(*bg)};
}

format::TraceSegments XCoTSample::segments() const {
  return format::TraceSegments(think_a, focus_image, think_b, result_image);
}

TokenSeq XCoTSample::trace() const { return format::serialize(segments()); }

SceneSpec XCoTSample::target_scene() const {
  return SceneSpec{reference_scene.glyph_id, reference_scene.subject_color,
                   prompt.target_background, prompt.target_anchor};
}

TokenSeq conditioning_context(std::span<const TokenId> prompt_tokens, const GridImage& reference) {
  const auto& v = vocab();
  TokenSeq out;
  out.reserve(prompt_tokens.size() + kGridCells + 5);
  out.push_back(v.structural(Structural::kBos));
  out.insert(out.end(), prompt_tokens.begin(), prompt_tokens.end());
  out.push_back(v.structural(Structural::kSep));
  out.push_back(v.structural(Structural::kImgBegin));
  for (auto c : reference.cells) out.push_back(v.color(c));
  out.push_back(v.structural(Structural::kImgEnd));
  out.push_back(v.structural(Structural::kGen));
  return out;
}

TokenSeq conditioning_context(const XCoTSample& s) {
  return conditioning_context(s.prompt_tokens, s.reference_image);
}

XCoTSample make_sample(const SceneSpec& reference, const PromptSpec& prompt, Split split) {
  XCoTSample s;
  s.prompt = prompt;
  s.prompt_tokens = verbalize_prompt(prompt);
  s.reference_scene = reference;
  s.reference_image = render(reference);
  s.think_a = verbalize_understanding(reference);
  s.focus_image = make_focus(reference.glyph_id, reference.subject_color);
  s.think_b = verbalize_plan(prompt, reference);
  s.result_image = render(s.target_scene());
  s.split = split;
  return s;
}

XCoTSample synth_sample(std::uint64_t rng_seed, Split split) {
  Rng rng(rng_seed);
  auto pool = combos(split);
  auto combo = pool[rng.below(static_cast<std::uint32_t>(pool.size()))];
  SceneSpec ref{combo.glyph_id, combo.color,
                static_cast<std::uint8_t>(rng.below(kNumBackgrounds)),
                Anchor{static_cast<int>(rng.below(kNumAnchors))}};
  PromptSpec prompt;
  do {
    prompt.target_anchor = Anchor{static_cast<int>(rng.below(kNumAnchors))};
    prompt.target_background = static_cast<std::uint8_t>(rng.below(kNumBackgrounds));
  } while (prompt.target_anchor == ref.anchor && prompt.target_background == ref.background_color);
  return make_sample(ref, prompt, split);
}

nlohmann::json to_json(const XCoTSample& s) {
  const auto& sc = s.reference_scene;
  return nlohmann::json{
      {"prompt", ids(s.prompt_tokens)},
      {"ref_image", ids(format::image_tokens(s.reference_image))},
      {"scene",
       {{"glyph", sc.glyph_id},
        {"color", sc.subject_color},
        {"background", sc.background_color},
        {"anchor", sc.anchor.index}}},
      {"think_a", ids(s.think_a)},
      {"focus", ids(format::image_tokens(s.focus_image))},
      {"think_b", ids(s.think_b)},
      {"result", ids(format::image_tokens(s.result_image))},
  };
}

XCoTSample sample_from_json(const nlohmann::json& j, Split split) {
  XCoTSample s;
  s.split = split;
  s.prompt_tokens = tokens_from(j.at("prompt"));
  auto prompt = parse_prompt(s.prompt_tokens);
  if (!prompt) throw Error("dataset record has an unparseable prompt");
  s.prompt = *prompt;
  const auto& sc = j.at("scene");
  s.reference_scene = SceneSpec{sc.at("glyph").get<int>(), sc.at("color").get<std::uint8_t>(),
                                sc.at("background").get<std::uint8_t>(),
                                Anchor{sc.at("anchor").get<int>()}};
  s.reference_scene.check();
  s.reference_image = format::image_from_tokens(tokens_from(j.at("ref_image")));
  s.think_a = tokens_from(j.at("think_a"));
  s.focus_image = format::image_from_tokens(tokens_from(j.at("focus")));
  s.think_b = tokens_from(j.at("think_b"));
  s.result_image = format::image_from_tokens(tokens_from(j.at("result")));
  return s;
}

std::uint64_t record_seed(std::uint64_t seed, Split split, std::size_t index) {
  return derive_seed(seed, static_cast<std::uint64_t>(split), index);
}

namespace {

std::filesystem::path split_file(const std::filesystem::path& dir, Split s) {
  return dir / (std::string(split_name(s)) + ".jsonl");
}

std::filesystem::path manifest_file(const std::filesystem::path& dir, Split s) {
  return dir / (std::string(split_name(s)) + ".manifest.json");
}

std::string write_split(const DatasetConfig& cfg, Split split, std::size_t n) {
  auto path = split_file(cfg.out_dir, split);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (std::size_t i = 0; i < n; ++i) {
      out << to_json(synth_sample(record_seed(cfg.seed, split, i), split)).dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
  }
  auto hash = hash_file(path);
  auto combo_list = nlohmann::json::array();
  for (auto c : combos(split)) combo_list.push_back({c.glyph_id, c.color});
  nlohmann::json manifest{{"n", n},
                          {"seed", cfg.seed},
                          {"vocab_hash", vocab().hash()},
                          {"split", split_name(split)},
                          {"file", path.filename().string()},
                          {"hash", hash},
                          {"combos", combo_list}};
  auto mpath = manifest_file(cfg.out_dir, split);
  std::ofstream m(mpath, std::ios::binary | std::ios::trunc);
  if (!m) throw IoError("cannot write " + mpath.string());
  m << manifest.dump(2) << '\n';
  return hash;
}

}  // namespace

DatasetFiles build_dataset(const DatasetConfig& cfg) {
  if (cfg.out_dir.empty()) throw IoError("dataset output directory not set");
  auto parent = cfg.out_dir.parent_path();
  if (!parent.empty() && !std::filesystem::exists(parent)) {
    throw IoError("parent directory does not exist: " + parent.string());
  }
  std::error_code ec;
  std::filesystem::create_directory(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create " + cfg.out_dir.string() + ": " + ec.message());
  DatasetFiles files;
  files.train_hash = write_split(cfg, Split::kTrain, cfg.n_train);
  files.eval_hash = write_split(cfg, Split::kEval, cfg.n_eval);
  files.train = split_file(cfg.out_dir, Split::kTrain);
  files.eval = split_file(cfg.out_dir, Split::kEval);
  files.train_manifest = manifest_file(cfg.out_dir, Split::kTrain);
  files.eval_manifest = manifest_file(cfg.out_dir, Split::kEval);
  return files;
}

Dataset load_split(const std::filesystem::path& dir, Split split) {
  auto mpath = manifest_file(dir, split);
  std::ifstream m(mpath);
  if (!m) throw IoError("cannot open manifest " + mpath.string());
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  auto path = split_file(dir, split);
  auto hash = hash_file(path);
  if (hash != ds.manifest.at("hash").get<std::string>()) {
    throw HashMismatch(path.string() + " does not match its manifest (" + hash + ")");
  }
  if (ds.manifest.at("vocab_hash").get<std::string>() != vocab().hash()) {
    throw HashMismatch("dataset vocabulary differs from this build's vocabulary");
  }
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ds.samples.push_back(sample_from_json(nlohmann::json::parse(line), split));
  }
  return ds;
}

std::array<std::uint8_t, 3> palette_rgb(std::uint8_t color) {
  static constexpr std::array<std::array<std::uint8_t, 3>, kNumColors> kPalette = {{
      {128, 128, 128},  // gray
      {40, 90, 220},    // blue
      {40, 170, 60},    // green
      {235, 210, 60},   // yellow
      {220, 40, 40},    // red
      {245, 140, 20},   // orange
      {150, 60, 190},   // purple
      {250, 250, 250},  // white
  }};
  return kPalette.at(color);
}

void write_ppm(const std::filesystem::path& path, std::span<const GridImage> images, int scale) {
  if (images.empty() || scale < 1) throw Error("write_ppm needs at least one image and scale >= 1");
  const int n = static_cast<int>(images.size());
  const int width = n * kGridSide * scale + (n - 1);
  const int height = kGridSide * scale;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width * height * 3), 0);
  for (int i = 0; i < n; ++i) {
    const int x0 = i * (kGridSide * scale + 1);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < kGridSide * scale; ++x) {
        auto rgb = palette_rgb(images[static_cast<std::size_t>(i)].at(y / scale, x / scale));
        auto off = static_cast<std::size_t>((y * width + x0 + x) * 3);
        pixels[off] = rgb[0];
        pixels[off + 1] = rgb[1];
        pixels[off + 2] = rgb[2];
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace xcot::world
