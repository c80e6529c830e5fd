#include <doctest.h>

#include <bit>
#include <set>

#include "test_support.hpp"
#include "xcot/error.hpp"
#include "xcot/format.hpp"
#include "xcot/world.hpp"

using namespace xcot;
using namespace xcot::world;

namespace {

std::vector<SceneSpec> all_scenes() {
  std::vector<SceneSpec> out;
  for (int g = 0; g < kNumGlyphs; ++g)
    for (int c = 0; c < kNumSubjectColors; ++c)
      for (int b = 0; b < kNumBackgrounds; ++b)
        for (int a = 0; a < kNumAnchors; ++a)
          out.push_back({g, static_cast<std::uint8_t>(kFirstSubjectColor + c), static_cast<std::uint8_t>(b),
                         Anchor{a}});
  return out;
}

// Footprint of a glyph at an anchor, computed from the mask bits directly.
std::set<int> footprint(int glyph_id, Anchor a) {
  static const int offsets[3] = {0, 2, 5};
  const int r0 = offsets[a.index / 3], c0 = offsets[a.index % 3];
  std::set<int> cells;
  for (int bit = 0; bit < 9; ++bit) {
    if ((glyph(glyph_id).mask >> bit) & 1u) cells.insert((r0 + bit / 3) * 8 + c0 + bit % 3);
  }
  return cells;
}

std::string words(const TokenSeq& t) { return vocab().decode(t); }

}  // namespace

TEST_SUITE("world") {

TEST_CASE("glyph table invariants") {
  std::set<std::uint16_t> masks;
  for (int g = 0; g < kNumGlyphs; ++g) {
    CHECK(glyph(g).id == g);
    CHECK(glyph(g).popcount() == std::popcount(glyph(g).mask));
    CHECK(glyph(g).popcount() >= 5);
    CHECK(glyph(g).mask < (1u << 9));
    masks.insert(glyph(g).mask);
  }
  CHECK(masks.size() == 16);
}

TEST_CASE("anchors map onto the {0,2,5} lattice and keep glyphs inside the grid") {
  for (int a = 0; a < 9; ++a) {
    const auto tl = Anchor{a}.top_left();
    CHECK(tl.row == std::array{0, 2, 5}[a / 3]);
    CHECK(tl.col == std::array{0, 2, 5}[a % 3]);
    CHECK(tl.row + 3 <= 8);
    CHECK(tl.col + 3 <= 8);
  }
  CHECK(kCenter.top_left() == Cell{2, 2});
  CHECK(Anchor{0}.name() == "top-left");
}

TEST_CASE("render conservation and cell placement for every scene") {
  for (const auto& s : all_scenes()) {
    const auto img = render(s);
    const auto fp = footprint(s.glyph_id, s.anchor);
    int subject = 0;
    for (int i = 0; i < 64; ++i) {
      if (fp.count(i)) {
        CHECK(img.cells[i] == s.subject_color);
        ++subject;
      } else {
        CHECK(img.cells[i] == s.background_color);
      }
    }
    CHECK(subject == glyph(s.glyph_id).popcount());
    CHECK(render(s) == img);
  }
}

TEST_CASE("scenes differing only in anchor differ exactly on the two footprints") {
  for (int g = 0; g < kNumGlyphs; ++g) {
    for (int a = 0; a < 9; ++a) {
      for (int b = 0; b < 9; ++b) {
        const SceneSpec s1{g, 5, 1, Anchor{a}}, s2{g, 5, 1, Anchor{b}};
        const auto i1 = render(s1), i2 = render(s2);
        const auto f1 = footprint(g, Anchor{a}), f2 = footprint(g, Anchor{b});
        for (int i = 0; i < 64; ++i) {
          const bool expect_diff = (f1.count(i) != 0) != (f2.count(i) != 0);
          CHECK((i1.cells[i] != i2.cells[i]) == expect_diff);
        }
      }
    }
  }
}

TEST_CASE("focus image is the centered render on the neutral background") {
  for (int g = 0; g < kNumGlyphs; ++g) {
    for (std::uint8_t c = 4; c < 8; ++c) {
      const auto f = make_focus(g, c);
      CHECK(f == render(SceneSpec{g, c, kNeutral, kCenter}));
      int non_neutral = 0;
      for (auto v : f.cells) non_neutral += v != kNeutral;
      CHECK(non_neutral == glyph(g).popcount());
      CHECK(make_focus(g, c) == f);
    }
  }
}

TEST_CASE("scene validation") {
  CHECK_THROWS_AS((SceneSpec{16, 4, 0, Anchor{0}}.check()), Error);
  CHECK_THROWS_AS((SceneSpec{0, 3, 0, Anchor{0}}.check()), Error);
  CHECK_THROWS_AS((SceneSpec{0, 4, 4, Anchor{0}}.check()), Error);
  CHECK_THROWS_AS((SceneSpec{0, 4, 0, Anchor{9}}.check()), Error);
  CHECK_THROWS_AS((PromptSpec{Anchor{0}, 4}.check()), Error);
  CHECK_NOTHROW((SceneSpec{15, 7, 3, Anchor{8}}.check()));
}

TEST_CASE("templates") {
  const SceneSpec cat{0, 4, 1, Anchor{0}};
  CHECK(words(verbalize_understanding(cat)) == "red cat at top-left on blue background");
  CHECK(words(verbalize_plan(PromptSpec{kCenter, 2}, cat)) ==
        "place red cat at center on green background");
  CHECK(words(verbalize_prompt(PromptSpec{kCenter, 2})) == "put the subject at center on grass");
}

TEST_CASE("understanding template is injective over all 2304 scenes and parses back") {
  std::set<TokenSeq> seen;
  for (const auto& s : all_scenes()) {
    const auto t = verbalize_understanding(s);
    CHECK(t.size() == 7);
    seen.insert(t);
    const auto back = parse_understanding(t);
    REQUIRE(back.has_value());
    CHECK(*back == s);
  }
  CHECK(seen.size() == 16u * 4 * 4 * 9);
}

TEST_CASE("prompt and plan templates recover their fields") {
  const SceneSpec s{7, 6, 0, Anchor{3}};
  for (int a = 0; a < 9; ++a) {
    for (std::uint8_t b = 0; b < 4; ++b) {
      const PromptSpec p{Anchor{a}, b};
      CHECK(*parse_prompt(verbalize_prompt(p)) == p);
      CHECK(*parse_plan(verbalize_plan(p, s)) == p);
      CHECK(verbalize_plan(p, s) == verbalize_plan(p, s));
    }
  }
  CHECK_FALSE(parse_plan(verbalize_understanding(s)).has_value());
  CHECK_FALSE(parse_prompt(TokenSeq{}).has_value());
}

TEST_CASE("combo partition") {
  const auto train = combos(Split::kTrain);
  const auto eval = combos(Split::kEval);
  CHECK(train.size() == 56);
  CHECK(eval.size() == 8);
  std::set<std::pair<int, int>> all;
  for (auto c : train) {
    CHECK_FALSE(is_eval_combo(c));
    all.insert({c.glyph_id, c.color});
  }
  for (auto c : eval) {
    CHECK(is_eval_combo(c));
    all.insert({c.glyph_id, c.color});
  }
  CHECK(all.size() == 64);
  // every held-out glyph and color also occurs in training
  for (auto e : eval) {
    bool glyph_seen = false, color_seen = false;
    for (auto t : train) {
      glyph_seen |= t.glyph_id == e.glyph_id;
      color_seen |= t.color == e.color;
    }
    CHECK(glyph_seen);
    CHECK(color_seen);
  }
}

TEST_CASE("synthesized samples satisfy their invariants") {
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto split = seed % 3 == 0 ? Split::kEval : Split::kTrain;
    const auto s = synth_sample(seed, split);
    const Combo combo{s.reference_scene.glyph_id, s.reference_scene.subject_color};
    CHECK(is_eval_combo(combo) == (split == Split::kEval));
    CHECK(s.reference_image == render(s.reference_scene));
    CHECK(s.focus_image == make_focus(combo.glyph_id, combo.color));
    CHECK(s.result_image == render(SceneSpec{combo.glyph_id, combo.color, s.prompt.target_background,
                                             s.prompt.target_anchor}));
    CHECK((s.reference_scene.anchor != s.prompt.target_anchor ||
           s.reference_scene.background_color != s.prompt.target_background));
    CHECK(format::validate(s.trace()).accepted);
    CHECK(s.prompt_tokens == verbalize_prompt(s.prompt));
    const auto ctx = conditioning_context(s);
    CHECK(ctx.size() == 76);
    CHECK(vocab().is(ctx.front(), Structural::kBos));
    CHECK(vocab().is(ctx.back(), Structural::kGen));
    CHECK(synth_sample(seed, split).trace() == s.trace());
  }
}

TEST_CASE("sample json round trip") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synth_sample(seed, Split::kTrain);
    const auto back = sample_from_json(to_json(s), Split::kTrain);
    CHECK(back.trace() == s.trace());
    CHECK(back.reference_scene == s.reference_scene);
    CHECK(back.prompt == s.prompt);
    CHECK(back.reference_image == s.reference_image);
  }
}

TEST_CASE("dataset build is deterministic and round-trips") {
  testing::TempDir tmp;
  DatasetConfig cfg{300, 50, 1, tmp / "a"};
  const auto a = build_dataset(cfg);
  cfg.out_dir = tmp / "b";
  const auto b = build_dataset(cfg);
  CHECK(a.train_hash == b.train_hash);
  CHECK(a.eval_hash == b.eval_hash);
  CHECK(testing::slurp(a.train) == testing::slurp(b.train));
  CHECK(a.train_hash == hash_file(a.train));

  const auto train = load_split(tmp / "a", Split::kTrain);
  CHECK(train.samples.size() == 300);
  CHECK(train.manifest.at("n") == 300);
  CHECK(train.manifest.at("seed") == 1);
  CHECK(train.manifest.at("vocab_hash") == vocab().hash());
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    const auto& s = train.samples[i];
    const auto seg = format::parse(s.trace());
    CHECK(format::serialize(seg) == s.trace());
    CHECK(s.trace() == synth_sample(record_seed(1, Split::kTrain, i), Split::kTrain).trace());
  }
  const auto eval = load_split(tmp / "a", Split::kEval);
  CHECK(eval.samples.size() == 50);
  for (const auto& s : eval.samples) {
    CHECK(is_eval_combo({s.reference_scene.glyph_id, s.reference_scene.subject_color}));
  }

  cfg.seed = 2;
  cfg.out_dir = tmp / "c";
  CHECK(build_dataset(cfg).train_hash != a.train_hash);
}

TEST_CASE("dataset errors carry the path") {
  testing::TempDir tmp;
  DatasetConfig cfg{10, 10, 1, tmp / "missing" / "out"};
  try {
    build_dataset(cfg);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }
  cfg.out_dir = tmp / "ok";
  build_dataset(cfg);
  {
    std::ofstream out(tmp / "ok" / "train.jsonl", std::ios::app);
    out << "{}\n";
  }
  CHECK_THROWS_AS(load_split(tmp / "ok", Split::kTrain), HashMismatch);
  CHECK_THROWS_AS(load_split(tmp / "nowhere", Split::kEval), IoError);
}

TEST_CASE("ppm output") {
  testing::TempDir tmp;
  const std::array imgs{render(SceneSpec{0, 4, 0, kCenter}), make_focus(1, 5)};
  write_ppm(tmp / "x.ppm", imgs, 2);
  const auto bytes = testing::slurp(tmp / "x.ppm");
  const std::string header = "P6\n" + std::to_string(2 * 8 * 2 + 1) + " 16\n255\n";
  REQUIRE(bytes.size() == header.size() + static_cast<std::size_t>(33 * 16 * 3));
  CHECK(bytes.substr(0, header.size()) == header);
  const auto rgb = palette_rgb(4);
  // cell (3,3) of the centered glyph 0 render at pixel (6,6)
  const std::size_t off = header.size() + (6 * 33 + 6) * 3;
  if (glyph(0).cell(1, 1)) {
    CHECK(static_cast<std::uint8_t>(bytes[off]) == rgb[0]);
  }
}

}  // TEST_SUITE
