#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>
#include <string>

#include "xcot/error.hpp"
#include "xcot/vocab.hpp"

using namespace xcot;

TEST_SUITE("vocab") {

TEST_CASE("layout partitions the id range into structural, word and color blocks") {
  const auto& v = vocab();
  const std::uint32_t W = 16 + 8 + 9 + 4 + 12;
  CHECK(v.num_words() == W);
  CHECK(v.size() == 9 + W + 8);
  CHECK(v.first_word() == 9);
  CHECK(v.first_color() == 9 + W);

  int structural = 0, words = 0, colors = 0;
  for (std::uint32_t t = 0; t < v.size(); ++t) {
    const auto kind = v.token_kind(TokenId{t});
    if (std::holds_alternative<StructuralKind>(kind)) {
      CHECK(t < 9);
      ++structural;
    } else if (std::holds_alternative<TextWordKind>(kind)) {
      CHECK(t >= 9);
      CHECK(t < 9 + W);
      ++words;
    } else {
      CHECK(t >= 9 + W);
      CHECK(std::get<ImageColorKind>(kind).color == t - (9 + W));
      ++colors;
    }
  }
  CHECK(structural == 9);
  CHECK(words == static_cast<int>(W));
  CHECK(colors == 8);
}

TEST_CASE("structural set and its rendering") {
  const auto& v = vocab();
  const char* names[] = {"[PAD]", "[BOS]", "[EOS]", "[SEP]", "[GEN]",
                         "[THINK_OPEN]", "[THINK_CLOSE]", "[IMG_BEGIN]", "[IMG_END]"};
  for (std::uint32_t t = 0; t < 9; ++t) {
    const TokenId id{t};
    CHECK(v.decode(std::span(&id, 1)) == names[t]);
  }
  CHECK(std::get<StructuralKind>(v.token_kind(TokenId{0})).which == Structural::kPad);
}

TEST_CASE("encode_text examples") {
  const auto& v = vocab();
  const auto ids = v.encode_text({"red", "cat"});
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] == v.word("red"));
  CHECK(ids[1] == v.word("cat"));
  CHECK(v.decode(ids) == "red cat");
  CHECK(v.encode_text(std::initializer_list<std::string_view>{}).empty());
  try {
    v.encode_text({"zzz"});
    FAIL("expected UnknownWord");
  } catch (const UnknownWord& e) {
    CHECK(e.word() == "zzz");
  }
}

TEST_CASE("first word and first color") {
  const auto& v = vocab();
  const auto first = v.token_kind(TokenId{9});
  CHECK(std::get<TextWordKind>(first).word == kSubjectWords[0]);
  const TokenId c0{v.first_color()};
  CHECK(v.decode(std::span(&c0, 1)) == "#0");
  CHECK(std::get<ImageColorKind>(v.token_kind(c0)).color == 0);
}

TEST_CASE("out-of-range ids are rejected") {
  const auto& v = vocab();
  const TokenId bad{v.size()};
  CHECK_THROWS_AS(v.token_kind(bad), OutOfRange);
  CHECK_THROWS_AS(v.decode(std::span(&bad, 1)), OutOfRange);
}

TEST_CASE("no word appears twice and every word round-trips") {
  const auto& v = vocab();
  std::set<std::string> seen;
  std::vector<std::string> all;
  for (std::uint32_t t = v.first_word(); t < v.first_color(); ++t) {
    const std::string w(v.word_of(TokenId{t}));
    CHECK(seen.insert(w).second);
    all.push_back(w);
  }
  const auto ids = v.encode_text(all);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(v.word_of(ids[i]) == all[i]);
}

TEST_CASE("dump has one tab-separated line per token and a stable hash") {
  const auto& v = vocab();
  std::istringstream in(v.dump());
  std::string line;
  std::uint32_t n = 0;
  while (std::getline(in, line)) {
    CHECK(line.rfind(std::to_string(n) + "\t", 0) == 0);
    CHECK(std::count(line.begin(), line.end(), '\t') == 2);
    ++n;
  }
  CHECK(n == v.size());
  UnifiedVocab second;
  CHECK(second.hash() == v.hash());
  CHECK(second.dump() == v.dump());
}

}  // TEST_SUITE
