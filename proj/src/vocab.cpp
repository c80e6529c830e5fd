#include "xcot/vocab.hpp"

#include <sstream>

#include "xcot/error.hpp"
#include "xcot/util.hpp"

namespace xcot {

namespace {

constexpr std::array<std::string_view, kNumStructural> kStructuralNames = {
    "PAD", "BOS", "EOS", "SEP", "GEN", "THINK_OPEN", "THINK_CLOSE", "IMG_BEGIN", "IMG_END"};

}  // namespace

std::string_view structural_name(Structural s) noexcept {
  return kStructuralNames[static_cast<std::size_t>(s)];
}

UnifiedVocab::UnifiedVocab() {
  auto add = [this](const auto& group) {
    for (auto w : group) {
      if (!index_.emplace(w, static_cast<std::uint32_t>(words_.size())).second) {
        throw Error("duplicate vocabulary word: " + std::string(w));
      }
      words_.push_back(w);
    }
  };
  add(kSubjectWords);
  add(kColorWords);
  add(kPositionWords);
  add(kBackgroundWords);
  add(kConnectiveWords);
}

TokenId UnifiedVocab::color(std::uint8_t palette_index) const {
  if (palette_index >= kNumColors) {
    throw OutOfRange("palette index " + std::to_string(palette_index));
  }
  return TokenId{first_color() + palette_index};
}

TokenId UnifiedVocab::word(std::string_view w) const {
  auto it = index_.find(w);
  if (it == index_.end()) throw UnknownWord(std::string(w));
  return TokenId{first_word() + it->second};
}

TokenSeq UnifiedVocab::encode_text(std::span<const std::string> words) const {
  TokenSeq out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(word(w));
  return out;
}

TokenSeq UnifiedVocab::encode_text(std::initializer_list<std::string_view> words) const {
  TokenSeq out;
  out.reserve(words.size());
  for (auto w : words) out.push_back(word(w));
  return out;
}

void UnifiedVocab::check(TokenId t) const {
  if (t.value >= size()) {
    throw OutOfRange("token " + std::to_string(t.value) + " >= vocab size " +
                     std::to_string(size()));
  }
}

TokenKind UnifiedVocab::token_kind(TokenId t) const {
  check(t);
  if (t.value < kNumStructural) return StructuralKind{static_cast<Structural>(t.value)};
  if (t.value < first_color()) {
    auto i = t.value - first_word();
    return TextWordKind{i, words_[i]};
  }
  return ImageColorKind{color_of(t)};
}

std::string_view UnifiedVocab::word_of(TokenId t) const {
  check(t);
  if (!is_word(t)) throw OutOfRange("token " + std::to_string(t.value) + " is not a word");
  return words_[t.value - first_word()];
}

std::string UnifiedVocab::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    auto kind = token_kind(tokens[i]);
    if (auto* s = std::get_if<StructuralKind>(&kind)) {
      out += '[';
      out += structural_name(s->which);
      out += ']';
    } else if (auto* w = std::get_if<TextWordKind>(&kind)) {
      out += w->word;
    } else {
      out += '#';
      out += std::to_string(std::get<ImageColorKind>(kind).color);
    }
  }
  return out;
}

std::string UnifiedVocab::dump() const {
  std::ostringstream os;
  for (std::uint32_t id = 0; id < size(); ++id) {
    auto kind = token_kind(TokenId{id});
    os << id << '\t';
    if (auto* s = std::get_if<StructuralKind>(&kind)) {
      os << "structural\t" << structural_name(s->which);
    } else if (auto* w = std::get_if<TextWordKind>(&kind)) {
      os << "word\t" << w->word;
    } else {
      os << "color\t#" << int(std::get<ImageColorKind>(kind).color);
    }
    os << '\n';
  }
  return os.str();
}

std::string UnifiedVocab::hash() const { return hex64(fnv1a(dump())); }

const UnifiedVocab& vocab() {
  static const UnifiedVocab instance;
  return instance;
}

}  // namespace xcot
