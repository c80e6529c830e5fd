#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace xcot {

struct TokenId {
  std::uint32_t value = 0;

  constexpr TokenId() = default;
  constexpr explicit TokenId(std::uint32_t v) : value(v) {}
  constexpr auto operator<=>(const TokenId&) const = default;
};

using TokenSeq = std::vector<TokenId>;

enum class Structural : std::uint8_t {
  kPad = 0,
  kBos,
  kEos,
  kSep,
  kGen,
  kThinkOpen,
  kThinkClose,
  kImgBegin,
  kImgEnd,
};

inline constexpr std::uint32_t kNumStructural = 9;
inline constexpr std::uint32_t kNumColors = 8;

std::string_view structural_name(Structural s) noexcept;

struct StructuralKind {
  Structural which;
  bool operator==(const StructuralKind&) const = default;
};
struct TextWordKind {
  std::uint32_t index;  // position in the word list
  std::string_view word;
  bool operator==(const TextWordKind& o) const { return index == o.index; }
};
struct ImageColorKind {
  std::uint8_t color;
  bool operator==(const ImageColorKind&) const = default;
};

using TokenKind = std::variant<StructuralKind, TextWordKind, ImageColorKind>;

// Word groups, in layout order.
inline constexpr std::array<std::string_view, 16> kSubjectWords = {
    "cat", "dog",  "bird", "fish", "tree", "house", "star", "moon",
    "boat", "car", "cup",  "key",  "bell", "hat",   "shoe", "frog"};
inline constexpr std::array<std::string_view, 8> kColorWords = {
    "gray", "blue", "green", "yellow", "red", "orange", "purple", "white"};
inline constexpr std::array<std::string_view, 9> kPositionWords = {
    "top-left", "top",    "top-right",   "left",         "center",
    "right",    "bottom-left", "bottom", "bottom-right"};
inline constexpr std::array<std::string_view, 4> kBackgroundWords = {"stone", "sky", "grass",
                                                                     "sand"};
inline constexpr std::array<std::string_view, 12> kConnectiveWords = {
    "place", "put", "the", "subject", "at", "on", "background", "in", "with", "a", "then", "image"};

/// The single token space shared by text and images:
/// [0, 9) structural, [9, 9+W) words, [9+W, 9+W+8) image colors.
class UnifiedVocab {
 public:
  UnifiedVocab();

  std::uint32_t size() const noexcept { return kNumStructural + num_words() + kNumColors; }
  std::uint32_t num_words() const noexcept { return static_cast<std::uint32_t>(words_.size()); }
  std::uint32_t first_word() const noexcept { return kNumStructural; }
  std::uint32_t first_color() const noexcept { return kNumStructural + num_words(); }

  TokenId structural(Structural s) const noexcept { return TokenId{static_cast<std::uint32_t>(s)}; }
  TokenId color(std::uint8_t palette_index) const;
  /// Throws UnknownWord.
  TokenId word(std::string_view w) const;

  TokenSeq encode_text(std::span<const std::string> words) const;
  TokenSeq encode_text(std::initializer_list<std::string_view> words) const;
  /// Structural tokens render as [NAME], colors as #k, words verbatim; space-separated.
  std::string decode(std::span<const TokenId> tokens) const;
  TokenKind token_kind(TokenId t) const;

  bool is_word(TokenId t) const noexcept { return t.value >= first_word() && t.value < first_color(); }
  bool is_color(TokenId t) const noexcept { return t.value >= first_color() && t.value < size(); }
  bool is(TokenId t, Structural s) const noexcept { return t.value == static_cast<std::uint32_t>(s); }
  /// Palette index of an image token. Precondition: is_color(t).
  std::uint8_t color_of(TokenId t) const noexcept {
    return static_cast<std::uint8_t>(t.value - first_color());
  }
  std::string_view word_of(TokenId t) const;

  /// One line per token: "<id>\t<kind>\t<surface>".
  std::string dump() const;
  std::string hash() const;

 private:
  void check(TokenId t) const;

  std::vector<std::string_view> words_;
  std::unordered_map<std::string_view, std::uint32_t> index_;
};

const UnifiedVocab& vocab();

}  // namespace xcot
