#pragma once

#include <array>
#include <cstdint>

namespace xcot {

inline constexpr int kGridSide = 8;
inline constexpr int kGridCells = kGridSide * kGridSide;

/// 8x8 raster of palette indices, row-major.
struct GridImage {
  std::array<std::uint8_t, kGridCells> cells{};

  std::uint8_t at(int row, int col) const { return cells[static_cast<std::size_t>(row * kGridSide + col)]; }
  std::uint8_t& at(int row, int col) { return cells[static_cast<std::size_t>(row * kGridSide + col)]; }

  static GridImage filled(std::uint8_t color) {
    GridImage img;
    img.cells.fill(color);
    return img;
  }

  bool operator==(const GridImage&) const = default;
};

}  // namespace xcot
