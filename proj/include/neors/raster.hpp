// Minimal RGB raster with line/text drawing and PNG encoding.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace neors {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kRed{255, 0, 0};
inline constexpr Rgb kYellow{255, 255, 0};
inline constexpr Rgb kBlue{0, 90, 255};
inline constexpr Rgb kGreen{0, 170, 0};
inline constexpr Rgb kGray{128, 128, 128};

class Image {
 public:
  Image() = default;
  Image(int width, int height, Rgb fill = kBlack);

  int width() const { return width_; }
  int height() const { return height_; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }
  /// Out-of-bounds writes are ignored.
  void set(int x, int y, Rgb c);
  Rgb get(int x, int y) const;
  void fill_rect(int x, int y, int w, int h, Rgb c);
  /// Copies `src` with its top-left corner at (x, y).
  void blit(const Image& src, int x, int y);
  const std::vector<std::uint8_t>& bytes() const { return px_; }

 private:
  int width_ = 0, height_ = 0;
  std::vector<std::uint8_t> px_;
};

void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c);

/// 5x7 bitmap glyphs; lowercase is drawn as uppercase, unknown characters as blanks.
void draw_text(Image& img, int x, int y, const std::string& text, Rgb c, int scale = 1);
int text_width(const std::string& text, int scale = 1);
inline constexpr int kGlyphHeight = 7;

/// Writes an 8-bit RGB PNG; `text` entries become tEXt chunks.
void write_png(const Image& img, const std::filesystem::path& path,
               const std::map<std::string, std::string>& text = {});

struct DecodedPng {
  Image image;
  std::map<std::string, std::string> text;
};

DecodedPng read_png(const std::filesystem::path& path);

}  // namespace neors
