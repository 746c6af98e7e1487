#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ntpseg {

// Binary segmentation mask, row-major, values in {0, 1}.
struct MaskGrid {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> bits;

  uint8_t at(int row, int col) const { return bits[static_cast<size_t>(row) * width + col]; }
  bool operator==(const MaskGrid&) const = default;
};

// Grayscale image, row-major, values in [0, 255].
struct ImageGrid {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> intensity;

  bool operator==(const ImageGrid&) const = default;
};

struct CodecConfig {
  int patch_size = 4;
  int intensity_bins = 64;

  void validate() const;
  // Number of distinct mask pattern tokens, 2^(patch_size^2).
  uint32_t pattern_count() const { return uint32_t{1} << (patch_size * patch_size); }
  bool operator==(const CodecConfig&) const = default;
};

// Pattern token for one patch_size x patch_size mask patch. Bit (r, c) of the
// patch is stored at bit position r * patch_size + c.
using PatternToken = uint32_t;

// Grid of (H/p) x (W/p) pattern tokens in row-major order.
std::vector<PatternToken> encode_mask(const MaskGrid& mask, const CodecConfig& cfg);

MaskGrid decode_mask(std::span<const PatternToken> tokens, int grid_h, int grid_w,
                     const CodecConfig& cfg);

// Per-patch mean intensity quantized to `intensity_bins` levels.
std::vector<uint32_t> encode_image(const ImageGrid& image, const CodecConfig& cfg);

// Pixels >= 128 become lesion (1), everything else background (0).
MaskGrid binarize(const ImageGrid& gray, int threshold = 128);

}  // namespace ntpseg
