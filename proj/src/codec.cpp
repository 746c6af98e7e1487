#include "ntpseg/codec.hpp"

#include <string>

#include "ntpseg/error.hpp"

namespace ntpseg {

namespace {

void check_divisible(int height, int width, size_t values, int p) {
  if (height <= 0 || width <= 0 || height % p != 0 || width % p != 0) {
    throw InvalidInput("grid " + std::to_string(height) + "x" + std::to_string(width) +
                       " is not a positive multiple of patch size " + std::to_string(p));
  }
  if (values != static_cast<size_t>(height) * width) {
    throw InvalidInput("pixel buffer holds " + std::to_string(values) + " values, expected " +
                       std::to_string(static_cast<size_t>(height) * width));
  }
}

}  // namespace

void CodecConfig::validate() const {
  if (patch_size < 2 || patch_size > 4) {
    throw InvalidInput("patch_size must be 2, 3 or 4, got " + std::to_string(patch_size));
  }
  if (intensity_bins < 1 || intensity_bins > 256) {
    throw InvalidInput("intensity_bins must be in [1, 256], got " +
                       std::to_string(intensity_bins));
  }
}

std::vector<PatternToken> encode_mask(const MaskGrid& mask, const CodecConfig& cfg) {
  cfg.validate();
  const int p = cfg.patch_size;
  check_divisible(mask.height, mask.width, mask.bits.size(), p);
  const int gh = mask.height / p;
  const int gw = mask.width / p;
  std::vector<PatternToken> tokens(static_cast<size_t>(gh) * gw, 0);
  for (int gr = 0; gr < gh; ++gr) {
    for (int gc = 0; gc < gw; ++gc) {
      PatternToken pattern = 0;
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          const uint8_t bit = mask.at(gr * p + r, gc * p + c);
          if (bit > 1) throw InvalidInput("mask value " + std::to_string(bit) + " is not binary");
          pattern |= static_cast<PatternToken>(bit) << (r * p + c);
        }
      }
      tokens[static_cast<size_t>(gr) * gw + gc] = pattern;
    }
  }
  return tokens;
}

MaskGrid decode_mask(std::span<const PatternToken> tokens, int grid_h, int grid_w,
                     const CodecConfig& cfg) {
  cfg.validate();
  if (grid_h <= 0 || grid_w <= 0 ||
      tokens.size() != static_cast<size_t>(grid_h) * static_cast<size_t>(grid_w)) {
    throw MalformedToken("expected " + std::to_string(static_cast<long>(grid_h) * grid_w) +
                         " mask tokens, got " + std::to_string(tokens.size()));
  }
  const int p = cfg.patch_size;
  MaskGrid mask{grid_h * p, grid_w * p, {}};
  mask.bits.assign(static_cast<size_t>(mask.height) * mask.width, 0);
  for (int gr = 0; gr < grid_h; ++gr) {
    for (int gc = 0; gc < grid_w; ++gc) {
      const PatternToken pattern = tokens[static_cast<size_t>(gr) * grid_w + gc];
      if (pattern >= cfg.pattern_count()) {
        throw MalformedToken("pattern " + std::to_string(pattern) + " out of range for patch " +
                             std::to_string(p));
      }
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          mask.bits[static_cast<size_t>(gr * p + r) * mask.width + gc * p + c] =
              static_cast<uint8_t>((pattern >> (r * p + c)) & 1u);
        }
      }
    }
  }
  return mask;
}

std::vector<uint32_t> encode_image(const ImageGrid& image, const CodecConfig& cfg) {
  cfg.validate();
  const int p = cfg.patch_size;
  check_divisible(image.height, image.width, image.intensity.size(), p);
  const int gh = image.height / p;
  const int gw = image.width / p;
  const uint64_t bins = static_cast<uint64_t>(cfg.intensity_bins);
  const uint64_t denom = 256u * static_cast<uint64_t>(p * p);
  std::vector<uint32_t> tokens(static_cast<size_t>(gh) * gw, 0);
  for (int gr = 0; gr < gh; ++gr) {
    for (int gc = 0; gc < gw; ++gc) {
      uint64_t sum = 0;
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          sum += image.intensity[static_cast<size_t>(gr * p + r) * image.width + gc * p + c];
        }
      }
      // floor(mean / 256 * bins) in exact integer arithmetic.
      uint64_t bin = sum * bins / denom;
      if (bin >= bins) bin = bins - 1;
      tokens[static_cast<size_t>(gr) * gw + gc] = static_cast<uint32_t>(bin);
    }
  }
  return tokens;
}

MaskGrid binarize(const ImageGrid& gray, int threshold) {
  MaskGrid mask{gray.height, gray.width, {}};
  mask.bits.resize(gray.intensity.size());
  for (size_t i = 0; i < gray.intensity.size(); ++i) {
    mask.bits[i] = gray.intensity[i] >= threshold ? 1 : 0;
  }
  return mask;
}

}  // namespace ntpseg
