#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ntpseg/codec.hpp"

namespace ntpseg {

enum class TokenCategory { kText, kSpecial, kImage, kMask };

// Unified vocabulary: 256 byte tokens, six specials, image-intensity bins,
// then one token per mask pattern. Ranges are contiguous and disjoint.
struct VocabLayout {
  static constexpr int kTextBase = 0;
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kSov = 258;
  static constexpr int kSot = 259;
  static constexpr int kEov = 260;
  static constexpr int kPad = 261;
  static constexpr int kImageBase = 262;

  int patch_size = 4;
  int intensity_bins = 64;
  int mask_base = 0;
  int pattern_count = 0;
  int vocab_size = 0;

  static VocabLayout from(const CodecConfig& cfg);
  CodecConfig codec() const { return {patch_size, intensity_bins}; }

  TokenCategory category(int id) const;
  bool is_text(int id) const { return id >= kTextBase && id < kBos; }
  bool is_special(int id) const { return id >= kBos && id < kImageBase; }
  bool is_image(int id) const { return id >= kImageBase && id < mask_base; }
  bool is_mask(int id) const { return id >= mask_base && id < vocab_size; }

  int image_id(uint32_t bin) const;
  int mask_id(PatternToken pattern) const;
  PatternToken pattern_of(int id) const;
};

// Half-open index range into a document's id sequence.
struct Span {
  size_t begin = 0;
  size_t end = 0;
  size_t size() const { return end - begin; }
  bool contains(size_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

// [BOS] [SOV] meta [SOT] image [EOV] description [SOV] meta [SOT] mask [EOV] [EOS]
//
// Spans cover the grid tokens of each vision block and the description bytes.
// loss_mask[n] marks input positions whose next-token target is a mask token
// or the closing EOV/EOS.
struct MultimodalDocument {
  std::string sample_id;
  std::vector<int32_t> ids;
  Span image_block;
  Span text_block;
  Span mask_block;
  std::vector<uint8_t> loss_mask;
  int grid_h = 0;
  int grid_w = 0;

  size_t loss_positions() const;
  // Index one past the mask block's [SOT]; ids before it form the decoding prompt.
  size_t prompt_length() const { return mask_block.begin; }
  std::vector<PatternToken> mask_patterns(const VocabLayout& layout) const;
  bool operator==(const MultimodalDocument&) const = default;
};

std::vector<int32_t> encode_text(std::string_view text);
std::string decode_text(std::span<const int32_t> ids);

std::vector<int32_t> to_image_ids(std::span<const uint32_t> bins, const VocabLayout& layout);
std::vector<int32_t> to_mask_ids(std::span<const PatternToken> patterns, const VocabLayout& layout);

std::string meta_text(int pixel_height, int pixel_width);

MultimodalDocument build_document(std::span<const int32_t> image_ids, std::string_view description,
                                  std::span<const int32_t> mask_ids, int grid_h, int grid_w,
                                  const VocabLayout& layout, std::string sample_id = {});

// Decoding prompt: everything up to and including the mask block's [SOT].
std::vector<int32_t> build_prompt(std::span<const int32_t> image_ids, std::string_view description,
                                  int grid_h, int grid_w, const VocabLayout& layout);

MultimodalDocument parse_document(std::span<const int32_t> ids, const VocabLayout& layout,
                                  std::string sample_id = {});

// Rotary position ids. Identity everywhere except the mask block, whose [SOT]
// and grid tokens reuse the positions of the image block's [SOT] and grid, so
// mask cell c and image cell c share a position. Position n depends only on
// ids[0..n].
std::vector<int> grid_aligned_positions(std::span<const int32_t> ids);

// Marks every position except the last (whose target would lie past EOS).
void mark_all_positions(MultimodalDocument& doc);

// Line-delimited JSON record file, one document per line.
void write_documents(std::ostream& out, std::span<const MultimodalDocument> docs);
std::vector<MultimodalDocument> read_documents(std::istream& in, const VocabLayout& layout);

}  // namespace ntpseg
