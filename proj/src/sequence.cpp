#include "ntpseg/sequence.hpp"

#include <charconv>
#include <istream>
#include <json.hpp>
#include <ostream>

#include "ntpseg/error.hpp"

namespace ntpseg {

using nlohmann::json;

VocabLayout VocabLayout::from(const CodecConfig& cfg) {
  cfg.validate();
  VocabLayout layout;
  layout.patch_size = cfg.patch_size;
  layout.intensity_bins = cfg.intensity_bins;
  layout.mask_base = kImageBase + cfg.intensity_bins;
  layout.pattern_count = static_cast<int>(cfg.pattern_count());
  layout.vocab_size = layout.mask_base + layout.pattern_count;
  return layout;
}

TokenCategory VocabLayout::category(int id) const {
  if (is_text(id)) return TokenCategory::kText;
  if (is_special(id)) return TokenCategory::kSpecial;
  if (is_image(id)) return TokenCategory::kImage;
  if (is_mask(id)) return TokenCategory::kMask;
  throw MalformedToken("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
}

int VocabLayout::image_id(uint32_t bin) const {
  if (bin >= static_cast<uint32_t>(intensity_bins)) {
    throw MalformedToken("image bin " + std::to_string(bin) + " out of range");
  }
  return kImageBase + static_cast<int>(bin);
}

int VocabLayout::mask_id(PatternToken pattern) const {
  if (pattern >= static_cast<uint32_t>(pattern_count)) {
    throw MalformedToken("mask pattern " + std::to_string(pattern) + " out of range");
  }
  return mask_base + static_cast<int>(pattern);
}

PatternToken VocabLayout::pattern_of(int id) const {
  if (!is_mask(id)) throw MalformedToken("token id " + std::to_string(id) + " is not a mask token");
  return static_cast<PatternToken>(id - mask_base);
}

size_t MultimodalDocument::loss_positions() const {
  size_t n = 0;
  for (uint8_t m : loss_mask) n += m;
  return n;
}

std::vector<PatternToken> MultimodalDocument::mask_patterns(const VocabLayout& layout) const {
  std::vector<PatternToken> out;
  out.reserve(mask_block.size());
  for (size_t i = mask_block.begin; i < mask_block.end; ++i) out.push_back(layout.pattern_of(ids[i]));
  return out;
}

std::vector<int32_t> encode_text(std::string_view text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string decode_text(std::span<const int32_t> ids) {
  std::string text;
  text.reserve(ids.size());
  for (int32_t id : ids) text.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return text;
}

std::vector<int32_t> to_image_ids(std::span<const uint32_t> bins, const VocabLayout& layout) {
  std::vector<int32_t> ids;
  ids.reserve(bins.size());
  for (uint32_t b : bins) ids.push_back(layout.image_id(b));
  return ids;
}

std::vector<int32_t> to_mask_ids(std::span<const PatternToken> patterns, const VocabLayout& layout) {
  std::vector<int32_t> ids;
  ids.reserve(patterns.size());
  for (PatternToken p : patterns) ids.push_back(layout.mask_id(p));
  return ids;
}

std::string meta_text(int pixel_height, int pixel_width) {
  return std::to_string(pixel_height) + "*" + std::to_string(pixel_width);
}

namespace {

void append_vision_header(std::vector<int32_t>& ids, const std::string& meta) {
  ids.push_back(VocabLayout::kSov);
  for (int32_t b : encode_text(meta)) ids.push_back(b);
  ids.push_back(VocabLayout::kSot);
}

void fill_loss_mask(MultimodalDocument& doc) {
  doc.loss_mask.assign(doc.ids.size(), 0);
  // Targets: every mask token, the closing EOV and the final EOS.
  for (size_t n = doc.mask_block.begin - 1; n + 1 < doc.ids.size(); ++n) doc.loss_mask[n] = 1;
}

void check_grid(int grid_h, int grid_w) {
  if (grid_h <= 0 || grid_w <= 0) {
    throw MalformedDocument("grid must be positive, got " + std::to_string(grid_h) + "x" +
                            std::to_string(grid_w));
  }
}

}  // namespace

std::vector<int32_t> build_prompt(std::span<const int32_t> image_ids, std::string_view description,
                                  int grid_h, int grid_w, const VocabLayout& layout) {
  check_grid(grid_h, grid_w);
  const size_t cells = static_cast<size_t>(grid_h) * grid_w;
  if (image_ids.size() != cells) {
    throw MalformedDocument("image block holds " + std::to_string(image_ids.size()) +
                            " tokens, grid needs " + std::to_string(cells));
  }
  for (size_t i = 0; i < image_ids.size(); ++i) {
    if (!layout.is_image(image_ids[i])) {
      throw MalformedDocument("image block token " + std::to_string(i) + " has id " +
                              std::to_string(image_ids[i]) + " outside the image range");
    }
  }
  const std::string meta = meta_text(grid_h * layout.patch_size, grid_w * layout.patch_size);
  std::vector<int32_t> ids;
  ids.reserve(2 * cells + description.size() + 2 * meta.size() + 8);
  ids.push_back(VocabLayout::kBos);
  append_vision_header(ids, meta);
  ids.insert(ids.end(), image_ids.begin(), image_ids.end());
  ids.push_back(VocabLayout::kEov);
  for (int32_t b : encode_text(description)) ids.push_back(b);
  append_vision_header(ids, meta);
  return ids;
}

MultimodalDocument build_document(std::span<const int32_t> image_ids, std::string_view description,
                                  std::span<const int32_t> mask_ids, int grid_h, int grid_w,
                                  const VocabLayout& layout, std::string sample_id) {
  const size_t cells = static_cast<size_t>(grid_h > 0 ? grid_h : 0) * (grid_w > 0 ? grid_w : 0);
  if (mask_ids.size() != cells) {
    throw MalformedDocument("mask block holds " + std::to_string(mask_ids.size()) +
                            " tokens, grid needs " + std::to_string(cells));
  }
  for (size_t i = 0; i < mask_ids.size(); ++i) {
    if (!layout.is_mask(mask_ids[i])) {
      throw MalformedDocument("mask block token " + std::to_string(i) + " has id " +
                              std::to_string(mask_ids[i]) + " outside the mask range");
    }
  }
  MultimodalDocument doc;
  doc.sample_id = std::move(sample_id);
  doc.grid_h = grid_h;
  doc.grid_w = grid_w;
  doc.ids = build_prompt(image_ids, description, grid_h, grid_w, layout);

  const size_t meta_len = meta_text(grid_h * layout.patch_size, grid_w * layout.patch_size).size();
  doc.image_block = {3 + meta_len, 3 + meta_len + cells};
  doc.text_block = {doc.image_block.end + 1, doc.image_block.end + 1 + description.size()};
  doc.mask_block = {doc.ids.size(), doc.ids.size() + cells};
  doc.ids.insert(doc.ids.end(), mask_ids.begin(), mask_ids.end());
  doc.ids.push_back(VocabLayout::kEov);
  doc.ids.push_back(VocabLayout::kEos);
  fill_loss_mask(doc);
  return doc;
}

namespace {

struct Cursor {
  std::span<const int32_t> ids;
  size_t i = 0;

  void expect(int32_t token, const char* name) {
    if (i >= ids.size() || ids[i] != token) throw ParseError(i, std::string("expected ") + name);
    ++i;
  }
};

struct VisionHeader {
  int pixel_h = 0;
  int pixel_w = 0;
  std::string meta;
  size_t meta_begin = 0;
};

bool parse_positive(std::string_view s, int& out) {
  if (s.empty() || s[0] == '0') return false;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
  }
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

VisionHeader parse_vision_header(Cursor& cur, const VocabLayout& layout) {
  cur.expect(VocabLayout::kSov, "SOV");
  VisionHeader header;
  header.meta_begin = cur.i;
  while (cur.i < cur.ids.size() && layout.is_text(cur.ids[cur.i])) {
    header.meta.push_back(static_cast<char>(cur.ids[cur.i]));
    ++cur.i;
  }
  cur.expect(VocabLayout::kSot, "SOT");
  const auto star = header.meta.find('*');
  if (star == std::string::npos ||
      !parse_positive(std::string_view(header.meta).substr(0, star), header.pixel_h) ||
      !parse_positive(std::string_view(header.meta).substr(star + 1), header.pixel_w)) {
    throw ParseError(header.meta_begin, "malformed meta text '" + header.meta + "'");
  }
  if (header.pixel_h % layout.patch_size != 0 || header.pixel_w % layout.patch_size != 0) {
    throw ParseError(header.meta_begin, "meta text resolution '" + header.meta +
                                            "' not divisible by patch size");
  }
  return header;
}

Span parse_grid(Cursor& cur, size_t cells, bool (VocabLayout::*accepts)(int) const,
                const VocabLayout& layout, const char* block) {
  Span span{cur.i, cur.i + cells};
  for (size_t c = 0; c < cells; ++c) {
    if (cur.i >= cur.ids.size()) throw ParseError(cur.i, std::string("truncated ") + block);
    if (!(layout.*accepts)(cur.ids[cur.i])) {
      throw ParseError(cur.i, std::string("expected ") + block + " token");
    }
    ++cur.i;
  }
  return span;
}

}  // namespace

MultimodalDocument parse_document(std::span<const int32_t> ids, const VocabLayout& layout,
                                  std::string sample_id) {
  Cursor cur{ids};
  cur.expect(VocabLayout::kBos, "BOS");

  const VisionHeader image_header = parse_vision_header(cur, layout);
  const int grid_h = image_header.pixel_h / layout.patch_size;
  const int grid_w = image_header.pixel_w / layout.patch_size;
  const size_t cells = static_cast<size_t>(grid_h) * grid_w;

  MultimodalDocument doc;
  doc.sample_id = std::move(sample_id);
  doc.grid_h = grid_h;
  doc.grid_w = grid_w;
  doc.image_block = parse_grid(cur, cells, &VocabLayout::is_image, layout, "image block");
  cur.expect(VocabLayout::kEov, "EOV");

  doc.text_block.begin = cur.i;
  while (cur.i < ids.size() && layout.is_text(ids[cur.i])) ++cur.i;
  doc.text_block.end = cur.i;

  const VisionHeader mask_header = parse_vision_header(cur, layout);
  if (mask_header.meta != image_header.meta) {
    throw ParseError(mask_header.meta_begin, "meta text '" + mask_header.meta +
                                                 "' differs from image block '" +
                                                 image_header.meta + "'");
  }
  doc.mask_block = parse_grid(cur, cells, &VocabLayout::is_mask, layout, "mask block");
  cur.expect(VocabLayout::kEov, "EOV");
  cur.expect(VocabLayout::kEos, "EOS");
  if (cur.i != ids.size()) throw ParseError(cur.i, "trailing tokens after EOS");

  doc.ids.assign(ids.begin(), ids.end());
  fill_loss_mask(doc);
  return doc;
}

std::vector<int> grid_aligned_positions(std::span<const int32_t> ids) {
  std::vector<int> pos(ids.size());
  int sot_seen = 0;
  int image_sot_pos = 0;
  bool in_grid = false;
  size_t grid_start = 0;
  int grid_origin = 0;
  for (size_t n = 0; n < ids.size(); ++n) {
    pos[n] = static_cast<int>(n);
    const int32_t id = ids[n];
    if (id == VocabLayout::kSot) {
      ++sot_seen;
      if (sot_seen == 1) image_sot_pos = static_cast<int>(n);
      pos[n] = sot_seen == 1 ? static_cast<int>(n) : image_sot_pos;
      in_grid = true;
      grid_start = n + 1;
      grid_origin = pos[n] + 1;
    } else if (id == VocabLayout::kEov || id == VocabLayout::kSov || id == VocabLayout::kEos ||
               id == VocabLayout::kBos) {
      in_grid = false;
    } else if (in_grid && sot_seen >= 2) {
      pos[n] = grid_origin + static_cast<int>(n - grid_start);
    }
  }
  return pos;
}

namespace {

json span_json(const Span& s) { return json::array({s.begin, s.end}); }

Span span_from(const json& j) { return {j.at(0).get<size_t>(), j.at(1).get<size_t>()}; }

}  // namespace

void write_documents(std::ostream& out, std::span<const MultimodalDocument> docs) {
  for (const auto& doc : docs) {
    json rec;
    rec["sample_id"] = doc.sample_id;
    rec["ids"] = doc.ids;
    rec["spans"] = {{"image", span_json(doc.image_block)},
                    {"text", span_json(doc.text_block)},
                    {"mask", span_json(doc.mask_block)}};
    rec["grid"] = json::array({doc.grid_h, doc.grid_w});
    out << rec.dump() << '\n';
  }
}

std::vector<MultimodalDocument> read_documents(std::istream& in, const VocabLayout& layout) {
  std::vector<MultimodalDocument> docs;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw LoadError("document record line " + std::to_string(line_no) + ": " + e.what());
    }
    const auto ids = rec.at("ids").get<std::vector<int32_t>>();
    MultimodalDocument doc = parse_document(ids, layout, rec.at("sample_id").get<std::string>());
    const auto& spans = rec.at("spans");
    if (span_from(spans.at("image")) != doc.image_block ||
        span_from(spans.at("text")) != doc.text_block ||
        span_from(spans.at("mask")) != doc.mask_block ||
        rec.at("grid").at(0).get<int>() != doc.grid_h ||
        rec.at("grid").at(1).get<int>() != doc.grid_w) {
      throw LoadError("document record line " + std::to_string(line_no) +
                      ": stored spans disagree with the id sequence");
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

void mark_all_positions(MultimodalDocument& doc) {
  doc.loss_mask.assign(doc.ids.size(), 1);
  if (!doc.loss_mask.empty()) doc.loss_mask.back() = 0;
}

}  // namespace ntpseg
