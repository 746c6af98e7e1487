#include <doctest.h>

#include <sstream>

#include "ntpseg/codec.hpp"
#include "ntpseg/error.hpp"
#include "ntpseg/rng.hpp"
#include "ntpseg/sequence.hpp"

using namespace ntpseg;

namespace {

MaskGrid filled(int h, int w, uint8_t v) { return {h, w, std::vector<uint8_t>(static_cast<size_t>(h * w), v)}; }

MaskGrid random_mask(Rng& rng, int h, int w) {
  MaskGrid m = filled(h, w, 0);
  for (auto& b : m.bits) b = static_cast<uint8_t>(rng.below(2));
  return m;
}

ImageGrid flat_image(int h, int w, uint8_t v) {
  return {h, w, std::vector<uint8_t>(static_cast<size_t>(h * w), v)};
}

}  // namespace

TEST_SUITE("codec") {
  TEST_CASE("encode_mask examples") {
    const CodecConfig p4{4, 64};
    CHECK(encode_mask(filled(8, 8, 0), p4) == std::vector<PatternToken>(4, 0));
    CHECK(encode_mask(filled(8, 8, 1), p4) == std::vector<PatternToken>(4, 65535));
    MaskGrid one = filled(4, 4, 0);
    one.bits[0] = 1;
    CHECK(encode_mask(one, p4) == std::vector<PatternToken>{1});
  }

  TEST_CASE("bit order is row-major within the patch, grid row-major") {
    const CodecConfig p2{2, 64};
    MaskGrid m = filled(2, 4, 0);
    m.bits[1 * 4 + 0] = 1;  // patch 0, bit (1,0) -> 2^2
    m.bits[0 * 4 + 3] = 1;  // patch 1, bit (0,1) -> 2^1
    CHECK(encode_mask(m, p2) == std::vector<PatternToken>{4, 2});
  }

  TEST_CASE("decode_mask examples") {
    const CodecConfig p4{4, 64};
    CHECK(decode_mask(std::vector<PatternToken>(4, 0), 2, 2, p4) == filled(8, 8, 0));
    const MaskGrid one = decode_mask(std::vector<PatternToken>{1}, 1, 1, p4);
    CHECK(one.height == 4);
    CHECK(one.at(0, 0) == 1);
    int set = 0;
    for (auto b : one.bits) set += b;
    CHECK(set == 1);
  }

  TEST_CASE("round trip over random masks for every patch size") {
    Rng rng(3);
    for (int p : {2, 3, 4}) {
      const CodecConfig cfg{p, 64};
      for (int t = 0; t < 50; ++t) {
        const int gh = rng.range(1, 6), gw = rng.range(1, 6);
        const MaskGrid m = random_mask(rng, gh * p, gw * p);
        const auto tokens = encode_mask(m, cfg);
        CHECK(tokens.size() == static_cast<size_t>(gh * gw));
        for (auto t2 : tokens) CHECK(t2 < cfg.pattern_count());
        CHECK(decode_mask(tokens, gh, gw, cfg) == m);
      }
    }
  }

  TEST_CASE("errors") {
    const CodecConfig p4{4, 64};
    CHECK_THROWS_AS(encode_mask(filled(6, 8, 0), p4), InvalidInput);
    CHECK_THROWS_AS(encode_image(flat_image(8, 5, 0), p4), InvalidInput);
    CHECK_THROWS_AS(decode_mask(std::vector<PatternToken>(3, 0), 2, 2, p4), MalformedToken);
    CHECK_THROWS_AS(decode_mask(std::vector<PatternToken>{65536}, 1, 1, p4), MalformedToken);
    CHECK_THROWS_AS((CodecConfig{5, 64}.validate()), InvalidInput);
    CHECK_THROWS_AS((CodecConfig{4, 0}.validate()), InvalidInput);
    MaskGrid bad = filled(4, 4, 0);
    bad.bits[3] = 2;
    CHECK_THROWS_AS(encode_mask(bad, p4), InvalidInput);
  }

  TEST_CASE("encode_image bins") {
    const CodecConfig p4{4, 64};
    CHECK(encode_image(flat_image(4, 4, 0), p4) == std::vector<uint32_t>{0});
    CHECK(encode_image(flat_image(4, 4, 255), p4) == std::vector<uint32_t>{63});
    CHECK(encode_image(flat_image(4, 4, 128), p4) == std::vector<uint32_t>{32});
    // mean of a patch, not a single pixel: half 0, half 255 -> mean 127.5 -> bin 31
    ImageGrid half = flat_image(4, 4, 0);
    for (int i = 8; i < 16; ++i) half.intensity[static_cast<size_t>(i)] = 255;
    CHECK(encode_image(half, p4) == std::vector<uint32_t>{31});
  }

  TEST_CASE("encoding is deterministic") {
    Rng a(9), b(9);
    const MaskGrid m1 = random_mask(a, 16, 16), m2 = random_mask(b, 16, 16);
    CHECK(encode_mask(m1, {4, 64}) == encode_mask(m2, {4, 64}));
  }
}

TEST_SUITE("sequence") {
  TEST_CASE("vocabulary layout") {
    const VocabLayout v = VocabLayout::from({4, 64});
    CHECK(v.mask_base == 262 + 64);
    CHECK(v.vocab_size == 262 + 64 + 65536);
    const VocabLayout v2 = VocabLayout::from({2, 64});
    CHECK(v2.vocab_size == 342);
    // every id falls in exactly one category
    for (int id = 0; id < v2.vocab_size; ++id) {
      const int n = int(v2.is_text(id)) + int(v2.is_special(id)) + int(v2.is_image(id)) + int(v2.is_mask(id));
      CHECK(n == 1);
    }
    CHECK(v2.category(65) == TokenCategory::kText);
    CHECK(v2.category(256) == TokenCategory::kSpecial);
    CHECK(v2.category(300) == TokenCategory::kImage);
    CHECK(v2.category(330) == TokenCategory::kMask);
  }

  TEST_CASE("encode_text examples") {
    CHECK(encode_text("").empty());
    CHECK(encode_text("A") == std::vector<int32_t>{65});
    CHECK(encode_text("64*64") == std::vector<int32_t>{54, 52, 42, 54, 52});
    CHECK(decode_text(encode_text("héllo")) == "héllo");
  }

  TEST_CASE("document length follows the block arithmetic") {
    // 4x4 pixels with p=4: one grid cell per vision block, meta "4*4" (3 bytes).
    // BOS + (SOV meta SOT 1 EOV) + text + (SOV meta SOT 1 EOV) + EOS
    //  = 1 + (1+3+1+1+1) + 0 + (1+3+1+1+1) + 1 = 16.
    const VocabLayout v = VocabLayout::from({4, 64});
    const std::vector<int32_t> img{v.image_id(5)}, mask{v.mask_id(7)};
    const MultimodalDocument d = build_document(img, "", mask, 1, 1, v);
    CHECK(d.ids.size() == 16);
    CHECK(d.ids.front() == VocabLayout::kBos);
    CHECK(d.ids.back() == VocabLayout::kEos);

    // general formula: 2 (3 + meta_len) + 2 + image + text + mask
    const VocabLayout v2 = VocabLayout::from({2, 64});
    const std::vector<int32_t> img2(16 * 16, v2.image_id(1)), mask2(16 * 16, v2.mask_id(0));
    const MultimodalDocument d2 = build_document(img2, "left", mask2, 16, 16, v2);
    const size_t meta = meta_text(32, 32).size();
    CHECK(meta == 5);
    CHECK(d2.ids.size() == 2 * (3 + meta) + 2 + 256 + 4 + 256);
  }

  TEST_CASE("loss mask covers the mask block targets and the closing EOV/EOS") {
    const VocabLayout v = VocabLayout::from({2, 64});
    const std::vector<int32_t> img(16 * 16, v.image_id(1)), mask(16 * 16, v.mask_id(3));
    const MultimodalDocument d = build_document(img, "x", mask, 16, 16, v);
    CHECK(d.loss_positions() == 256 + 2);
    for (size_t n = 0; n + 1 < d.ids.size(); ++n) {
      const bool target_in_mask = d.mask_block.contains(n + 1) || n + 1 == d.mask_block.end ||
                                  n + 1 == d.mask_block.end + 1;
      CHECK(bool(d.loss_mask[n]) == target_in_mask);
    }
    CHECK(d.loss_mask.back() == 0);
    CHECK(d.ids[d.mask_block.end] == VocabLayout::kEov);
    CHECK(d.prompt_length() == d.mask_block.begin);
    CHECK(d.ids[d.prompt_length() - 1] == VocabLayout::kSot);
  }

  TEST_CASE("mark_all_positions") {
    const VocabLayout v = VocabLayout::from({4, 64});
    MultimodalDocument d = build_document(std::vector<int32_t>{v.image_id(0)}, "ab",
                                          std::vector<int32_t>{v.mask_id(0)}, 1, 1, v);
    mark_all_positions(d);
    CHECK(d.loss_positions() == d.ids.size() - 1);
  }

  TEST_CASE("wrong-range tokens are rejected") {
    const VocabLayout v = VocabLayout::from({4, 64});
    CHECK_THROWS_AS(build_document(std::vector<int32_t>{v.mask_id(0)}, "", std::vector<int32_t>{v.mask_id(0)}, 1, 1, v),
                    MalformedDocument);
    CHECK_THROWS_AS(build_document(std::vector<int32_t>{v.image_id(0)}, "", std::vector<int32_t>{v.image_id(0)}, 1, 1, v),
                    MalformedDocument);
  }

  TEST_CASE("parse inverts build; grammar violations name the position") {
    const VocabLayout v = VocabLayout::from({4, 64});
    const std::vector<int32_t> img{v.image_id(5), v.image_id(6)}, mask{v.mask_id(7), v.mask_id(9)};
    const MultimodalDocument d = build_document(img, "left lung", mask, 1, 2, v, "s1");
    CHECK(parse_document(d.ids, v, "s1") == d);
    CHECK(d.mask_patterns(v) == std::vector<PatternToken>{7, 9});

    // drop the mask block's EOV
    std::vector<int32_t> no_eov = d.ids;
    const size_t eov = d.mask_block.end;
    no_eov.erase(no_eov.begin() + static_cast<long>(eov));
    try {
      parse_document(no_eov, v);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.position() == eov);
    }

    // "4x8" instead of "4*8"
    std::vector<int32_t> bad_meta = d.ids;
    bad_meta[3] = 'x';
    try {
      parse_document(bad_meta, v);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("meta text") != std::string::npos);
    }
  }

  TEST_CASE("round trip over random documents") {
    const VocabLayout v = VocabLayout::from({2, 16});
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
      const int gh = rng.range(1, 5), gw = rng.range(1, 5);
      std::vector<int32_t> img, mask;
      for (int i = 0; i < gh * gw; ++i) {
        img.push_back(v.image_id(static_cast<uint32_t>(rng.below(16))));
        mask.push_back(v.mask_id(static_cast<PatternToken>(rng.below(16))));
      }
      std::string text;
      const int n = rng.range(0, 20);
      for (int i = 0; i < n; ++i) text.push_back(static_cast<char>(rng.range(32, 126)));
      const MultimodalDocument d = build_document(img, text, mask, gh, gw, v, "r");
      const MultimodalDocument p = parse_document(d.ids, v, "r");
      CHECK(p == d);
      CHECK(build_document(img, text, mask, gh, gw, v, "r").ids == d.ids);
    }
  }

  TEST_CASE("prompt equals the document prefix") {
    const VocabLayout v = VocabLayout::from({4, 64});
    const std::vector<int32_t> img{v.image_id(1), v.image_id(2)}, mask{v.mask_id(3), v.mask_id(4)};
    const MultimodalDocument d = build_document(img, "t", mask, 2, 1, v);
    const auto prompt = build_prompt(img, "t", 2, 1, v);
    CHECK(prompt == std::vector<int32_t>(d.ids.begin(), d.ids.begin() + static_cast<long>(d.prompt_length())));
  }

  TEST_CASE("grid-aligned positions") {
    const VocabLayout v = VocabLayout::from({4, 64});
    const std::vector<int32_t> img{v.image_id(1), v.image_id(2)}, mask{v.mask_id(3), v.mask_id(4)};
    const MultimodalDocument d = build_document(img, "abc", mask, 1, 2, v);
    const auto pos = grid_aligned_positions(d.ids);
    REQUIRE(pos.size() == d.ids.size());
    // mask cells share positions with the image cells
    for (size_t c = 0; c < 2; ++c) CHECK(pos[d.mask_block.begin + c] == pos[d.image_block.begin + c]);
    CHECK(pos[d.mask_block.begin - 1] == pos[d.image_block.begin - 1]);  // SOT
    // identity outside the mask block
    for (size_t n = 0; n + 1 < d.mask_block.begin; ++n) CHECK(pos[n] == static_cast<int>(n));
    // prefix property: positions of a prefix are the prefix of positions
    for (size_t len = 1; len <= d.ids.size(); ++len) {
      const auto pre = grid_aligned_positions(std::span<const int32_t>(d.ids.data(), len));
      CHECK(std::equal(pre.begin(), pre.end(), pos.begin()));
    }
  }

  TEST_CASE("document records round trip") {
    const VocabLayout v = VocabLayout::from({4, 64});
    std::vector<MultimodalDocument> docs;
    docs.push_back(build_document(std::vector<int32_t>{v.image_id(1)}, "a", std::vector<int32_t>{v.mask_id(2)}, 1, 1, v, "x"));
    docs.push_back(build_document(std::vector<int32_t>{v.image_id(3)}, "bb", std::vector<int32_t>{v.mask_id(4)}, 1, 1, v, "y"));
    std::stringstream ss;
    write_documents(ss, docs);
    CHECK(read_documents(ss, v) == docs);
  }
}
