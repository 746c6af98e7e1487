#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ntpseg/codec.hpp"
#include "ntpseg/sequence.hpp"

namespace ntpseg {

namespace fs = std::filesystem;

// 8-bit grayscale PNG through libpng's simplified API. Colour inputs are
// converted to gray on read.
ImageGrid read_png(const fs::path& path);
void write_png(const fs::path& path, const ImageGrid& image);
void write_mask_png(const fs::path& path, const MaskGrid& mask);  // 0 / 255
MaskGrid read_mask_png(const fs::path& path);                      // binarized at 128

struct SampleRecord {
  std::string sample_id;
  std::string image;  // paths relative to the dataset root
  std::string mask;
  std::string text;
  std::string description;
  std::string split;  // train, val or test
  bool operator==(const SampleRecord&) const = default;
};

struct SynthConfig {
  uint64_t seed = 0;
  int n = 32;
  int img_size = 32;
  int n_val = 0;
  int n_test = 0;  // the last n_test indices form the test split, the n_val before them val
};

// Geometry of one generated lesion, kept for checks.
struct Blob {
  double cy = 0, cx = 0;  // centre, pixel units (pixel (r, c) has centre (r + 0.5, c + 0.5))
  double ry = 0, rx = 0;  // semi-axes
  std::string region;
  size_t pixels = 0;
};

struct SyntheticSample {
  std::string sample_id;
  ImageGrid image;
  MaskGrid mask;
  std::string description;
  std::vector<Blob> blobs;
};

inline constexpr std::string_view kRegionNames[6] = {"upper left",  "middle left",  "lower left",
                                                     "upper right", "middle right", "lower right"};

// Region name of a point: thirds of the height, halves of the width.
std::string region_of(double y, double x, int size);

// Deterministic in (seed, index).
SyntheticSample synthesize_sample(uint64_t seed, int index, int img_size);

// Writes images/, masks/, texts/ and manifest.jsonl below `root`.
std::vector<SampleRecord> generate_synthetic(const fs::path& root, const SynthConfig& cfg);

void save_manifest(const fs::path& root, const std::vector<SampleRecord>& records);
// Validates unique ids, known splits and that every referenced file exists.
std::vector<SampleRecord> load_manifest(const fs::path& root);

// Tokenizes one (image, mask, description) triple.
MultimodalDocument make_document(const ImageGrid& image, const MaskGrid& mask,
                                 std::string_view description, const VocabLayout& layout,
                                 std::string sample_id = {});

struct LoadedSample {
  SampleRecord record;
  ImageGrid image;
  MaskGrid mask;
  MultimodalDocument doc;
};

// Records of `split` (all when empty) read from disk and tokenized.
std::vector<LoadedSample> load_split(const fs::path& root, std::string_view split,
                                     const VocabLayout& layout);

}  // namespace ntpseg
