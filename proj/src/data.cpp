#include "ntpseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "ntpseg/error.hpp"
#include "ntpseg/rng.hpp"

namespace ntpseg {

using json = nlohmann::json;

ImageGrid read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw LoadError("cannot read PNG '" + path.string() + "': " + img.message);
  img.format = PNG_FORMAT_GRAY;
  ImageGrid out;
  out.height = static_cast<int>(img.height);
  out.width = static_cast<int>(img.width);
  out.intensity.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.intensity.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw LoadError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return out;
}

void write_png(const fs::path& path, const ImageGrid& image) {
  if (image.height <= 0 || image.width <= 0 ||
      image.intensity.size() != static_cast<size_t>(image.height) * image.width)
    throw InvalidInput("write_png: bad image dimensions");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.intensity.data(), 0, nullptr))
    throw LoadError("cannot write PNG '" + path.string() + "': " + img.message);
}

void write_mask_png(const fs::path& path, const MaskGrid& mask) {
  ImageGrid g{mask.height, mask.width, {}};
  g.intensity.reserve(mask.bits.size());
  for (uint8_t b : mask.bits) g.intensity.push_back(b ? 255 : 0);
  write_png(path, g);
}

MaskGrid read_mask_png(const fs::path& path) { return binarize(read_png(path)); }

std::string region_of(double y, double x, int size) {
  const int row = std::clamp(static_cast<int>(std::floor(3.0 * y / size)), 0, 2);
  const int side = x < size / 2.0 ? 0 : 1;
  return std::string(kRegionNames[side * 3 + row]);
}

namespace {

const char* kCountWords[] = {"zero", "one", "two", "three"};

struct Cell {
  double top, bottom, left, right;
};

Cell region_cell(int region, int size) {
  const int row = region % 3;
  const int side = region / 3;
  return {row * size / 3.0, (row + 1) * size / 3.0, side * size / 2.0, (side + 1) * size / 2.0};
}

// Pixels whose centre lies inside the axis-aligned ellipse.
std::vector<int> rasterize(double cy, double cx, double ry, double rx, int size) {
  std::vector<int> px;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double dy = (r + 0.5 - cy) / ry;
      const double dx = (c + 0.5 - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) px.push_back(r * size + c);
    }
  }
  return px;
}

bool touches(const std::vector<int>& px, const std::vector<uint8_t>& taken, int size) {
  for (int p : px) {
    const int r = p / size, c = p % size;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= size || cc >= size) continue;
        if (taken[static_cast<size_t>(rr * size + cc)]) return true;
      }
    }
  }
  return false;
}

bool try_layout(Rng& rng, int size, SyntheticSample& s) {
  const int n_regions = rng.uniform() < 0.5 ? 1 : 2;
  std::vector<int> regions;
  while (static_cast<int>(regions.size()) < n_regions) {
    const int r = rng.range(0, 5);
    if (std::find(regions.begin(), regions.end(), r) == regions.end()) regions.push_back(r);
  }
  std::sort(regions.begin(), regions.end());
  const int count = rng.range(n_regions, 3);
  std::vector<int> owners(regions.begin(), regions.end());
  while (static_cast<int>(owners.size()) < count) owners.push_back(regions[rng.below(regions.size())]);

  s.mask = MaskGrid{size, size, std::vector<uint8_t>(static_cast<size_t>(size) * size, 0)};
  s.blobs.clear();
  for (int region : owners) {
    const Cell cell = region_cell(region, size);
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      Blob b;
      b.ry = rng.uniform(0.07, 0.12) * size;
      b.rx = rng.uniform(0.07, 0.12) * size;
      const double y_lo = std::max(cell.top + 0.5, b.ry + 0.5);
      const double y_hi = std::min(cell.bottom - 0.5, size - b.ry - 0.5);
      const double x_lo = std::max(cell.left + 0.5, b.rx + 0.5);
      const double x_hi = std::min(cell.right - 0.5, size - b.rx - 0.5);
      if (y_lo >= y_hi || x_lo >= x_hi) continue;
      b.cy = rng.uniform(y_lo, y_hi);
      b.cx = rng.uniform(x_lo, x_hi);
      const auto px = rasterize(b.cy, b.cx, b.ry, b.rx, size);
      if (px.size() < 4 || touches(px, s.mask.bits, size)) continue;
      double my = 0, mx = 0;
      for (int p : px) {
        my += p / size + 0.5;
        mx += p % size + 0.5;
      }
      my /= static_cast<double>(px.size());
      mx /= static_cast<double>(px.size());
      b.region = std::string(kRegionNames[region]);
      if (region_of(my, mx, size) != b.region) continue;
      for (int p : px) s.mask.bits[static_cast<size_t>(p)] = 1;
      b.pixels = px.size();
      s.blobs.push_back(b);
      placed = true;
    }
    if (!placed) return false;
  }

  const bool left = std::any_of(regions.begin(), regions.end(), [](int r) { return r < 3; });
  const bool right = std::any_of(regions.begin(), regions.end(), [](int r) { return r >= 3; });
  std::string text = (left && right) ? "bilateral" : "unilateral";
  text += " infection, ";
  text += kCountWords[count];
  text += count == 1 ? " infected area, " : " infected areas, ";
  for (size_t i = 0; i < regions.size(); ++i) {
    if (i) text += " and ";
    text += kRegionNames[regions[i]];
  }
  s.description = text;
  return true;
}

void paint(Rng& rng, int size, SyntheticSample& s) {
  s.image = ImageGrid{size, size, std::vector<uint8_t>(static_cast<size_t>(size) * size)};
  const double phase1 = rng.uniform(0.0, 6.283185307179586);
  const double phase2 = rng.uniform(0.0, 6.283185307179586);
  const double freq = rng.uniform(0.5, 0.9);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double y = (r + 0.5) / size, x = (c + 0.5) / size;
      double v = 20.0;
      for (double lobe_x : {0.28, 0.72}) {
        const double dy = (y - 0.52) / 0.40, dx = (x - lobe_x) / 0.19;
        if (dy * dy + dx * dx <= 1.0) v = 75.0;
      }
      // soft ribbed texture plus pixel noise
      v += 10.0 * std::sin(freq * r + phase1) * std::cos(0.7 * freq * c + phase2);
      v += rng.uniform(-6.0, 6.0);
      if (s.mask.bits[static_cast<size_t>(r * size + c)]) v += 120.0;
      s.image.intensity[static_cast<size_t>(r * size + c)] =
          static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
}

std::string sample_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "syn_%05d", index);
  return buf;
}

}  // namespace

SyntheticSample synthesize_sample(uint64_t seed, int index, int img_size) {
  if (img_size < 12) throw InvalidInput("synthesize_sample: img_size must be >= 12");
  Rng rng(hash_combine(seed, static_cast<uint64_t>(index)));
  SyntheticSample s;
  s.sample_id = sample_name(index);
  while (!try_layout(rng, img_size, s)) {
  }
  paint(rng, img_size, s);
  return s;
}

std::vector<SampleRecord> generate_synthetic(const fs::path& root, const SynthConfig& cfg) {
  if (cfg.n < 1) throw InvalidInput("synth: n must be >= 1");
  if (cfg.n_val < 0 || cfg.n_test < 0 || cfg.n_val + cfg.n_test > cfg.n)
    throw InvalidInput("synth: split sizes exceed n");
  for (const char* sub : {"images", "masks", "texts"}) fs::create_directories(root / sub);
  std::vector<SampleRecord> records;
  const int n_train = cfg.n - cfg.n_val - cfg.n_test;
  for (int i = 0; i < cfg.n; ++i) {
    const SyntheticSample s = synthesize_sample(cfg.seed, i, cfg.img_size);
    SampleRecord rec;
    rec.sample_id = s.sample_id;
    rec.image = "images/" + s.sample_id + ".png";
    rec.mask = "masks/" + s.sample_id + ".png";
    rec.text = "texts/" + s.sample_id + ".txt";
    rec.description = s.description;
    rec.split = i < n_train ? "train" : (i < n_train + cfg.n_val ? "val" : "test");
    write_png(root / rec.image, s.image);
    write_mask_png(root / rec.mask, s.mask);
    std::ofstream(root / rec.text, std::ios::binary) << s.description << '\n';
    records.push_back(std::move(rec));
  }
  save_manifest(root, records);
  return records;
}

void save_manifest(const fs::path& root, const std::vector<SampleRecord>& records) {
  std::ofstream out(root / "manifest.jsonl", std::ios::binary);
  if (!out) throw LoadError("cannot write manifest in '" + root.string() + "'");
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["sample_id"] = r.sample_id;
    j["image"] = r.image;
    j["mask"] = r.mask;
    j["text"] = r.text;
    j["description"] = r.description;
    j["split"] = r.split;
    out << j.dump() << '\n';
  }
}

namespace {

std::string trim_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

std::vector<SampleRecord> load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.jsonl";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing manifest '" + path.string() + "'");
  std::vector<SampleRecord> out;
  std::set<std::string> seen;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    SampleRecord r;
    try {
      const json j = json::parse(line);
      r.sample_id = j.at("sample_id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.mask = j.at("mask").get<std::string>();
      r.text = j.value("text", std::string());
      r.description = j.value("description", std::string());
      r.split = j.value("split", std::string("train"));
    } catch (const json::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (r.split != "train" && r.split != "val" && r.split != "test")
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": unknown split '" + r.split + "'");
    if (!seen.insert(r.sample_id).second)
      throw LoadError("duplicate sample_id '" + r.sample_id + "' in " + path.string());
    for (const std::string* p : {&r.image, &r.mask}) {
      if (!fs::exists(root / *p))
        throw LoadError("sample '" + r.sample_id + "' references missing file '" + (root / *p).string() + "'");
    }
    if (r.description.empty()) {
      if (r.text.empty() || !fs::exists(root / r.text))
        throw LoadError("sample '" + r.sample_id + "' has no description and no text file");
      std::ifstream t(root / r.text, std::ios::binary);
      std::stringstream ss;
      ss << t.rdbuf();
      r.description = trim_newlines(ss.str());
    } else if (!r.text.empty() && !fs::exists(root / r.text)) {
      throw LoadError("sample '" + r.sample_id + "' references missing file '" + (root / r.text).string() + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

MultimodalDocument make_document(const ImageGrid& image, const MaskGrid& mask,
                                 std::string_view description, const VocabLayout& layout,
                                 std::string sample_id) {
  if (image.height != mask.height || image.width != mask.width)
    throw InvalidInput("sample '" + sample_id + "': image and mask sizes differ");
  const CodecConfig cc = layout.codec();
  const auto image_ids = to_image_ids(encode_image(image, cc), layout);
  const auto mask_ids = to_mask_ids(encode_mask(mask, cc), layout);
  return build_document(image_ids, description, mask_ids, image.height / cc.patch_size,
                        image.width / cc.patch_size, layout, std::move(sample_id));
}

std::vector<LoadedSample> load_split(const fs::path& root, std::string_view split,
                                     const VocabLayout& layout) {
  std::vector<LoadedSample> out;
  for (auto& rec : load_manifest(root)) {
    if (!split.empty() && rec.split != split) continue;
    LoadedSample s;
    s.image = read_png(root / rec.image);
    s.mask = read_mask_png(root / rec.mask);
    s.doc = make_document(s.image, s.mask, rec.description, layout, rec.sample_id);
    s.record = std::move(rec);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ntpseg
