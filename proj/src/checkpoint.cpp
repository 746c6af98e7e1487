#include "ntpseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ntpseg/error.hpp"

namespace ntpseg {

using json = nlohmann::json;

namespace {

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, std::span<const float> xs) {
  for (float x : xs) {
    const uint32_t u = std::bit_cast<uint32_t>(x);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
}

void get_floats(const std::string& in, size_t at, std::span<float> xs) {
  for (size_t k = 0; k < xs.size(); ++k) {
    uint32_t u = 0;
    for (int i = 0; i < 4; ++i)
      u |= static_cast<uint32_t>(static_cast<unsigned char>(in[at + 4 * k + i])) << (8 * i);
    xs[k] = std::bit_cast<float>(u);
  }
}

}  // namespace

std::string encode_checkpoint(const RunConfig& cfg, const TrainState& state) {
  const ParamLayout& layout = state.model.layout();
  const size_t P = layout.total();
  json header;
  header["format"] = "ntpseg-checkpoint";
  header["version"] = 1;
  header["config"] = cfg.to_map();
  json index = json::array();
  size_t offset = 0;
  for (const char* group : {"", "adam.m/", "adam.v/"}) {
    for (const TensorInfo& t : layout.tensors()) {
      index.push_back({{"name", std::string(group) + t.name},
                       {"shape", {t.rows, t.cols}},
                       {"offset", offset},
                       {"dtype", "f32"}});
      offset += 4 * t.size();
    }
  }
  header["tensors"] = std::move(index);
  header["state"] = {{"epoch", state.epoch}, {"step", state.step}, {"adam_t", state.adam.t}};
  json mem = json::array();
  for (const auto& r : state.het.records())
    mem.push_back({{"sample_id", r.sample_id},
                   {"position", r.position},
                   {"tokens", r.tokens},
                   {"last_updated_epoch", r.last_updated_epoch}});
  header["het_memory"] = std::move(mem);

  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 8);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 12 * P);
  put_floats(out, state.model.params());
  const std::vector<float> zeros(state.adam.m.empty() || state.adam.v.empty() ? P : 0, 0.0f);
  put_floats(out, state.adam.m.empty() ? zeros : state.adam.m);
  put_floats(out, state.adam.v.empty() ? zeros : state.adam.v);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                     const TrainState& state) {
  const std::string bytes = encode_checkpoint(cfg, state);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw LoadError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  auto fail = [&](const std::string& msg) -> LoadError { return LoadError(origin + ": " + msg); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw fail("not a checkpoint (bad magic)");
  const uint64_t hlen = get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  }
  try {
    if (header.at("format") != "ntpseg-checkpoint" || header.at("version") != 1)
      throw fail("unsupported format");
    const RunConfig cfg =
        RunConfig::from_map(header.at("config").get<std::map<std::string, std::string>>());
    TrainState state{Model<float>(cfg.model), {}, {}, 0, 0};
    const ParamLayout& layout = state.model.layout();
    const size_t P = layout.total();
    const auto& index = header.at("tensors");
    const size_t n = layout.tensors().size();
    if (index.size() != 3 * n) throw fail("tensor index does not match the configured model");
    size_t offset = 0;
    for (size_t g = 0; g < 3; ++g) {
      const char* prefix = g == 0 ? "" : (g == 1 ? "adam.m/" : "adam.v/");
      for (size_t i = 0; i < n; ++i) {
        const auto& e = index[g * n + i];
        const TensorInfo& t = layout[i];
        if (e.at("name").get<std::string>() != std::string(prefix) + t.name ||
            e.at("shape").at(0).get<int>() != t.rows || e.at("shape").at(1).get<int>() != t.cols ||
            e.at("offset").get<size_t>() != offset || e.at("dtype") != "f32")
          throw fail("tensor index entry " + std::to_string(g * n + i) + " does not match '" +
                     prefix + t.name + "'");
        offset += 4 * t.size();
      }
    }
    const size_t data_at = 16 + hlen;
    if (bytes.size() - data_at != 12 * P)
      throw fail("tensor data has " + std::to_string(bytes.size() - data_at) + " bytes, expected " +
                 std::to_string(12 * P));
    get_floats(bytes, data_at, state.model.params());
    state.adam.m.resize(P);
    state.adam.v.resize(P);
    get_floats(bytes, data_at + 4 * P, state.adam.m);
    get_floats(bytes, data_at + 8 * P, state.adam.v);
    const auto& st = header.at("state");
    state.epoch = st.at("epoch").get<int>();
    state.step = st.at("step").get<int64_t>();
    state.adam.t = st.at("adam_t").get<int64_t>();
    std::vector<HetMemory::Record> records;
    for (const auto& r : header.at("het_memory"))
      records.push_back({r.at("sample_id").get<std::string>(), r.at("position").get<int>(),
                         r.at("tokens").get<std::vector<int32_t>>(),
                         r.at("last_updated_epoch").get<int>()});
    state.het = HetMemory::from_records(records);
    return {cfg, std::move(state)};
  } catch (const json::exception& e) {
    throw fail(std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(std::string("bad config: ") + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

}  // namespace ntpseg
