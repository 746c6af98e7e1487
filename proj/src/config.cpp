#include "ntpseg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "ntpseg/error.hpp"

namespace ntpseg {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw InvalidInput("cannot format number");
  return std::string(buf, ptr);
}

namespace {

double parse_double(std::string_view key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError(std::string(key) + ": expected a number, got '" + v + "'");
  return out;
}

long long parse_int(std::string_view key, const std::string& v) {
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size())
    throw ConfigError(std::string(key) + ": expected an integer, got '" + v + "'");
  return out;
}

int parse_int32(std::string_view key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < -2147483647LL || x > 2147483647LL) throw ConfigError(std::string(key) + ": out of range");
  return static_cast<int>(x);
}

struct Entry {
  const char* key;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define NTP_INT(section, field, help)                                                        \
  Entry {                                                                                    \
    #section "." #field, help, [](const RunConfig& c) { return std::to_string(c.section.field); }, \
        [](RunConfig& c, const std::string& v) { c.section.field = parse_int32(#section "." #field, v); } \
  }
#define NTP_DBL(section, field, help)                                                         \
  Entry {                                                                                     \
    #section "." #field, help, [](const RunConfig& c) { return format_double(c.section.field); }, \
        [](RunConfig& c, const std::string& v) { c.section.field = parse_double(#section "." #field, v); } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      NTP_INT(codec, patch_size, "mask/image patch side p (2..4)"),
      NTP_INT(codec, intensity_bins, "image intensity bins"),
      NTP_INT(model, dim, "model width"),
      NTP_INT(model, n_layers, "transformer layers"),
      NTP_INT(model, n_heads, "query heads"),
      NTP_INT(model, n_kv_heads, "key/value heads"),
      NTP_DBL(model, ffn_mult, "SwiGLU hidden multiplier (rounded up to a multiple of 8)"),
      NTP_INT(model, max_seq_len, "maximum document length"),
      NTP_DBL(model, dropout, "dropout on attention weights and FFN output"),
      NTP_DBL(model, rope_base, "rotary base"),
      NTP_DBL(loss, alpha, "focal balancing factor"),
      NTP_DBL(loss, gamma, "focal exponent"),
      NTP_INT(loss, k, "tokens predicted per position (prediction heads); 1 disables NkTP"),
      NTP_INT(loss, m, "preceding tokens used as TCL negatives"),
      NTP_DBL(loss, lambda1, "TCL weight; 0 disables TCL"),
      NTP_DBL(loss, lambda2, "NkTP weight"),
      NTP_DBL(loss, lambda_het, "HET weight"),
      NTP_INT(loss, l, "HET negatives per position (even)"),
      Entry{"loss.het_start_epoch",
            "first epoch with HET; 'auto' = 60% of train.epochs, 'never' disables",
            [](const RunConfig& c) -> std::string {
              if (c.loss.het_start_epoch < 0) return "auto";
              if (c.loss.het_start_epoch >= LossConfig::kHetNever) return "never";
              return std::to_string(c.loss.het_start_epoch);
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "auto") {
                c.loss.het_start_epoch = -1;
              } else if (v == "never" || v == "inf") {
                c.loss.het_start_epoch = LossConfig::kHetNever;
              } else {
                c.loss.het_start_epoch = std::max(parse_int32("loss.het_start_epoch", v), -1);
              }
            }},
      NTP_INT(train, epochs, "training epochs"),
      NTP_INT(train, batch_size, "documents per optimizer step"),
      NTP_DBL(train, peak_lr, "peak learning rate"),
      NTP_DBL(train, min_lr, "final learning rate of the cosine schedule"),
      NTP_INT(train, warmup_steps, "linear warmup steps"),
      NTP_DBL(train, weight_decay, "AdamW decoupled weight decay"),
      NTP_DBL(train, beta1, "AdamW beta1"),
      NTP_DBL(train, beta2, "AdamW beta2"),
      NTP_DBL(train, adam_eps, "AdamW epsilon"),
      NTP_DBL(train, grad_clip, "global gradient norm limit (0 disables)"),
      Entry{"train.seed", "seed for init, shuffling and dropout",
            [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v) {
              const long long x = parse_int("train.seed", v);
              if (x < 0) throw ConfigError("train.seed must be >= 0");
              c.train.seed = static_cast<uint64_t>(x);
            }},
      NTP_INT(train, eval_every, "evaluate on the val split every N epochs (0 = never)"),
      NTP_INT(train, threads, "worker threads (0 = NTPSEG_THREADS or 1)"),
      Entry{"train.train_on_all_tokens", "also train on image and text positions (true/false)",
            [](const RunConfig& c) -> std::string { return c.train.train_on_all_tokens ? "true" : "false"; },
            [](RunConfig& c, const std::string& v) {
              if (v == "true" || v == "1") c.train.train_on_all_tokens = true;
              else if (v == "false" || v == "0") c.train.train_on_all_tokens = false;
              else throw ConfigError("train.train_on_all_tokens: expected true or false, got '" + v + "'");
            }},
      NTP_INT(decode, beam_width, "beam width for mask decoding"),
  };
  return table;
}

#undef NTP_INT
#undef NTP_DBL

const Entry& entry(std::string_view key) {
  for (const auto& e : entries())
    if (key == e.key) return e;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

RunConfig::RunConfig() {
  // p = 2 keeps the vocabulary small enough for 16 full-softmax heads on a CPU.
  codec.patch_size = 2;
  finalize();
}

void RunConfig::finalize() {
  codec.validate();
  model.vocab_size = VocabLayout::from(codec).vocab_size;
  model.k_heads = std::max(loss.k, 1);
  model.validate();
  loss.validate();
  train.validate();
  decode.validate();
}

void RunConfig::set(std::string_view key, const std::string& value) { entry(key).set(*this, value); }

std::string RunConfig::get(std::string_view key) const { return entry(key).get(*this); }

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& e : entries()) out[e.key] = e.get(*this);
  return out;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
  RunConfig c;
  for (const auto& [k, v] : values) c.set(k, v);
  c.finalize();
  return c;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& e : entries()) out << e.key << " = " << e.get(*this) << '\n';
  return out.str();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back({e.key, e.help});
    return k;
  }();
  return keys;
}

void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.finalize();
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

}  // namespace ntpseg
