#include "lovis/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>
#include <openssl/evp.h>

#include "lovis/errors.hpp"

namespace lovis {

void Config::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  pretrain.seed = s;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

double parse_double(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(d)) throw ConfigError("expected a number, got '" + v + "'");
  return d;
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double in_range(double d, double lo, double hi, const char* key) {
  if (d < lo || d > hi) throw ConfigError(fmt::format("{} = {} is outside [{}, {}]", key, d, lo, hi));
  return d;
}

std::uint64_t in_range(std::uint64_t u, std::uint64_t lo, std::uint64_t hi, const char* key) {
  if (u < lo || u > hi) throw ConfigError(fmt::format("{} = {} is outside [{}, {}]", key, u, lo, hi));
  return u;
}

std::string num(double d) { return fmt::format("{}", d); }

const std::map<std::string, Field>& fields() {
  using C = Config;
  using S = const std::string&;
#define UINT_FIELD(key, member, lo, hi)                                                      \
  {                                                                                          \
    key, Field {                                                                             \
      [](C& c, S v) { c.member = static_cast<decltype(c.member)>(in_range(parse_uint(v), lo, hi, key)); }, \
          [](const C& c) { return std::to_string(c.member); }                                \
    }                                                                                        \
  }
#define REAL_FIELD(key, member, lo, hi)                                        \
  {                                                                            \
    key, Field {                                                               \
      [](C& c, S v) { c.member = in_range(parse_double(v), lo, hi, key); },    \
          [](const C& c) { return num(c.member); }                             \
    }                                                                          \
  }
  static const std::map<std::string, Field> table = {
      UINT_FIELD("d_model", model.d_model, 2, 1024),
      UINT_FIELD("heads", model.heads, 1, 64),
      UINT_FIELD("n_text", model.n_text, 1, 9),
      UINT_FIELD("n_cross", model.n_cross, 1, 4),
      UINT_FIELD("d_ff", model.d_ff, 1, 4096),
      UINT_FIELD("d_v", model.d_v, 4, 1024),
      REAL_FIELD("init_std", model.init_std, 1e-6, 1.0),
      REAL_FIELD("lr", train.lr, 1e-8, 1.0),
      REAL_FIELD("lambda", train.lambda, 0.0, 1e9),
      REAL_FIELD("weight_decay", train.weight_decay, 0.0, 1.0),
      REAL_FIELD("grad_clip", train.grad_clip, 1e-6, 1e9),
      UINT_FIELD("iterations", train.iterations, 1, 100000000),
      UINT_FIELD("batch_size", train.batch_size, 1, 4096),
      UINT_FIELD("max_steps", train.max_steps, 0, 1000),
      UINT_FIELD("eval_every", train.eval_every, 1, 100000000),
      REAL_FIELD("gamma", train.reward.gamma, 0.0, 1.0),
      REAL_FIELD("success_bonus", train.reward.success_bonus, 0.0, 1e6),
      REAL_FIELD("distance_scale", train.reward.distance_scale, 0.0, 1e6),
      UINT_FIELD("pretrain_steps", pretrain.steps, 0, 100000000),
      UINT_FIELD("pretrain_batch_size", pretrain.batch_size, 1, 4096),
      REAL_FIELD("pretrain_lr", pretrain.lr, 1e-8, 1.0),
      UINT_FIELD("houses", data.houses, 3, 10000),
      UINT_FIELD("episodes", data.episodes, 1, 1000000),
      UINT_FIELD("viewpoints", data.world.viewpoints, 4, 100000),
      REAL_FIELD("noise_sigma", data.world.noise_sigma, 0.0, 10.0),
      {"style", Field{[](C& c, S v) { c.data.style = parse_style(v); },
                      [](const C& c) { return to_string(c.data.style); }}},
      {"modules", Field{[](C& c, S v) { c.train.modules = ModuleFlags::parse(v); },
                        [](const C& c) { return c.train.modules.to_string(); }}},
      {"pretrain_tasks", Field{[](C& c, S v) { c.pretrain.tasks = TaskFlags::parse(v); },
                               [](const C& c) { return c.pretrain.tasks.to_string(); }}},
      {"seed", Field{[](C& c, S v) { c.apply_seed(parse_uint(v)); }, [](const C& c) { return std::to_string(c.seed); }}},
  };
#undef UINT_FIELD
#undef REAL_FIELD
  return table;
}

}  // namespace

Config parse_config_text(const std::string& text, const std::string& source) {
  Config cfg;
  cfg.apply_seed(cfg.seed);
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto where = fmt::format("{}:{}: ", source, line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.model.validate();
    cfg.train.validate();
    cfg.pretrain.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

Config parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str(), path.string());
}

std::string config_to_text(const Config& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string sha1_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-1 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

}  // namespace

std::string git_blob_hash(const std::string& bytes) {
  std::string payload = "blob " + std::to_string(bytes.size());
  payload.push_back('\0');
  payload += bytes;
  return sha1_hex(payload);
}

std::string dataset_hash(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    entries.emplace_back(fs::relative(e.path(), dir).generic_string(), git_blob_hash(os.str()));
  }
  std::sort(entries.begin(), entries.end());
  std::string listing;
  for (const auto& [path, hash] : entries) listing += hash + " " + path + "\n";
  return git_blob_hash(listing);
}

std::string manifest_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["seed"] = m.config.seed;
  nlohmann::ordered_json cfg;
  std::istringstream in(config_to_text(m.config));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    cfg[line.substr(0, eq)] = line.substr(eq + 3);
  }
  j["config"] = cfg;
  j["dataset_dir"] = m.dataset_dir;
  j["dataset_hash"] = m.dataset_hash;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["started_utc"] = m.started_utc;
  return j.dump(2);
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest_json(manifest) << '\n';
}

}  // namespace lovis
