#pragma once

#include "medvill/error.hpp"
#include "medvill/masks.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace medvill {

struct ConfigKey {
  std::string_view name;
  std::string_view default_value;
  std::string_view help;
};

/// Every key a run config may carry, with its default. Order here is the
/// canonical serialisation order.
inline constexpr std::array<ConfigKey, 31> kConfigKeys{{
    {"model.layers", "4", "transformer blocks"},
    {"model.heads", "4", "attention heads per block"},
    {"model.hidden", "64", "hidden size d"},
    {"model.ff", "256", "feed-forward width"},
    {"model.dropout", "0.1", "dropout on attention weights and feed-forward outputs"},
    {"model.neg", "-1e9", "additive constant for blocked attention entries"},
    {"model.precision", "32", "floating point width: 32 or 64"},
    {"model.pre_norm", "0", "1 = pre-normalisation blocks, 0 = post-normalisation"},
    {"image.size", "32", "square image side in pixels"},
    {"vis.encoder", "conv", "conv (strided conv stack) or patch (patch-linear)"},
    {"vis.strides", "4,2", "conv stage kernel=stride list; patch encoder uses their product"},
    {"vis.mid_channels", "32", "channels of intermediate conv stages"},
    {"vis.channels", "64", "visual feature width c"},
    {"vis.sample_k", "11", "visual features kept during pre-training"},
    {"text.max_len", "253", "language positions after truncation"},
    {"pretrain.scheme", "bar", "bi | s2s | bar | noncross | bi_s2s"},
    {"pretrain.s2s_prob", "0.75", "S2S probability of the bi_s2s schedule"},
    {"mlm.rate", "0.15", "token selection rate"},
    {"mlm.mask_prob", "0.8", "selected -> MASK"},
    {"mlm.rand_prob", "0.1", "selected -> random token (rest kept)"},
    {"optim.lr", "3e-4", "pre-training learning rate"},
    {"optim.weight_decay", "0.01", "decoupled weight decay"},
    {"train.batch", "32", "examples per optimiser step"},
    {"train.epochs", "20", "pre-training epochs"},
    {"finetune.lr", "3e-4", "fine-tuning learning rate"},
    {"finetune.epochs", "2", "fine-tuning epochs"},
    {"finetune.head_only", "0", "1 = train only the task head"},
    {"finetune.freeze_visual", "0", "1 = keep the visual encoder fixed"},
    {"gen.mask_rate", "0.5", "token selection rate of generation fine-tuning"},
    {"eval.trials", "100", "retrieval queries per direction"},
    {"seed", "0", "root seed"},
}};

/// Flat key=value configuration. Unknown keys are rejected; missing keys take
/// their documented default.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : kConfigKeys) values_[std::string(k.name)] = std::string(k.default_value);
  }

  static RunConfig parse(std::string_view text) {
    RunConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
      }
      cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key) const {
    const std::string& v = get(key);
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double out = std::stod(v, &used);
      if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const long long v = get_int(key);
    if (v != 0 && v != 1) throw ConfigError("config key '" + key + "' expects 0 or 1");
    return v == 1;
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      int v = 0;
      auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || ptr != item.data() + item.size() || v < 1) {
        throw ConfigError("config key '" + key + "' expects a comma-separated list of positive integers");
      }
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
    return out;
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

  /// Checks every key for type and range; throws ConfigError on the first problem.
  void validate() const {
    for (const char* k : {"model.layers", "model.heads", "model.hidden", "model.ff", "image.size", "vis.mid_channels",
                          "vis.channels", "vis.sample_k", "text.max_len", "train.batch", "train.epochs", "eval.trials"}) {
      if (get_int(k) < 1) throw ConfigError(std::string("config key '") + k + "' must be >= 1");
    }
    if (get_int("finetune.epochs") < 0) throw ConfigError("finetune.epochs must be >= 0");
    if (get_int("model.hidden") % get_int("model.heads") != 0) {
      throw ConfigError("model.hidden must be divisible by model.heads");
    }
    const double dropout = get_double("model.dropout");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
    if (get_double("model.neg") >= 0.0) throw ConfigError("model.neg must be negative");
    const long long precision = get_int("model.precision");
    if (precision != 32 && precision != 64) throw ConfigError("model.precision must be 32 or 64");
    get_bool("model.pre_norm");
    get_bool("finetune.head_only");
    get_bool("finetune.freeze_visual");
    const std::string& enc = get("vis.encoder");
    if (enc != "conv" && enc != "patch") throw ConfigError("vis.encoder must be conv or patch");
    int stride = 1;
    for (int s : get_int_list("vis.strides")) stride *= s;
    const long long size = get_int("image.size");
    if (size % stride != 0) throw ConfigError("image.size must be divisible by the product of vis.strides");
    const long long grid = (size / stride) * (size / stride);
    if (get_int("vis.sample_k") > grid) throw ConfigError("vis.sample_k exceeds the visual grid size");
    const std::string& scheme = get("pretrain.scheme");
    if (scheme != "bi_s2s") parse_mask_scheme(scheme);
    const double s2s = get_double("pretrain.s2s_prob");
    if (s2s < 0.0 || s2s > 1.0) throw ConfigError("pretrain.s2s_prob must lie in [0, 1]");
    const double rate = get_double("mlm.rate");
    if (rate <= 0.0 || rate >= 1.0) throw ConfigError("mlm.rate must lie in (0, 1)");
    const double gen_rate = get_double("gen.mask_rate");
    if (gen_rate <= 0.0 || gen_rate >= 1.0) throw ConfigError("gen.mask_rate must lie in (0, 1)");
    const double mask = get_double("mlm.mask_prob");
    const double rand = get_double("mlm.rand_prob");
    if (mask < 0.0 || rand < 0.0 || mask + rand > 1.0 + 1e-12) {
      throw ConfigError("mlm.mask_prob + mlm.rand_prob must lie in [0, 1]");
    }
    if (get_double("optim.lr") < 0.0 || get_double("finetune.lr") < 0.0) throw ConfigError("learning rates must be >= 0");
    if (get_double("optim.weight_decay") < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
    if (get_int("seed") < 0) throw ConfigError("seed must be >= 0");
  }

  /// Canonical text: every key in documented order.
  std::string serialize() const {
    std::ostringstream out;
    for (const auto& k : kConfigKeys) out << k.name << '=' << values_.at(std::string(k.name)) << '\n';
    return out.str();
  }

  bool operator==(const RunConfig&) const = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

/// Visual encoder geometry. Every conv stage uses kernel == stride.
struct VisualEncoderConfig {
  enum class Kind { Conv, PatchLinear };
  Kind kind = Kind::Conv;
  int image_size = 32;
  std::vector<int> strides{4, 2};
  int mid_channels = 32;
  int channels = 64;

  int total_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
  int grid_side() const { return image_size / total_stride(); }
  int grid_capacity() const { return grid_side() * grid_side(); }
};

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int hidden = 64;
  int ff = 256;
  double dropout = 0.1;
  double neg = kDefaultMaskNeg;
  int precision = 32;
  bool pre_norm = false;
  VisualEncoderConfig vis;
  int max_len = 253;
  int vocab_size = 0;
  int answer_count = 2;
  /// NonCrossing models carry CLS_L and a two-CLS matching head.
  bool language_cls = false;
  double layer_norm_eps = 1e-5;

  int head_dim() const { return hidden / heads; }
  int position_rows() const { return max_len + 4; }

  void validate() const {
    if (layers < 1 || heads < 1 || hidden < 1 || ff < 1) throw ConfigError("model dimensions must be positive");
    if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the head count");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (vocab_size < 6) throw ConfigError("vocabulary too small");
    if (vis.image_size % vis.total_stride() != 0) throw ConfigError("image size not divisible by total stride");
  }
};

inline ModelConfig model_config_from(const RunConfig& run, int vocab_size, int answer_count) {
  ModelConfig m;
  m.layers = static_cast<int>(run.get_int("model.layers"));
  m.heads = static_cast<int>(run.get_int("model.heads"));
  m.hidden = static_cast<int>(run.get_int("model.hidden"));
  m.ff = static_cast<int>(run.get_int("model.ff"));
  m.dropout = run.get_double("model.dropout");
  m.neg = run.get_double("model.neg");
  m.precision = static_cast<int>(run.get_int("model.precision"));
  m.pre_norm = run.get_bool("model.pre_norm");
  m.vis.kind = run.get("vis.encoder") == "patch" ? VisualEncoderConfig::Kind::PatchLinear
                                                 : VisualEncoderConfig::Kind::Conv;
  m.vis.image_size = static_cast<int>(run.get_int("image.size"));
  m.vis.strides = run.get_int_list("vis.strides");
  m.vis.mid_channels = static_cast<int>(run.get_int("vis.mid_channels"));
  m.vis.channels = static_cast<int>(run.get_int("vis.channels"));
  m.max_len = static_cast<int>(run.get_int("text.max_len"));
  m.vocab_size = vocab_size;
  m.answer_count = answer_count;
  m.language_cls = run.get("pretrain.scheme") == "noncross";
  m.validate();
  return m;
}

}  // namespace medvill
