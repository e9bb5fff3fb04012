#pragma once

#include "medvill/config.hpp"
#include "medvill/error.hpp"
#include "medvill/params.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>

namespace medvill {

/// Run configuration plus the data-derived sizes a model needs.
struct CheckpointMeta {
  RunConfig run;
  int vocab_size = 0;
  int answer_count = 2;
  /// Free-form provenance, e.g. "init", "pretrain:bar", "finetune:cls".
  std::string stage = "init";

  ModelConfig model_config() const { return model_config_from(run, vocab_size, answer_count); }

  std::string serialize() const {
    std::ostringstream out;
    out << run.serialize() << "@vocab_size=" << vocab_size << "\n@answer_count=" << answer_count << "\n@stage=" << stage
        << '\n';
    return out.str();
  }

  static CheckpointMeta parse(const std::string& text) {
    CheckpointMeta meta;
    std::istringstream in(text);
    std::string line, run_text;
    while (std::getline(in, line)) {
      if (line.rfind('@', 0) != 0) {
        run_text += line + '\n';
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("malformed checkpoint metadata line '" + line + "'");
      const std::string key = line.substr(1, eq - 1);
      const std::string value = line.substr(eq + 1);
      try {
        if (key == "vocab_size") {
          meta.vocab_size = std::stoi(value);
        } else if (key == "answer_count") {
          meta.answer_count = std::stoi(value);
        } else if (key == "stage") {
          meta.stage = value;
        } else {
          throw DataError("unknown checkpoint metadata key '" + key + "'");
        }
      } catch (const std::invalid_argument&) {
        throw DataError("malformed checkpoint metadata value '" + value + "'");
      }
    }
    meta.run = RunConfig::parse(run_text);
    return meta;
  }
};

template <typename T>
struct Checkpoint {
  CheckpointMeta meta;
  ModelParams<T> params;
};

namespace checkpoint_detail {

inline constexpr char kMagic[4] = {'M', 'V', 'C', '1'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put(std::ostream& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.write(bytes, sizeof(U));
}

template <typename U>
U get(std::istream& in, const char* what) {
  char bytes[sizeof(U)];
  if (!in.read(bytes, sizeof(U))) throw DataError(std::string("truncated checkpoint while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint32_t>(in, what);
  if (n > (1u << 28)) throw DataError(std::string("implausible string length in checkpoint ") + what);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw DataError(std::string("truncated checkpoint while reading ") + what);
  return s;
}

}  // namespace checkpoint_detail

/// Layout ("MVC1"), all integers little-endian:
///   magic[4] version:u32 config:str count:u32
///   per tensor: name:str rank:u32 dims:u32[rank] precision:u8 (4|8) payload (row-major)
/// where str = length:u32 + bytes.
template <typename T>
std::string encode_checkpoint(const Checkpoint<T>& ckpt) {
  using namespace checkpoint_detail;
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put_string(out, ckpt.meta.serialize());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.tensors.size()));
  for (const auto& [name, m] : ckpt.params.tensors) {
    put_string(out, name);
    put<std::uint32_t>(out, 2);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T)));
    for (Eigen::Index i = 0; i < m.size(); ++i) put<T>(out, m.data()[i]);
  }
  return out.str();
}

/// Decodes and checks every tensor against the shapes implied by the stored
/// config. Payloads of either precision are converted to T.
template <typename T>
Checkpoint<T> decode_checkpoint(const std::string& bytes) {
  using namespace checkpoint_detail;
  std::istringstream in(bytes, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not an MVC1 checkpoint");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint<T> ckpt;
  ckpt.meta = CheckpointMeta::parse(get_string(in, "config"));
  const auto count = get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = get_string(in, "tensor name");
    const auto rank = get<std::uint32_t>(in, "rank");
    if (rank != 2) throw DataError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    const auto rows = get<std::uint32_t>(in, "dims");
    const auto cols = get<std::uint32_t>(in, "dims");
    const auto width = get<std::uint8_t>(in, "precision");
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (width == 4) {
        m.data()[i] = static_cast<T>(get<float>(in, "payload"));
      } else if (width == 8) {
        m.data()[i] = static_cast<T>(get<double>(in, "payload"));
      } else {
        throw DataError("tensor '" + name + "' has unknown precision flag " + std::to_string(width));
      }
    }
    ckpt.params.tensors.emplace(std::move(name), std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after checkpoint payload");
  validate_shapes(ckpt.params, ckpt.meta.model_config());
  return ckpt;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint<T>(buf.str());
}

}  // namespace medvill
