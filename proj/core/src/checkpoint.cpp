#include "pdit/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pdit/config.hpp"
#include "pdit/error.hpp"

namespace pdit::checkpoint {
namespace {

using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'D', 'I', 'T'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(std::string_view bytes, std::size_t at) {
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
  const model::ModelParams& params = ckpt.model.params;
  ordered_json table = ordered_json::object();
  std::string payload;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.tensors()[i];
    const std::size_t bytes = t.size() * sizeof(float);
    table[params.name(i)] = {{"shape", t.shape()}, {"offset", payload.size()}, {"length", bytes}};
    payload.append(reinterpret_cast<const char*>(t.ptr()), bytes);
  }
  ordered_json header;
  header["arch"] = std::string(model::to_string(ckpt.model.config.arch));
  header["config_hash"] = ckpt.config_hash;
  header["model_config"] = ordered_json::parse(config::model_to_json(ckpt.model.config));
  header["env"] = ordered_json::parse(config::env_to_json(ckpt.env));
  header["tensors"] = std::move(table);
  const std::string head = header.dump();

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, head.size());
  out += head;
  out += payload;
  put<std::uint32_t>(out, crc32_of(payload));
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  constexpr std::size_t kPrefix = 4 + 4 + 8;
  if (bytes.size() < kPrefix + 4) throw CorruptArtifact("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptArtifact("checkpoint: bad magic");
  const auto version = take<std::uint32_t>(bytes, 4);
  if (version != kFormatVersion)
    throw CorruptArtifact("checkpoint: unsupported format version " + std::to_string(version));
  const auto head_len = take<std::uint64_t>(bytes, 8);
  if (head_len > bytes.size() - kPrefix - 4) throw CorruptArtifact("checkpoint: header length out of bounds");
  const std::string_view head = bytes.substr(kPrefix, head_len);
  const std::string_view payload = bytes.substr(kPrefix + head_len, bytes.size() - kPrefix - head_len - 4);
  if (crc32_of(payload) != take<std::uint32_t>(bytes, bytes.size() - 4))
    throw CorruptArtifact("checkpoint: CRC mismatch");

  Checkpoint ckpt;
  try {
    const auto header = ordered_json::parse(head);
    ckpt.model.config = config::model_from_json(header.at("model_config").dump());
    if (header.at("arch").get<std::string>() != model::to_string(ckpt.model.config.arch))
      throw CorruptArtifact("checkpoint: arch disagrees with model_config");
    ckpt.env = config::env_from_json(header.at("env").dump());
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    ckpt.model.params = model::init_params(ckpt.model.config, 0);

    const auto& table = header.at("tensors");
    model::ModelParams& params = ckpt.model.params;
    if (table.size() != params.size()) throw CorruptArtifact("checkpoint: tensor count mismatch");
    std::size_t expected_offset = 0;
    std::size_t i = 0;
    for (const auto& [name, entry] : table.items()) {
      if (name != params.name(i)) throw CorruptArtifact("checkpoint: unexpected tensor '" + name + "'");
      Tensor& t = params.tensors()[i];
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      if (shape != t.shape()) throw CorruptArtifact("checkpoint: shape mismatch for '" + name + "'");
      if (offset != expected_offset || length != t.size() * sizeof(float) || offset + length > payload.size())
        throw CorruptArtifact("checkpoint: bad extent for '" + name + "'");
      std::memcpy(t.ptr(), payload.data() + offset, length);
      if (!t.all_finite()) throw CorruptArtifact("checkpoint: non-finite values in '" + name + "'");
      expected_offset += length;
      ++i;
    }
    if (expected_offset != payload.size()) throw CorruptArtifact("checkpoint: trailing payload bytes");
  } catch (const CorruptArtifact&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptArtifact(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptArtifact("checkpoint: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace pdit::checkpoint
