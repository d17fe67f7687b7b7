#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialclip/errors.hpp"
#include "dialclip/model.hpp"

namespace dialclip {

// File layout: 8-byte magic, u64 little-endian manifest length, UTF-8 JSON
// manifest, then every parameter as little-endian f32 in manifest order.
inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'C', 'L', 'Z', '0', '0', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_model"] = c.encoder.d_model;
  j["n_layers"] = c.encoder.n_layers;
  j["n_heads"] = c.encoder.n_heads;
  j["vocab_size"] = c.encoder.vocab_size;
  j["max_seq"] = c.encoder.max_seq;
  j["patch_dim"] = c.encoder.patch_dim;
  j["n_patches"] = c.encoder.n_patches;
  j["ffn_mult"] = c.encoder.ffn_mult;
  j["cpg_layers"] = c.cpg_layers;
  j["context_len"] = c.context_len;
  j["domain_len"] = c.domain_len;
  j["insert_layer"] = c.insert_layer;
  j["proj_dim"] = c.proj_dim;
  j["bottleneck"] = c.bottleneck;
  j["use_cpg"] = c.use_cpg;
  j["use_mop"] = c.use_mop;
  j["prompt_init_std"] = c.prompt_init_std;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  j.at("d_model").get_to(c.encoder.d_model);
  j.at("n_layers").get_to(c.encoder.n_layers);
  j.at("n_heads").get_to(c.encoder.n_heads);
  j.at("vocab_size").get_to(c.encoder.vocab_size);
  j.at("max_seq").get_to(c.encoder.max_seq);
  j.at("patch_dim").get_to(c.encoder.patch_dim);
  j.at("n_patches").get_to(c.encoder.n_patches);
  j.at("ffn_mult").get_to(c.encoder.ffn_mult);
  j.at("cpg_layers").get_to(c.cpg_layers);
  j.at("context_len").get_to(c.context_len);
  j.at("domain_len").get_to(c.domain_len);
  j.at("insert_layer").get_to(c.insert_layer);
  j.at("proj_dim").get_to(c.proj_dim);
  j.at("bottleneck").get_to(c.bottleneck);
  j.at("use_cpg").get_to(c.use_cpg);
  j.at("use_mop").get_to(c.use_mop);
  j.at("prompt_init_std").get_to(c.prompt_init_std);
  j.at("seed").get_to(c.seed);
  return c;
}

namespace checkpoint_detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace checkpoint_detail

/// Serialized bytes of a checkpoint. Values are stored as f32, so a reload
/// reproduces f32-rounded parameters.
inline std::string checkpoint_bytes(const DialClipModel& model) {
  using namespace checkpoint_detail;
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = model_config_to_json(model.config());
  manifest["backbone_ready"] = model.backbone_ready();
  std::string blob;
  auto& params = manifest["params"] = nlohmann::ordered_json::array();
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
    for (double v : p.tensor.values()) put_f32(blob, v);
  }
  manifest["blob_bytes"] = blob.size();
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

inline void save_checkpoint(const DialClipModel& model, const std::string& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw LoadError("failed writing '" + path + "'");
}

/// Rebuilds a model from checkpoint bytes. Nothing is returned unless every
/// check passes.
inline DialClipModel model_from_checkpoint_bytes(const std::string& bytes) {
  using namespace checkpoint_detail;
  if (bytes.size() < kCheckpointMagic.size())
    throw TruncationError("checkpoint shorter than its magic header");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
    throw CorruptManifestError("not a checkpoint file (bad magic)");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw VersionError("unsupported checkpoint magic '" + bytes.substr(0, 8) + "'");
  if (bytes.size() < 16) throw TruncationError("checkpoint truncated inside the manifest length");
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw TruncationError("checkpoint truncated inside the manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("format_version"))
    throw CorruptManifestError("manifest lacks format_version");
  if (!manifest["format_version"].is_number_integer() || manifest["format_version"].get<int>() != kCheckpointVersion)
    throw VersionError("checkpoint format version " + manifest["format_version"].dump() + ", expected " +
                       std::to_string(kCheckpointVersion));

  ModelConfig cfg;
  std::size_t blob_bytes = 0;
  bool ready = false;
  try {
    cfg = model_config_from_json(manifest.at("config"));
    blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
    ready = manifest.at("backbone_ready").get<bool>();
    (void)manifest.at("params");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptManifestError(std::string("manifest field problem: ") + e.what());
  }
  const std::size_t blob_start = 16 + mlen;
  if (bytes.size() - blob_start < blob_bytes)
    throw TruncationError("checkpoint blob holds " + std::to_string(bytes.size() - blob_start) + " of " +
                          std::to_string(blob_bytes) + " bytes");

  DialClipModel model = [&] {
    try {
      return DialClipModel(cfg);
    } catch (const ConfigError& e) {
      throw CorruptManifestError(std::string("manifest config rejected: ") + e.what());
    }
  }();
  ParamList params = model.parameters();
  const auto& entries = manifest["params"];
  if (!entries.is_array() || entries.size() != params.size())
    throw CorruptManifestError("manifest lists a different parameter set than its config implies");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    try {
      if (e.at("name").get<std::string>() != params[i].name)
        throw CorruptManifestError("parameter " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                                   "', expected '" + params[i].name + "'");
      if (e.at("shape").get<Shape>() != params[i].tensor.shape())
        throw CorruptManifestError("shape mismatch for " + params[i].name);
      const auto off = e.at("offset").get<std::size_t>();
      const std::size_t n = params[i].tensor.numel();
      if (off > blob_bytes || blob_bytes - off < 4 * n)
        throw CorruptManifestError("offset of " + params[i].name + " lies outside the blob");
      auto dst = params[i].tensor.mutable_values();
      const char* src = bytes.data() + blob_start + off;
      for (std::size_t k = 0; k < n; ++k) dst[k] = static_cast<double>(get_f32(src + 4 * k));
    } catch (const nlohmann::json::exception& ex) {
      throw CorruptManifestError(std::string("bad parameter entry: ") + ex.what());
    }
  }
  model.mark_backbone_ready(ready);
  return model;
}

inline DialClipModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return model_from_checkpoint_bytes(ss.str());
}

/// Rounds every parameter to f32 in place, so an in-memory model matches
/// what a save/load cycle would give.
inline void round_to_f32(DialClipModel& model) {
  for (auto& p : model.parameters())
    for (auto& v : p.tensor.mutable_values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace dialclip
