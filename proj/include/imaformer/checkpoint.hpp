#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "imaformer/vit.hpp"

namespace imaformer {

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"image_size", cfg.image_size},
                        {"channels", cfg.channels},
                        {"patch_size", cfg.patch_size},
                        {"depth", cfg.depth},
                        {"dim", cfg.dim},
                        {"heads", cfg.heads},
                        {"mlp_ratio", cfg.mlp_ratio},
                        {"temperature", cfg.temperature},
                        {"final_full_self_attention", cfg.final_full_self_attention},
                        {"bare_class_attention", cfg.bare_class_attention},
                        {"diagonal_scores", cfg.diagonal_scores}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.image_size = j.at("image_size").get<std::size_t>();
  cfg.channels = j.at("channels").get<std::size_t>();
  cfg.patch_size = j.at("patch_size").get<std::size_t>();
  cfg.depth = j.at("depth").get<std::size_t>();
  cfg.dim = j.at("dim").get<std::size_t>();
  cfg.heads = j.at("heads").get<std::size_t>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
  cfg.temperature = j.at("temperature").get<double>();
  cfg.final_full_self_attention = j.value("final_full_self_attention", false);
  cfg.bare_class_attention = j.value("bare_class_attention", false);
  cfg.diagonal_scores = j.value("diagonal_scores", false);
  cfg.validate();
  return cfg;
}

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline void put_f64_le(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

// Cursor over a byte buffer; failures carry the offending byte offset.
struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string context;

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw std::runtime_error(context + ": truncated at byte " + std::to_string(bytes.size()) +
                               " while reading " + what + " (offset " + std::to_string(pos) + ")");
  }
  std::uint32_t u32_le(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    return v;
  }
  double f64_le(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
      bits = (bits << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 8;
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }
  float f32_le(const char* what) {
    need(4, what);
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i)
      bits = (bits << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "IMAC" | version u32 LE | config JSON length u32 LE | config JSON |
// each parameter tensor as raw f64 LE in named_tensors() order
inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ModelParams& params) {
  std::string out;
  out += "IMAC";
  detail::put_u32_le(out, kCheckpointVersion);
  std::string cfg_json = model_config_to_json(cfg).dump();
  detail::put_u32_le(out, static_cast<std::uint32_t>(cfg_json.size()));
  out += cfg_json;
  for (const auto& [name, t] : params.named_tensors())
    for (double v : t->data()) detail::put_f64_le(out, v);
  detail::write_file(path, out);
}

inline std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
  std::string bytes = detail::read_file(path);
  detail::ByteReader r{bytes, 0, "checkpoint " + path};
  if (r.raw(4, "magic") != "IMAC")
    throw std::runtime_error("checkpoint " + path + ": bad magic at byte 0");
  std::uint32_t version = r.u32_le("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                             std::to_string(version));
  std::uint32_t cfg_len = r.u32_le("config length");
  std::string cfg_json = r.raw(cfg_len, "config JSON");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(cfg_json));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path + ": invalid config JSON: " + e.what());
  }
  ModelParams params = ModelParams::init(cfg, 0);
  for (auto& [name, t] : params.named_tensors()) {
    auto& data = t->data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = r.f64_le(name.c_str());
  }
  if (r.pos != bytes.size())
    throw std::runtime_error("checkpoint " + path + ": " +
                             std::to_string(bytes.size() - r.pos) +
                             " trailing bytes after offset " + std::to_string(r.pos));
  return {cfg, std::move(params)};
}

}  // namespace imaformer
