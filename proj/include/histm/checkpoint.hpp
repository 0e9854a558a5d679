#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "histm/training.hpp"

namespace histm {

// Layout: "HSTM1", u32 LE header length, UTF-8 JSON header, then f32 LE
// tensor data. Manifest offsets are in bytes from the start of the data block.
inline constexpr std::string_view kCheckpointMagic = "HSTM1";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const HiSTMConfig& c) {
  return {{"T", c.T},
          {"K", c.K},
          {"D_in", c.D_in},
          {"C", c.C},
          {"N", c.N},
          {"conv_k", c.conv_k},
          {"mlp_hidden", c.mlp_hidden},
          {"mamba",
           {{"d_model", c.mamba.d_model},
            {"d_state", c.mamba.d_state},
            {"d_conv", c.mamba.d_conv},
            {"expand", c.mamba.expand}}}};
}

inline HiSTMConfig config_from_json(const nlohmann::json& j) {
  HiSTMConfig c;
  c.T = j.at("T").get<std::size_t>();
  c.K = j.at("K").get<std::size_t>();
  c.D_in = j.at("D_in").get<std::size_t>();
  c.C = j.at("C").get<std::size_t>();
  c.N = j.at("N").get<std::size_t>();
  c.conv_k = j.at("conv_k").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  const auto& m = j.at("mamba");
  c.mamba = {m.at("d_model").get<std::size_t>(), m.at("d_state").get<std::size_t>(), m.at("d_conv").get<std::size_t>(),
             m.at("expand").get<std::size_t>()};
  return c;
}

/// FNV-1a over the canonical config JSON.
inline std::uint64_t config_hash(const HiSTMConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string data;
  for (const auto& [name, t] : ck.params.named()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", data.size()}});
    for (float v : t.data()) io::put_f32(data, v);
  }
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"config", config_to_json(ck.config)},
                           {"config_hash", config_hash(ck.config)},
                           {"scaler", {{"min", ck.scaler.min_v}, {"max", ck.scaler.max_v}}},
                           {"tensors", manifest},
                           {"meta",
                            {{"epoch", ck.meta.epoch},
                             {"best_val_loss", ck.meta.best_val_loss},
                             {"seed", ck.meta.seed}}}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  io::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out += data;
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError(Kind::kBadMagic, "not an HSTM1 checkpoint (bad magic)");
  if (bytes.size() < kCheckpointMagic.size() + 4) throw CheckpointError(Kind::kTruncated, "checkpoint truncated in header length");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t hlen = io::get_u32(base + kCheckpointMagic.size());
  const std::size_t data_start = kCheckpointMagic.size() + 4 + hlen;
  if (bytes.size() < data_start) throw CheckpointError(Kind::kTruncated, "checkpoint truncated in JSON header");

  nlohmann::json header;
  Checkpoint ck;
  try {
    header = nlohmann::json::parse(bytes.substr(kCheckpointMagic.size() + 4, hlen));
    if (header.at("version").get<int>() != kCheckpointVersion)
      throw CheckpointError(Kind::kFormat, "unsupported checkpoint version");
    ck.config = config_from_json(header.at("config"));
    ck.config.validate();
    ck.scaler = {header.at("scaler").at("min").get<double>(), header.at("scaler").at("max").get<double>()};
    const auto& meta = header.at("meta");
    ck.meta = {meta.at("epoch").get<std::size_t>(), meta.at("best_val_loss").get<double>(),
               meta.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kFormat, std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::kFormat, std::string("invalid config in checkpoint: ") + e.what());
  }

  ck.params = HiSTMParams<float>::zeros(ck.config);
  const auto expected = HiSTMParams<float>::layout(ck.config);
  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != expected.size())
    throw CheckpointError(Kind::kShapeMismatch, "tensor manifest does not match the config");
  auto dst = ck.params.tensors();
  const std::size_t data_len = bytes.size() - data_start;
  for (std::size_t k = 0; k < expected.size(); ++k) {
    const auto& entry = tensors[k];
    Shape shape;
    std::size_t offset = 0;
    std::string name;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(Kind::kFormat, std::string("malformed manifest entry: ") + e.what());
    }
    if (name != expected[k].first || shape != expected[k].second)
      throw CheckpointError(Kind::kShapeMismatch, "tensor '" + name + "' " + shape_str(shape) + " but config expects '" +
                                                      expected[k].first + "' " + shape_str(expected[k].second));
    const std::size_t n = shape_numel(shape);
    if (offset + 4 * n > data_len)
      throw CheckpointError(Kind::kTruncated, "tensor '" + name + "' extends past the end of the file");
    auto v = dst[k]->data();
    for (std::size_t i = 0; i < n; ++i) v[i] = io::get_f32(base + data_start + offset + 4 * i);
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  return decode_checkpoint(io::read_file(path));
}

}  // namespace histm
