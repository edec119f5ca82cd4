#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "hiermusic/nn/params.hpp"

// Checkpoint file format (JSON, UTF-8):
//
//   {
//     "format": "hiermusic-checkpoint",
//     "version": 1,
//     "meta": { ...free-form... },
//     "tensors": { "<name>": { "shape": [r, c], "data": [v0, v1, ...] }, ... }
//   }
//
// Tensor data is row-major. Doubles are written with round-trip precision, so
// save -> load reproduces every value bit for bit.
namespace hiermusic::nn {

inline constexpr const char* kCheckpointFormat = "hiermusic-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const ParamSet& ps, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, p] : ps) {
    tensors[name] = {{"shape", p.value.shape()}, {"data", p.value.data()}};
  }
  j["tensors"] = std::move(tensors);
  return j;
}

inline ParamSet params_from_json(const nlohmann::json& j, nlohmann::json* meta = nullptr) {
  if (j.value("format", std::string()) != kCheckpointFormat)
    throw std::runtime_error("not a hiermusic checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  ParamSet ps;
  for (const auto& [name, t] : j.at("tensors").items()) {
    ps.add(name, Tensor(t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>()));
  }
  if (meta) *meta = j.value("meta", nlohmann::json::object());
  return ps;
}

inline void save_checkpoint(const std::string& path, const ParamSet& ps,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << params_to_json(ps, meta).dump() << '\n';
}

inline ParamSet load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return params_from_json(nlohmann::json::parse(in), meta);
}

}  // namespace hiermusic::nn
