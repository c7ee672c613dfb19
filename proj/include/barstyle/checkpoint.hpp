/**
 * @file checkpoint.hpp
 * @brief Checkpoint directories: a text manifest plus one float32 blob.
 *
 * Layout of `<dir>/manifest.txt` (key=value, one per line):
 *   format=barstyle-checkpoint-1
 *   step=<training step>
 *   config.<key>=<value>            model/training configuration
 *   tensor.<name>=<rows>,<cols>,<offset>
 *   moment1.<name>=..., moment2.<name>=...   Adam state (optional)
 *   optimizer.step=<Adam step count>
 * `<dir>/params.bin` holds every tensor as little-endian IEEE-754 float32 in
 * row-major order; <offset> counts float32 elements from the file start.
 */
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "barstyle/autodiff.hpp"
#include "barstyle/config.hpp"
#include "barstyle/error.hpp"

namespace barstyle {

inline constexpr const char* kCheckpointFormat = "barstyle-checkpoint-1";

struct CheckpointData {
  KeyValues config;
  long step = 0;
  std::map<std::string, ad::Matrix> tensors;
  std::map<std::string, ad::Matrix> moment1;
  std::map<std::string, ad::Matrix> moment2;
  long optimizer_step = 0;
  bool has_optimizer = false;
};

namespace detail {

inline void put_f32(std::vector<std::uint8_t>& out, double v) {
  auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline float get_f32(const std::vector<std::uint8_t>& in, std::size_t index) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(in[4 * index + i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, const KeyValues& config, long step, const ad::ParameterStore& params,
                            const ad::AdamState* optimizer = nullptr) {
  std::filesystem::create_directories(dir);
  KeyValues manifest;
  manifest.set("format", std::string(kCheckpointFormat));
  manifest.set("step", step);
  for (const auto& [k, v] : config.items()) manifest.set("config." + k, v);
  std::vector<std::uint8_t> blob;
  std::size_t offset = 0;
  auto emit = [&](const std::string& key, const ad::Matrix& m) {
    manifest.set(key, std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "," + std::to_string(offset));
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(blob, m.data()[i]);
    offset += static_cast<std::size_t>(m.size());
  };
  for (std::size_t i = 0; i < params.size(); ++i) emit("tensor." + params[i].name, params[i].value);
  if (optimizer && optimizer->m.size() == params.size()) {
    manifest.set("optimizer.step", optimizer->step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      emit("moment1." + params[i].name, optimizer->m[i]);
      emit("moment2." + params[i].name, optimizer->v[i]);
    }
  }
  // write to temporaries then rename, so a reader never sees a half-written pair
  auto tmp_blob = dir + "/params.bin.tmp", tmp_manifest = dir + "/manifest.txt.tmp";
  {
    std::ofstream out(tmp_blob, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp_blob);
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  }
  manifest.save(tmp_manifest);
  std::filesystem::rename(tmp_blob, dir + "/params.bin");
  std::filesystem::rename(tmp_manifest, dir + "/manifest.txt");
}

inline CheckpointData load_checkpoint(const std::string& dir) {
  KeyValues manifest = KeyValues::load(dir + "/manifest.txt");
  if (manifest.get("format", "") != kCheckpointFormat)
    throw ConfigError(dir + " is not a checkpoint (format '" + manifest.get("format", "") + "')");
  std::ifstream in(dir + "/params.bin", std::ios::binary);
  if (!in) throw IoError("cannot open " + dir + "/params.bin");
  std::vector<std::uint8_t> blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (blob.size() % 4 != 0) throw IoError("params.bin size is not a multiple of 4");
  const std::size_t floats = blob.size() / 4;

  CheckpointData data;
  data.step = manifest.require<long>("step");
  data.optimizer_step = manifest.get<long>("optimizer.step", 0);
  data.has_optimizer = manifest.has("optimizer.step");
  for (const auto& [key, value] : manifest.items()) {
    auto dot = key.find('.');
    if (dot == std::string::npos) continue;
    std::string family = key.substr(0, dot), name = key.substr(dot + 1);
    if (family == "config") {
      data.config.set(name, value);
      continue;
    }
    std::map<std::string, ad::Matrix>* target = family == "tensor"    ? &data.tensors
                                                : family == "moment1" ? &data.moment1
                                                : family == "moment2" ? &data.moment2
                                                                      : nullptr;
    if (!target) continue;
    long rows = 0, cols = 0;
    std::size_t off = 0;
    if (std::sscanf(value.c_str(), "%ld,%ld,%zu", &rows, &cols, &off) != 3 || rows < 0 || cols < 0)
      throw ConfigError("bad tensor entry " + key + "=" + value);
    if (off + static_cast<std::size_t>(rows * cols) > floats) throw IoError("tensor " + name + " runs past params.bin");
    ad::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_f32(blob, off + i);
    (*target)[name] = std::move(m);
  }
  return data;
}

/// Copies checkpoint tensors into `params` (every parameter must be present with its shape) and, if given, Adam state.
inline void apply_checkpoint(const CheckpointData& data, ad::ParameterStore& params, ad::AdamState* optimizer = nullptr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto it = data.tensors.find(p.name);
    if (it == data.tensors.end()) throw ConfigError("checkpoint lacks parameter " + p.name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
      throw ShapeMismatch("checkpoint parameter " + p.name + " has shape " + ad::shape_str(it->second));
    p.value = it->second;
  }
  if (optimizer && data.has_optimizer) {
    optimizer->reset(params);
    optimizer->step = data.optimizer_step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto m = data.moment1.find(params[i].name), v = data.moment2.find(params[i].name);
      if (m == data.moment1.end() || v == data.moment2.end()) throw ConfigError("checkpoint lacks optimizer state for " + params[i].name);
      optimizer->m[i] = m->second;
      optimizer->v[i] = v->second;
    }
  }
}

}  // namespace barstyle
