#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hran/config.hpp"
#include "hran/error.hpp"
#include "hran/model.hpp"
#include "hran/tensor.hpp"

namespace hran {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, double>) {
    return "f64";
  } else {
    static_assert(std::is_same_v<T, float>, "checkpoints hold f64 or f32 tensors");
    return "f32";
  }
}

// On-disk training state. Layout: the magic bytes "HRAN1", a little-endian
// u64 header length, a UTF-8 JSON header, then each tensor's raw little-endian
// values back to back, at the offsets the header's manifest records (relative
// to the end of the header).
template <typename T = double>
struct Checkpoint {
  ModelConfig config;
  TrainSchedule schedule;
  int epoch = 0;                 // completed epochs
  nlohmann::json fit_state;      // opaque to this layer; owned by the fit loop
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<T>>> tensors;  // manifest order

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[5] = {'H', 'R', 'A', 'N', '1'};

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["config"] = ck.config;
  header["schedule"] = ck.schedule;
  header["epoch"] = ck.epoch;
  header["fit"] = ck.fit_state;
  header["extra"] = ck.extra;
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ck.tensors) {
    manifest.push_back(nlohmann::json{{"name", name},
                                      {"dtype", dtype_name<T>()},
                                      {"shape", tensor.shape()},
                                      {"offset", offset}});
    offset += tensor.numel() * sizeof(T);
  }
  header["tensors"] = std::move(manifest);
  const std::string header_bytes = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = header_bytes.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xFF);
    out.write(lenbuf, 8);
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& [name, tensor] : ck.tensors) {
      out.write(reinterpret_cast<const char*>(tensor.data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
    }
    if (!out) throw FormatError("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw FormatError("checkpoint: cannot move " + tmp + " into place at " + path);
  }
}

// Reads only the JSON header, enough to inspect config and epoch without
// touching the payload.
inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0) {
    throw FormatError("checkpoint: " + path + ": bad magic at offset 0");
  }
  char lenbuf[8];
  if (!in.read(lenbuf, 8)) {
    throw FormatError("checkpoint: " + path + ": truncated header length at offset 5");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  }
  std::string header_bytes(len, '\0');
  if (!in.read(header_bytes.data(), static_cast<std::streamsize>(len))) {
    throw FormatError("checkpoint: " + path + ": truncated header at offset 13");
  }
  try {
    return nlohmann::json::parse(header_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + ": header is not valid JSON at offset 13: " +
                      e.what());
  }
}

// Loads and validates the whole file. Nothing is returned unless every tensor
// parsed, so a malformed file never exposes partial state.
template <typename T = double>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 13 || std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0) {
    throw FormatError("checkpoint: " + path + ": bad magic at offset 0");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[5 + static_cast<std::size_t>(i)]))
           << (8 * i);
  }
  const std::uint64_t payload_start = 13 + len;
  if (payload_start > bytes.size()) {
    throw FormatError("checkpoint: " + path + ": truncated header at offset 13");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(13, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + ": header is not valid JSON at offset 13: " +
                      e.what());
  }

  Checkpoint<T> ck;
  try {
    ck.config = header.at("config").get<ModelConfig>();
    ck.schedule = header.at("schedule").get<TrainSchedule>();
    ck.epoch = header.value("epoch", 0);
    ck.fit_state = header.value("fit", nlohmann::json());
    ck.extra = header.value("extra", nlohmann::json::object());
    if (!header.contains("tensors") || !header["tensors"].is_array()) {
      throw FormatError("checkpoint: " + path + ": header lacks a tensor manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + ": malformed header fields: " + e.what());
  }

  std::uint64_t end_max = 0;
  for (const auto& entry : header["tensors"]) {
    std::string name, dtype;
    Shape shape;
    std::uint64_t offset;
    try {
      name = entry.at("name").get<std::string>();
      dtype = entry.at("dtype").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("checkpoint: " + path + ": malformed manifest entry: " + e.what());
    }
    if (dtype != dtype_name<T>()) {
      throw CompatibilityError("checkpoint: " + path + ": tensor " + name + " stored as " +
                               dtype + ", expected " + dtype_name<T>());
    }
    Tensor<T> tensor(shape);
    const std::uint64_t nbytes = tensor.numel() * sizeof(T);
    const std::uint64_t begin = payload_start + offset;
    if (begin + nbytes > bytes.size()) {
      throw FormatError("checkpoint: " + path + ": payload truncated for tensor " + name +
                        " at offset " + std::to_string(begin));
    }
    std::memcpy(tensor.data(), bytes.data() + begin, nbytes);
    if (!tensor.all_finite()) {
      throw NumericError("checkpoint: " + path + ": tensor " + name + " holds non-finite values");
    }
    end_max = std::max(end_max, offset + nbytes);
    ck.tensors.emplace_back(std::move(name), std::move(tensor));
  }
  if (payload_start + end_max != bytes.size()) {
    throw FormatError("checkpoint: " + path + ": trailing bytes after offset " +
                      std::to_string(payload_start + end_max));
  }
  return ck;
}

// Copies the checkpoint's parameter tensors into an existing parameter set.
// Every parameter must be present with the exact shape.
template <typename T>
void apply_parameters(ModelParams<T>& params, const Checkpoint<T>& ck) {
  params.for_each_parameter([&](Parameter<T>& p) {
    const Tensor<T>* t = ck.find(p.name);
    if (!t) throw CompatibilityError("checkpoint: parameter " + p.name + " missing");
    if (t->shape() != p.value.shape()) {
      throw CompatibilityError("checkpoint: parameter " + p.name + " has shape " +
                               shape_str(t->shape()) + ", model expects " +
                               shape_str(p.value.shape()));
    }
    p.value = *t;
  });
}

// Rebuilds a model exactly as checkpointed.
template <typename T = double>
Model<T> model_from_checkpoint(const Checkpoint<T>& ck) {
  Model<T> model = Model<T>::init(ck.config);
  apply_parameters(model.params, ck);
  return model;
}

}  // namespace hran
