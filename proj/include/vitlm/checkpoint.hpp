#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlm/tensor.hpp"

namespace vitlm {

template <std::floating_point T>
constexpr const char* dtype_name() {
  if constexpr (sizeof(T) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

namespace detail {

template <typename U>
U byteswap_value(U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename U>
void append_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U read_le(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

/// Named tensors in write order.
template <std::floating_point T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";

/// Writes `dir/manifest.json` and one little-endian blob `dir/tensors.bin`.
template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& dir, const NamedTensors<T>& tensors,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& [name, t] : tensors) {
    if (entries.contains(name)) throw ContractError("duplicate tensor name in checkpoint: " + name);
    entries[name] = {{"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"offset", blob.size()},
                     {"nbytes", t.size() * sizeof(T)}};
    for (T v : t.data()) detail::append_le(blob, v);
  }
  nlohmann::json manifest = {{"format", "vitlm-checkpoint"},
                             {"version", 1},
                             {"blob", kBlobFile},
                             {"tensors", entries},
                             {"meta", meta}};
  detail::write_file(dir / kBlobFile, blob);
  detail::write_file(dir / kManifestFile, manifest.dump(2) + "\n");
}

class Checkpoint {
 public:
  static Checkpoint load(const std::filesystem::path& dir) {
    Checkpoint ck;
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(detail::read_file(dir / kManifestFile));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "vitlm-checkpoint") {
      throw FormatError(dir.string() + " is not a checkpoint directory");
    }
    ck.meta_ = manifest.value("meta", nlohmann::json::object());
    ck.blob_ = detail::read_file(dir / manifest.value("blob", std::string(kBlobFile)));
    for (const auto& [name, e] : manifest.at("tensors").items()) {
      Record r;
      r.shape = e.at("shape").get<Shape>();
      r.dtype = e.at("dtype").get<std::string>();
      r.offset = e.at("offset").get<std::size_t>();
      const std::size_t width = r.dtype == "f32" ? 4 : r.dtype == "f64" ? 8 : 0;
      if (width == 0) throw UnsupportedError("checkpoint dtype " + r.dtype);
      if (r.offset + numel(r.shape) * width > ck.blob_.size()) {
        throw LengthError("tensor " + name + " runs past the end of the blob");
      }
      ck.records_.emplace(name, std::move(r));
    }
    return ck;
  }

  const nlohmann::json& meta() const { return meta_; }
  bool contains(const std::string& name) const { return records_.count(name) != 0; }
  const std::string& dtype(const std::string& name) const { return record(name).dtype; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, r] : records_) out.push_back(n);
    return out;
  }

  /// Tensor converted to T; exact when the stored dtype matches.
  template <std::floating_point T>
  Tensor<T> get(const std::string& name) const {
    const auto& r = record(name);
    std::vector<T> data(numel(r.shape));
    const char* p = blob_.data() + r.offset;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (r.dtype == "f32") {
        data[i] = static_cast<T>(detail::read_le<float>(p + 4 * i));
      } else {
        data[i] = static_cast<T>(detail::read_le<double>(p + 8 * i));
      }
    }
    return Tensor<T>(r.shape, std::move(data));
  }

 private:
  struct Record {
    Shape shape;
    std::string dtype;
    std::size_t offset = 0;
  };

  const Record& record(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw FormatError("checkpoint has no tensor named " + name);
    return it->second;
  }

  nlohmann::json meta_;
  std::string blob_;
  std::map<std::string, Record> records_;
};

}  // namespace vitlm
