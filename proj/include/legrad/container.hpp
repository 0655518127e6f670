#pragma once

// LGTC tensor container: a little-endian, 64-byte aligned file holding a JSON
// header followed by raw tensor payload. Layout (see docs/container.md):
//
//   0   "LGTC"                     magic
//   4   u32 version                currently 1
//   8   u64 header_json_length
//   16  header JSON (UTF-8)
//   ..  zero padding up to a multiple of 64  -> payload start
//   ..  payload, every tensor at a 64-byte aligned offset

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "legrad/tensor.hpp"

namespace legrad {

static_assert(std::endian::native == std::endian::little,
              "the LGTC container reader assumes a little-endian host");

inline constexpr char kContainerMagic[4] = {'L', 'G', 'T', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlign = 64;
inline constexpr std::size_t kContainerPrefix = 16;

enum class ContainerErrc {
  bad_magic,
  unsupported_version,
  truncated,
  duplicate_name,
  malformed_header,
  bad_layout,
  trailing_bytes,
  io,
  missing_tensor,
};

inline const char* to_string(ContainerErrc c) {
  switch (c) {
    case ContainerErrc::bad_magic: return "bad_magic";
    case ContainerErrc::unsupported_version: return "unsupported_version";
    case ContainerErrc::truncated: return "truncated";
    case ContainerErrc::duplicate_name: return "duplicate_name";
    case ContainerErrc::malformed_header: return "malformed_header";
    case ContainerErrc::bad_layout: return "bad_layout";
    case ContainerErrc::trailing_bytes: return "trailing_bytes";
    case ContainerErrc::io: return "io";
    case ContainerErrc::missing_tensor: return "missing_tensor";
  }
  return "unknown";
}

class ContainerError : public Error {
 public:
  ContainerError(ContainerErrc code, const std::string& what)
      : Error(std::string("container ") + to_string(code) + ": " + what), code_(code) {}
  ContainerErrc code() const noexcept { return code_; }

 private:
  ContainerErrc code_;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct NamedTensor {
  std::string name;
  AnyTensor tensor;
};

/// In-memory image of a container: free-form metadata plus ordered tensors.
struct TensorFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  /// Fetches a tensor, converting precision if the stored dtype differs.
  template <typename T>
  Tensor<T> get(std::string_view name) const {
    const NamedTensor* t = find(name);
    if (!t) throw ContainerError(ContainerErrc::missing_tensor, std::string(name));
    return std::visit(
        [](const auto& v) -> Tensor<T> {
          using Stored = typename std::decay_t<decltype(v)>::value_type;
          if constexpr (std::is_same_v<Stored, T>)
            return v;
          else
            return v.template cast<T>();
        },
        t->tensor);
  }

  template <typename T>
  void add(std::string name, Tensor<T> t) {
    tensors.push_back({std::move(name), AnyTensor(std::move(t))});
  }
};

namespace detail {

inline std::size_t align_up(std::size_t v, std::size_t a = kContainerAlign) {
  return (v + a - 1) / a * a;
}

inline Shape any_shape(const AnyTensor& t) {
  return std::visit([](const auto& v) { return v.shape(); }, t);
}

inline DType any_dtype(const AnyTensor& t) {
  return std::holds_alternative<Tensor<float>>(t) ? DType::f32 : DType::f64;
}

inline std::size_t dtype_bytes(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace detail

inline std::vector<std::uint8_t> container_write(const TensorFile& file) {
  std::set<std::string> seen;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : file.tensors) {
    if (!seen.insert(t.name).second)
      throw ContainerError(ContainerErrc::duplicate_name, t.name);
    const DType dt = detail::any_dtype(t.tensor);
    const Shape shape = detail::any_shape(t.tensor);
    const std::size_t nbytes = shape_numel(shape) * detail::dtype_bytes(dt);
    entries.push_back({{"name", t.name},
                       {"dtype", dtype_name(dt)},
                       {"shape", shape},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset = detail::align_up(offset + nbytes);
  }
  const std::size_t payload_bytes = offset;
  nlohmann::json header = {{"format", "LGTC"},
                           {"version", kContainerVersion},
                           {"payload_bytes", payload_bytes},
                           {"tensors", entries},
                           {"metadata", file.metadata}};
  const std::string json = header.dump();
  const std::size_t payload_start = detail::align_up(kContainerPrefix + json.size());

  std::vector<std::uint8_t> out(payload_start + payload_bytes, 0);
  std::memcpy(out.data(), kContainerMagic, 4);
  const std::uint32_t version = kContainerVersion;
  std::memcpy(out.data() + 4, &version, 4);
  const std::uint64_t jlen = json.size();
  std::memcpy(out.data() + 8, &jlen, 8);
  std::memcpy(out.data() + kContainerPrefix, json.data(), json.size());
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    const std::size_t off = payload_start + entries[i]["offset"].get<std::size_t>();
    std::visit(
        [&](const auto& v) {
          std::memcpy(out.data() + off, v.data(), v.size() * sizeof(*v.data()));
        },
        file.tensors[i].tensor);
  }
  return out;
}

/// Parses and validates a container. All offsets and lengths are checked
/// before any payload byte is read; a failure never yields partial tensors.
inline TensorFile container_read(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw ContainerError(ContainerErrc::bad_magic, "expected LGTC");
  if (bytes.size() < kContainerPrefix)
    throw ContainerError(ContainerErrc::truncated, "file shorter than fixed prefix");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kContainerVersion)
    throw ContainerError(ContainerErrc::unsupported_version, std::to_string(version));
  std::uint64_t jlen = 0;
  std::memcpy(&jlen, bytes.data() + 8, 8);
  if (jlen > bytes.size() - kContainerPrefix)
    throw ContainerError(ContainerErrc::truncated, "header extends past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kContainerPrefix,
                                   bytes.begin() + kContainerPrefix + static_cast<std::ptrdiff_t>(jlen));
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, e.what());
  }

  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::size_t offset, nbytes;
  };
  std::vector<Entry> entries;
  std::size_t payload_bytes = 0;
  try {
    if (header.at("format").get<std::string>() != "LGTC")
      throw ContainerError(ContainerErrc::malformed_header, "format field is not LGTC");
    if (header.at("version").get<std::uint32_t>() != version)
      throw ContainerError(ContainerErrc::malformed_header, "version fields disagree");
    payload_bytes = header.at("payload_bytes").get<std::size_t>();
    std::set<std::string> seen;
    for (const auto& e : header.at("tensors")) {
      Entry en;
      en.name = e.at("name").get<std::string>();
      const auto dt = e.at("dtype").get<std::string>();
      if (dt == "f32")
        en.dtype = DType::f32;
      else if (dt == "f64")
        en.dtype = DType::f64;
      else
        throw ContainerError(ContainerErrc::malformed_header, "unsupported dtype " + dt);
      en.shape = e.at("shape").get<Shape>();
      en.offset = e.at("offset").get<std::size_t>();
      en.nbytes = e.at("nbytes").get<std::size_t>();
      if (!seen.insert(en.name).second)
        throw ContainerError(ContainerErrc::duplicate_name, en.name);
      if (en.shape.empty() || std::find(en.shape.begin(), en.shape.end(), 0) != en.shape.end())
        throw ContainerError(ContainerErrc::bad_layout, en.name + ": invalid shape");
      if (en.nbytes != shape_numel(en.shape) * detail::dtype_bytes(en.dtype))
        throw ContainerError(ContainerErrc::bad_layout, en.name + ": nbytes disagrees with shape");
      if (en.offset % kContainerAlign != 0)
        throw ContainerError(ContainerErrc::bad_layout, en.name + ": misaligned offset");
      entries.push_back(std::move(en));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(ContainerErrc::malformed_header, e.what());
  }

  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(),
            [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (std::size_t i = 0; i < by_offset.size(); ++i) {
    const Entry& e = *by_offset[i];
    if (e.offset + e.nbytes > payload_bytes)
      throw ContainerError(ContainerErrc::bad_layout, e.name + ": extends past payload");
    if (i + 1 < by_offset.size() && e.offset + e.nbytes > by_offset[i + 1]->offset)
      throw ContainerError(ContainerErrc::bad_layout, e.name + ": overlaps next tensor");
  }

  const std::size_t payload_start = detail::align_up(kContainerPrefix + jlen);
  const std::size_t expected = payload_start + payload_bytes;
  if (bytes.size() < expected)
    throw ContainerError(ContainerErrc::truncated, "payload is " +
                                                       std::to_string(expected - bytes.size()) +
                                                       " bytes short");
  if (bytes.size() > expected)
    throw ContainerError(ContainerErrc::trailing_bytes,
                         std::to_string(bytes.size() - expected) + " unexpected bytes");

  TensorFile file;
  file.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& e : entries) {
    const std::uint8_t* src = bytes.data() + payload_start + e.offset;
    if (e.dtype == DType::f32) {
      std::vector<float> v(shape_numel(e.shape));
      std::memcpy(v.data(), src, e.nbytes);
      file.tensors.push_back({e.name, Tensor<float>(e.shape, std::move(v))});
    } else {
      std::vector<double> v(shape_numel(e.shape));
      std::memcpy(v.data(), src, e.nbytes);
      file.tensors.push_back({e.name, Tensor<double>(e.shape, std::move(v))});
    }
  }
  return file;
}

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContainerError(ContainerErrc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContainerError(ContainerErrc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContainerError(ContainerErrc::io, "short write to " + path.string());
}

inline TensorFile load_container(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  return container_read(bytes);
}

inline void save_container(const std::filesystem::path& path, const TensorFile& file) {
  write_binary_file(path, container_write(file));
}

}  // namespace legrad
