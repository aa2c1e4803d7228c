#pragma once

// Binary tensor container used for checkpoints and dataset samples.
// Layout: magic "GLAMCKPT", u32 version, u64 record count, then per record:
// u32 name length, utf-8 name, u8 dtype tag (0 f32, 1 f64, 2 i32),
// u32 rank, u64 extents, u64 value count, raw little-endian values.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "glam/nn.hpp"

namespace glam {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};
template <>
struct dtype_of<std::int32_t> {
  static constexpr DType value = DType::i32;
};

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> raw;

  template <typename T>
  static TensorRecord make(const std::string& name, const Shape& shape,
                           const std::vector<T>& values) {
    TensorRecord r;
    r.name = name;
    r.dtype = dtype_of<T>::value;
    r.shape = shape;
    r.raw.resize(values.size() * sizeof(T));
    std::memcpy(r.raw.data(), values.data(), r.raw.size());
    return r;
  }

  template <typename T>
  std::vector<T> as() const {
    if (dtype != dtype_of<T>::value)
      throw IoError("record '" + name + "' has a different dtype tag");
    std::vector<T> v(raw.size() / sizeof(T));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
  }
};

namespace detail {

inline constexpr char kMagic[8] = {'G', 'L', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

template <typename U>
void write_pod(std::FILE* f, U v) {
  if (std::fwrite(&v, sizeof(U), 1, f) != 1) throw IoError("short write");
}

template <typename U>
U read_pod(std::FILE* f) {
  U v;
  if (std::fread(&v, sizeof(U), 1, f) != 1) throw IoError("short read");
  return v;
}

}  // namespace detail

inline void write_records(const std::string& path, const std::vector<TensorRecord>& recs) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  if (std::fwrite(detail::kMagic, 1, 8, f.get()) != 8) throw IoError("short write");
  detail::write_pod<std::uint32_t>(f.get(), detail::kVersion);
  detail::write_pod<std::uint64_t>(f.get(), recs.size());
  for (const auto& r : recs) {
    detail::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(r.name.size()));
    if (std::fwrite(r.name.data(), 1, r.name.size(), f.get()) != r.name.size())
      throw IoError("short write");
    detail::write_pod<std::uint8_t>(f.get(), static_cast<std::uint8_t>(r.dtype));
    detail::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(r.shape.size()));
    for (i64 e : r.shape) detail::write_pod<std::uint64_t>(f.get(), static_cast<std::uint64_t>(e));
    std::uint64_t count = shape_numel(r.shape);
    detail::write_pod<std::uint64_t>(f.get(), count);
    if (std::fwrite(r.raw.data(), 1, r.raw.size(), f.get()) != r.raw.size())
      throw IoError("short write");
  }
}

inline std::vector<TensorRecord> read_records(const std::string& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open '" + path + "'");
  char magic[8];
  if (std::fread(magic, 1, 8, f.get()) != 8 ||
      std::memcmp(magic, detail::kMagic, 8) != 0)
    throw IoError("'" + path + "' is not a GLAMCKPT container");
  auto version = detail::read_pod<std::uint32_t>(f.get());
  if (version != detail::kVersion)
    throw IoError("unsupported container version " + std::to_string(version));
  auto count = detail::read_pod<std::uint64_t>(f.get());
  std::vector<TensorRecord> recs;
  recs.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    auto name_len = detail::read_pod<std::uint32_t>(f.get());
    r.name.resize(name_len);
    if (std::fread(r.name.data(), 1, name_len, f.get()) != name_len)
      throw IoError("short read");
    r.dtype = static_cast<DType>(detail::read_pod<std::uint8_t>(f.get()));
    auto rank = detail::read_pod<std::uint32_t>(f.get());
    r.shape.resize(rank);
    for (auto& e : r.shape)
      e = static_cast<i64>(detail::read_pod<std::uint64_t>(f.get()));
    auto nvals = detail::read_pod<std::uint64_t>(f.get());
    if (static_cast<i64>(nvals) != shape_numel(r.shape))
      throw IoError("record '" + r.name + "' count does not match extents");
    std::size_t bytes = nvals * (r.dtype == DType::f64 ? 8 : 4);
    r.raw.resize(bytes);
    if (std::fread(r.raw.data(), 1, bytes, f.get()) != bytes) throw IoError("short read");
    recs.push_back(std::move(r));
  }
  return recs;
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params) {
  std::vector<TensorRecord> recs;
  recs.reserve(params.size());
  for (const auto& [name, t] : params)
    recs.push_back(TensorRecord::make<T>(name, t.shape(), t.values()));
  write_records(path, recs);
}

// Loads into an existing parameter list, validating every name and shape
// against the built model.
template <typename T>
void load_checkpoint(const std::string& path, ParamList<T>& params) {
  auto recs = read_records(path);
  if (recs.size() != params.size())
    throw ConfigError("checkpoint has " + std::to_string(recs.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& r = recs[i];
    if (r.name != name)
      throw ConfigError("checkpoint tensor '" + r.name + "' where '" + name +
                        "' was expected");
    if (r.shape != t.shape())
      throw ConfigError("checkpoint tensor '" + r.name + "' shape " +
                        shape_str(r.shape) + " does not match model shape " +
                        shape_str(t.shape()));
    t.mutable_values() = r.as<T>();
  }
}

}  // namespace glam
