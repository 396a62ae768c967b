#pragma once

// CFW1 weight files.
//
//   magic   "CFW1"
//   records until end of file, each:
//     u32 name length, name bytes (UTF-8),
//     u32 ndim, u32 dims[ndim],
//     f32 payload[prod(dims)]
//
// All integers and floats are little-endian. Names are unique.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor {

inline constexpr std::string_view kWeightMagic = "CFW1";

struct WeightRecord {
  std::string name;
  Tensor<float> tensor;
};

using WeightList = std::vector<WeightRecord>;

/// Role of a tensor inside a model: trained by the optimiser, or a
/// persisted non-trainable buffer (running statistics).
enum class ParamKind { trainable, buffer };

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_weights(const WeightList& records) {
  std::string out(kWeightMagic);
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.name).second) throw FormatError("duplicate weight name '" + r.name + "'");
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_u32(out, static_cast<std::uint32_t>(r.tensor.rank()));
    for (std::size_t d : r.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : r.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline WeightList decode_weights(std::string_view bytes, const std::string& what = "CFW1 data") {
  if (bytes.substr(0, kWeightMagic.size()) != kWeightMagic) {
    throw FormatError(what + ": bad magic bytes, expected \"CFW1\"");
  }
  detail::ByteReader in(bytes.substr(kWeightMagic.size()), what);
  WeightList records;
  std::set<std::string> seen;
  while (!in.done()) {
    WeightRecord r;
    const std::uint32_t len = in.u32();
    r.name = std::string(in.take(len));
    if (!seen.insert(r.name).second) throw FormatError(what + ": duplicate record '" + r.name + "'");
    const std::uint32_t ndim = in.u32();
    if (ndim > 8) throw FormatError(what + ": record '" + r.name + "' has implausible rank " + std::to_string(ndim));
    Shape shape(ndim);
    for (auto& d : shape) {
      d = in.u32();
      if (d == 0) throw FormatError(what + ": record '" + r.name + "' has a zero dimension");
    }
    const std::size_t n = shape_size(shape);
    if (n > (bytes.size() / 4) + 1) throw FormatError(what + ": record '" + r.name + "' payload exceeds file size");
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(in.u32());
    r.tensor = Tensor<float>(std::move(shape), std::move(data));
    records.push_back(std::move(r));
  }
  return records;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write to '" + path.string() + "'");
}

inline void save_weights(const std::filesystem::path& path, const WeightList& records) {
  write_file(path, encode_weights(records));
}

inline WeightList load_weights(const std::filesystem::path& path) {
  return decode_weights(read_file(path), path.string());
}

/// Snapshot of every tensor a model exposes through visit().
template <class Model>
WeightList collect_weights(const Model& model) {
  WeightList out;
  model.visit([&](const std::string& name, const auto& tensor, ParamKind) {
    out.push_back({name, tensor.template cast<float>()});
  });
  return out;
}

/**
 * Copies records into the model by name. Every model tensor must be
 * present with the same shape; with `strict`, records the model does not
 * know are rejected as well. The first offending record is reported.
 */
template <class Model>
void assign_weights(Model& model, const WeightList& records, bool strict) {
  std::map<std::string, const WeightRecord*> by_name;
  for (const auto& r : records) by_name.emplace(r.name, &r);
  std::set<std::string> used;
  model.visit([&](const std::string& name, auto& tensor, ParamKind) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("weight load: missing record '" + name + "'");
    const auto& src = it->second->tensor;
    if (src.shape() != tensor.shape()) {
      throw DimensionError("weight load: record '" + name + "' has shape " + shape_str(src.shape()) +
                           ", model expects " + shape_str(tensor.shape()));
    }
    using Scalar = typename std::decay_t<decltype(tensor)>::value_type;
    tensor = src.template cast<Scalar>();
    used.insert(name);
  });
  if (strict) {
    for (const auto& r : records) {
      if (!used.count(r.name)) throw FormatError("weight load: unexpected record '" + r.name + "'");
    }
  }
}

/// Number of scalars in trainable tensors.
template <class Model>
std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  model.visit([&](const std::string&, const auto& tensor, ParamKind kind) {
    if (kind == ParamKind::trainable) n += tensor.size();
  });
  return n;
}

}  // namespace capsfor
