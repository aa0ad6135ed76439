// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"
#include "parameters.hpp"

namespace spflow::io {

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

template <class U>
U get_le(std::string_view bytes, std::size_t offset) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b)
    v |= static_cast<U>(static_cast<unsigned char>(bytes[offset + b])) << (8 * b);
  return v;
}

/// Little-endian reader over an in-memory file that throws on truncation.
class Reader {
 public:
  Reader(std::string_view bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  template <class U>
  U read() {
    need(sizeof(U));
    auto v = get_le<U>(bytes_, pos_);
    pos_ += sizeof(U);
    return v;
  }
  double read_f64() { return std::bit_cast<double>(read<std::uint64_t>()); }
  std::string read_string(std::size_t n) {
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("'" + path_ + "' is truncated");
  }
  std::string_view bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<float> decode_f32_triples(const std::string& bytes, const std::string& path) {
  if (bytes.size() % 12 != 0)
    throw DataError("'" + path + "' is truncated: " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 12");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, 4 * i));
    if (!std::isfinite(out[i])) throw DataError("'" + path + "' contains a non-finite value at float " + std::to_string(i));
  }
  return out;
}

template <class Real>
std::string encode_f32_triples(const Tensor<Real>& t) {
  require(t.cols() == 3, "bin files hold n x 3 values, got " + t.shape_string());
  std::string out;
  out.reserve(t.size() * 4);
  for (auto v : t.values()) {
    const auto f = static_cast<float>(v);
    if (!std::isfinite(f)) throw DataError("refusing to write a non-finite value");
    put_le(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw DataError(what + ": cannot parse number '" + s + "'");
  return v;
}

/// Parses a decimal straight to float32.
inline float parse_float(const std::string& s, const std::string& what) {
  float v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw DataError(what + ": cannot parse number '" + s + "'");
  return v;
}

inline std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw DataError(what + ": cannot parse count '" + s + "'");
  return v;
}

inline std::string shortest(float v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

}  // namespace detail

enum class CloudFormat { bin, ply };

inline CloudFormat format_from_path(const std::string& path) {
  auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == "ply") return CloudFormat::ply;
  return CloudFormat::bin;
}

/// n x 3 tensor from little-endian float32 triples.
template <class Real = double>
Tensor<Real> load_triples(const std::string& path) {
  const auto values = detail::decode_f32_triples(detail::read_file(path), path);
  Tensor<Real> t(values.size() / 3, 3);
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<Real>(values[i]);
  return t;
}

template <class Real>
void save_triples(const std::string& path, const Tensor<Real>& t) {
  detail::write_file(path, detail::encode_f32_triples(t));
}

/// ASCII PLY reader: vertex elements with at least float x, y, z properties.
/// Other properties and elements are skipped; point order is preserved.
template <class Real = double>
Tensor<Real> parse_ply(const std::string& text, const std::string& path = "<ply>") {
  std::istringstream in(text);
  std::string line;
  auto fail = [&](const std::string& why) { throw DataError("malformed PLY header in '" + path + "': " + why); };
  if (!std::getline(in, line) || detail::split_ws(line) != std::vector<std::string>{"ply"}) fail("missing 'ply' magic");

  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
    std::vector<std::string> types;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool have_format = false, ended = false;
  while (std::getline(in, line)) {
    auto tok = detail::split_ws(line);
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() != 3) fail("bad format line");
      if (tok[1] != "ascii") throw DataError("unsupported PLY format '" + tok[1] + "' in '" + path + "' (ascii only)");
      have_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) fail("bad element line");
      elements.push_back({tok[1], detail::parse_count(tok[2], "PLY element count"), {}, {}, false});
    } else if (tok[0] == "property") {
      if (elements.empty()) fail("property before any element");
      if (tok.size() == 5 && tok[1] == "list") {
        elements.back().has_list = true;
        elements.back().props.push_back(tok[4]);
        elements.back().types.push_back("list");
      } else if (tok.size() == 3) {
        elements.back().props.push_back(tok[2]);
        elements.back().types.push_back(tok[1]);
      } else {
        fail("bad property line");
      }
    } else if (tok[0] == "end_header") {
      ended = true;
      break;
    } else {
      fail("unexpected header line '" + line + "'");
    }
  }
  if (!have_format) fail("missing format line");
  if (!ended) fail("missing end_header");

  Tensor<Real> out;
  bool found = false;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i)
        if (!std::getline(in, line)) throw DataError("'" + path + "' is truncated in element '" + e.name + "'");
      continue;
    }
    if (e.has_list) fail("list properties on vertices are not supported");
    std::array<std::size_t, 3> col{};
    std::array<bool, 3> seen{};
    const char* axes[3] = {"x", "y", "z"};
    for (std::size_t p = 0; p < e.props.size(); ++p)
      for (std::size_t a = 0; a < 3; ++a)
        if (e.props[p] == axes[a]) col[a] = p, seen[a] = true;
    if (!(seen[0] && seen[1] && seen[2])) fail("vertex element lacks x, y, z");
    out = Tensor<Real>(e.count, 3);
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!std::getline(in, line)) throw DataError("'" + path + "' is truncated at vertex " + std::to_string(i));
      auto tok = detail::split_ws(line);
      if (tok.size() != e.props.size())
        throw DataError("'" + path + "': vertex " + std::to_string(i) + " has " + std::to_string(tok.size()) +
                        " values, expected " + std::to_string(e.props.size()));
      for (std::size_t a = 0; a < 3; ++a) {
        const auto& type = e.types[col[a]];
        const double v = type == "float" || type == "float32"
                             ? detail::parse_float(tok[col[a]], "'" + path + "'")
                             : detail::parse_double(tok[col[a]], "'" + path + "'");
        if (!std::isfinite(v)) throw DataError("'" + path + "' contains a non-finite value at vertex " + std::to_string(i));
        out(i, a) = static_cast<Real>(v);
      }
    }
    found = true;
  }
  if (!found) fail("no vertex element");
  return out;
}

template <class Real>
std::string ply_header(std::size_t n, bool colored) {
  std::string h = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(n) +
                  "\nproperty float x\nproperty float y\nproperty float z\n";
  if (colored) h += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  return h + "end_header\n";
}

/// ASCII PLY writer; coordinates are stored as float32 in shortest
/// round-trip decimal form.
template <class Real>
void save_ply(const std::string& path, const PointCloud<Real>& cloud) {
  std::string text = ply_header<Real>(cloud.size(), false);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      text += detail::shortest(static_cast<float>(cloud.coords()(i, c)));
      text += c < 2 ? ' ' : '\n';
    }
  }
  detail::write_file(path, text);
}

template <class Real = double>
PointCloud<Real> load_cloud(const std::string& path, CloudFormat format) {
  Tensor<Real> coords = format == CloudFormat::ply ? parse_ply<Real>(detail::read_file(path), path)
                                                   : load_triples<Real>(path);
  if (coords.rows() == 0) throw DataError("'" + path + "' contains no points");
  return PointCloud<Real>(std::move(coords));
}

template <class Real = double>
PointCloud<Real> load_cloud(const std::string& path) {
  return load_cloud<Real>(path, format_from_path(path));
}

template <class Real>
void save_cloud(const std::string& path, const PointCloud<Real>& cloud, CloudFormat format) {
  if (format == CloudFormat::ply)
    save_ply(path, cloud);
  else
    save_triples(path, cloud.coords());
}

template <class Real>
void save_cloud(const std::string& path, const PointCloud<Real>& cloud) {
  save_cloud(path, cloud, format_from_path(path));
}

template <class Real = double>
FlowField<Real> load_flow(const std::string& path) {
  return load_triples<Real>(path);
}

template <class Real>
void save_flow(const std::string& path, const FlowField<Real>& flow) {
  save_triples(path, flow);
}

/// Part labels as little-endian int32.
inline void save_labels(const std::string& path, const std::vector<std::int32_t>& labels) {
  std::string out;
  for (auto l : labels) detail::put_le(out, static_cast<std::uint32_t>(l));
  detail::write_file(path, out);
}

inline std::vector<std::int32_t> load_labels(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() % 4 != 0) throw DataError("'" + path + "' is truncated: labels are 4-byte integers");
  std::vector<std::int32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::int32_t>(detail::get_le<std::uint32_t>(bytes, 4 * i));
  return out;
}

/// Fixed 32-entry RGB palette for superpoint visualisation.
inline const std::array<std::array<std::uint8_t, 3>, 32>& superpoint_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 32> palette{{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},   {245, 130, 48},  {145, 30, 180},
      {70, 240, 240},  {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195}, {128, 128, 0},   {255, 215, 180},
      {0, 0, 128},     {128, 128, 128}, {255, 255, 255}, {0, 0, 0},       {102, 194, 165}, {252, 141, 98},
      {141, 160, 203}, {231, 138, 195}, {166, 216, 84},  {255, 217, 47},  {229, 196, 148}, {179, 179, 179},
      {27, 158, 119},  {217, 95, 2},
  }};
  return palette;
}

/// ASCII PLY with uchar red/green/blue per vertex taken from the palette at
/// the index of the point's dominant superpoint center.
template <class Real>
void export_superpoints(const std::string& path, const PointCloud<Real>& cloud,
                        const std::vector<std::size_t>& dominant_center) {
  require(dominant_center.size() == cloud.size(), "export_superpoints: one center index per point required");
  const auto& palette = superpoint_palette();
  std::string text = ply_header<Real>(cloud.size(), true);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) text += detail::shortest(static_cast<float>(cloud.coords()(i, c))) + ' ';
    const auto& rgb = palette[dominant_center[i] % palette.size()];
    text += std::to_string(rgb[0]) + ' ' + std::to_string(rgb[1]) + ' ' + std::to_string(rgb[2]) + '\n';
  }
  detail::write_file(path, text);
}

inline constexpr std::string_view kCheckpointMagic = "SPFW";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "SPFW", u32 version, u64 optimizer step, u32 tensor count, then per tensor:
/// u32 name length, name bytes, u32 rows, u32 cols, rows*cols f64 values.
/// All integers and reals are little-endian.
template <class Real>
std::string encode_checkpoint(const ParameterStore<Real>& store) {
  std::string out(kCheckpointMagic);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(store.step()));
  detail::put_le(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    detail::put_le(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le(out, static_cast<std::uint32_t>(e.value.rows()));
    detail::put_le(out, static_cast<std::uint32_t>(e.value.cols()));
    for (auto v : e.value.values()) detail::put_le(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
  return out;
}

inline ParameterStore<double> decode_checkpoint(const std::string& bytes, const std::string& path = "<checkpoint>") {
  detail::Reader r(bytes, path);
  if (bytes.size() < kCheckpointMagic.size() || std::string_view(bytes).substr(0, 4) != kCheckpointMagic)
    throw DataError("'" + path + "' is not a checkpoint: bad magic");
  r.read_string(4);
  const auto version = r.read<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
  ParameterStore<double> store;
  store.set_step(static_cast<std::size_t>(r.read<std::uint64_t>()));
  const auto count = r.read<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = r.read<std::uint32_t>();
    auto name = r.read_string(len);
    const auto rows = r.read<std::uint32_t>(), cols = r.read<std::uint32_t>();
    if (static_cast<std::uint64_t>(rows) * cols * 8 > bytes.size()) throw DataError("'" + path + "' is truncated");
    Tensor<double> value(rows, cols);
    for (auto& v : value.values()) {
      v = r.read_f64();
      if (!std::isfinite(v)) throw DataError("'" + path + "': tensor '" + name + "' has a non-finite value");
    }
    if (store.contains(name)) throw DataError("'" + path + "': duplicate tensor '" + name + "'");
    store.add(name, std::move(value));
  }
  if (!r.done()) throw DataError("'" + path + "': trailing bytes after the last tensor");
  return store;
}

template <class Real>
void save_checkpoint(const ParameterStore<Real>& store, const std::string& path) {
  detail::write_file(path, encode_checkpoint(store));
}

inline ParameterStore<double> load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path), path);
}

/// Throws DataError naming every missing, unexpected or mis-shaped tensor.
template <class Real, class Other>
void check_schema(const ParameterStore<Real>& loaded, const ParameterStore<Other>& expected) {
  std::string problems;
  for (const auto& e : expected.entries()) {
    if (!loaded.contains(e.name)) {
      problems += " missing tensor '" + e.name + "';";
      continue;
    }
    const auto& v = loaded.value(e.name);
    if (v.rows() != e.value.rows() || v.cols() != e.value.cols())
      problems += " tensor '" + e.name + "' has shape " + v.shape_string() + ", expected " + e.value.shape_string() + ";";
  }
  for (const auto& e : loaded.entries())
    if (!expected.contains(e.name)) problems += " unexpected tensor '" + e.name + "';";
  if (!problems.empty()) throw DataError("checkpoint does not match the model schema:" + problems);
}

/// Loads a checkpoint and verifies it against `expected`, returning the
/// tensors in the schema's order.
template <class Other>
ParameterStore<double> load_checkpoint(const std::string& path, const ParameterStore<Other>& expected) {
  auto loaded = load_checkpoint(path);
  check_schema(loaded, expected);
  ParameterStore<double> ordered;
  for (const auto& e : expected.entries()) ordered.add(e.name, loaded.value(e.name));
  ordered.set_step(loaded.step());
  return ordered;
}

}  // namespace spflow::io
