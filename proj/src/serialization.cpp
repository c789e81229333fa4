// SPCT model container.
//
//   magic "SPCT" | u16 version | config block | u32 n_tensors | tensors... | u32 crc32
//
// config block: T, C, K, n_fft, hop, k, D, H (u32 each), dropout_p (f64),
//               use_channel_attention (u8), use_gru (u8), seed (u64)
// tensor:       u16 name_len, name bytes (UTF-8), u8 rank, u32 dims[rank],
//               f32 values[prod(dims)]
// The CRC-32 covers every byte before it. All integers are little-endian.

#include <bit>
#include <fstream>
#include <iterator>
#include <set>

#include <zlib.h>

#include "container.hpp"
#include "spectra/errors.hpp"
#include "spectra/model.hpp"

namespace spectra {
namespace container {

void Writer::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Reader::need(std::size_t n) const {
  if (remaining() < n) {
    throw TruncatedFileError(path_ + ": file truncated at byte " + std::to_string(pos_) + " (needed " +
                             std::to_string(n) + " more bytes)");
  }
}

std::uint8_t Reader::u8() {
  need(1);
  return bytes_[pos_++];
}
std::uint16_t Reader::u16() {
  need(2);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(u64()); }
std::string Reader::raw(std::size_t n) {
  need(n);
  std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
  pos_ += n;
  return s;
}

void write_header(Writer& w, std::uint16_t version, const SpectraConfig& c) {
  w.raw(std::string(kMagic, 4));
  w.u16(version);
  for (std::uint32_t v : {c.T, c.C, c.K, c.n_fft, c.hop, c.k, c.D, c.H}) w.u32(v);
  w.f64(c.dropout_p);
  w.u8(c.use_channel_attention ? 1 : 0);
  w.u8(c.use_gru ? 1 : 0);
  w.u64(c.seed);
}

namespace {

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.values()) w.f32(static_cast<float>(v));
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, data, static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void write_tensor_table(Writer& w, const ModelParams& model) {
  w.u32(static_cast<std::uint32_t>(model.params.size() + model.buffers.size()));
  for (const auto& [name, t] : model.params) write_tensor(w, name, t);
  for (const auto& [name, t] : model.buffers) write_tensor(w, name, t);
}

void finish(Writer& w, const std::string& path) {
  auto& bytes = w.bytes();
  const std::uint32_t crc = crc_of(bytes.data(), bytes.size());
  w.u32(crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path + ": write failed");
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint16_t peek_version(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  Reader r(bytes, path);
  const std::string magic = r.raw(4);
  if (magic != std::string(kMagic, 4)) throw BadMagicError(path + ": not an SPCT file (bad magic)");
  return r.u16();
}

SpectraConfig read_header(Reader& r, std::uint16_t expected) {
  const std::string magic = r.raw(4);
  if (magic != std::string(kMagic, 4)) throw BadMagicError(r.path() + ": not an SPCT file (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != expected) {
    throw UnsupportedVersionError(r.path() + ": unsupported SPCT version " + std::to_string(version) +
                                  " (expected " + std::to_string(expected) + ")");
  }
  SpectraConfig c;
  for (std::uint32_t* v : {&c.T, &c.C, &c.K, &c.n_fft, &c.hop, &c.k, &c.D, &c.H}) *v = r.u32();
  c.dropout_p = r.f64();
  c.use_channel_attention = r.u8() != 0;
  c.use_gru = r.u8() != 0;
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(r.path() + ": stored config is invalid: " + e.what());
  }
  return c;
}

ModelParams read_tensor_table(Reader& r, const SpectraConfig& config) {
  ModelParams m;
  m.config = config;
  const auto names = param_names(config);
  const auto bufs = buffer_names();
  const std::set<std::string> learnable(names.begin(), names.end());
  const std::set<std::string> buffers(bufs.begin(), bufs.end());

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.raw(r.u16());
    const std::size_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const bool is_param = learnable.count(name) > 0;
    if (!is_param && buffers.count(name) == 0) throw FormatError(r.path() + ": unexpected tensor '" + name + "'");
    if (shape != param_shape(config, name)) {
      throw FormatError(r.path() + ": tensor '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                        shape_str(param_shape(config, name)));
    }
    const std::size_t n = shape_size(shape);
    r.need(4 * n);
    std::vector<double> values(n);
    for (auto& v : values) v = static_cast<double>(r.f32());
    (is_param ? m.params : m.buffers).emplace(name, Tensor(shape, std::move(values)));
  }
  if (m.params.size() != learnable.size() || m.buffers.size() != buffers.size()) {
    throw FormatError(r.path() + ": tensor table does not match the stored config");
  }
  return m;
}

bool crc_matches(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) return false;
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  return stored == crc_of(bytes.data(), body);
}

void expect_tail(Reader& r) {
  r.need(4);
  if (r.remaining() != 4) throw FormatError(r.path() + ": trailing bytes after tensor data");
}

}  // namespace container

void save_model(const ModelParams& model, const std::string& path) {
  container::Writer w;
  container::write_header(w, kFormatVersion, model.config);
  container::write_tensor_table(w, model);
  container::finish(w, path);
}

ModelParams load_model(const std::string& path) {
  const auto bytes = container::read_file(path);
  return container::parse_verified(bytes, path, [](container::Reader& r) {
    const SpectraConfig config = container::read_header(r, kFormatVersion);
    return container::read_tensor_table(r, config);
  });
}

}  // namespace spectra
