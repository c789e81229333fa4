#pragma once

// Little-endian byte encoding shared by the FP and quantized SPCT containers.

#include <cstdint>
#include <string>
#include <vector>

#include "spectra/errors.hpp"
#include "spectra/model.hpp"

namespace spectra::container {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void i8(std::int8_t v) { bytes_.push_back(static_cast<std::uint8_t>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint8_t u8();
  std::int8_t i8() { return static_cast<std::int8_t>(u8()); }
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string raw(std::size_t n);
  /// Throws TruncatedFileError unless n more bytes are available.
  void need(std::size_t n) const;

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& path() const { return path_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
  std::string path_;
};

inline constexpr char kMagic[4] = {'S', 'P', 'C', 'T'};

void write_header(Writer& w, std::uint16_t version, const SpectraConfig& config);
void write_tensor_table(Writer& w, const ModelParams& model);
/// Appends the CRC-32 of everything written so far and writes the file.
void finish(Writer& w, const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);

/// Checks size and magic and returns the format version.
std::uint16_t peek_version(const std::vector<std::uint8_t>& bytes, const std::string& path);

/// Reads magic, version and config block; the version must equal `expected`.
SpectraConfig read_header(Reader& r, std::uint16_t expected);

ModelParams read_tensor_table(Reader& r, const SpectraConfig& config);

/// True when the trailing 4 bytes hold the CRC-32 of everything before them.
bool crc_matches(const std::vector<std::uint8_t>& bytes);
/// After a full parse exactly the 4-byte CRC must remain.
void expect_tail(Reader& r);

/// Runs `parse` over the file. Magic, version and truncation errors surface as
/// such; any other damage to a file whose checksum fails is reported as
/// CrcMismatchError.
template <class Parse>
auto parse_verified(const std::vector<std::uint8_t>& bytes, const std::string& path, Parse&& parse) {
  if (crc_matches(bytes)) {
    Reader r(bytes, path);
    auto out = parse(r);
    expect_tail(r);
    return out;
  }
  try {
    Reader r(bytes, path);
    parse(r);
    expect_tail(r);
  } catch (const BadMagicError&) {
    throw;
  } catch (const UnsupportedVersionError&) {
    throw;
  } catch (const TruncatedFileError&) {
    throw;
  } catch (const Error&) {
  }
  throw CrcMismatchError(path + ": CRC-32 mismatch");
}

}  // namespace spectra::container
