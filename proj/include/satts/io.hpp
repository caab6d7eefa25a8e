#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "satts/common.hpp"
#include "satts/numkit.hpp"

namespace satts::io {

// All on-disk formats share one envelope: an 8-byte magic, little-endian
// fixed-width fields, and a trailing CRC32 over everything before it. The
// writer accumulates into a buffer so the checksum can be appended last.

class BinaryWriter {
 public:
  void magic(const char tag[8]);
  void u8(uint8_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void bytes(const void* p, size_t n);
  void string32(const std::string& s);          // u32 length + raw bytes
  void f64_array(const std::vector<double>& v); // u64 count + payload
  void i32_array(const std::vector<int>& v);    // u64 count + i32 payload
  void matrix(const Matrix& m);                 // u32 rows, u32 cols, payload

  /// Appends the CRC32 of the current buffer, then writes the file atomically
  /// (temp file + rename).
  void finish_to_file(const std::string& path);

  const std::vector<uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class BinaryReader {
 public:
  /// Loads the whole file, verifies the trailing CRC32 and the magic tag.
  BinaryReader(const std::string& path, const char expect_magic[8]);

  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  double f64();
  std::string string32();
  std::vector<double> f64_array();
  /// n doubles with no length prefix (count known from elsewhere in the file).
  std::vector<double> f64_block(size_t n);
  std::vector<int> i32_array();
  Matrix matrix();

  bool at_end() const { return pos_ == limit_; }
  const std::string& path() const { return path_; }

 private:
  void need(size_t n);
  std::string path_;
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
  size_t limit_ = 0;  // payload end (exclusive of the stored checksum)
};

/// CRC32 (zlib polynomial) of a byte range.
uint32_t crc32_bytes(const void* p, size_t n);

/// CRC32 of a file's full contents, as a lowercase hex string.
std::string file_crc32_hex(const std::string& path);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace satts::io
