#include "satts/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

namespace satts::io {

void BinaryWriter::magic(const char tag[8]) { bytes(tag, 8); }

void BinaryWriter::u8(uint8_t v) { buf_.push_back(v); }

void BinaryWriter::u32(uint32_t v) { bytes(&v, sizeof v); }

void BinaryWriter::u64(uint64_t v) { bytes(&v, sizeof v); }

void BinaryWriter::f64(double v) { bytes(&v, sizeof v); }

void BinaryWriter::bytes(const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}

void BinaryWriter::string32(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::f64_array(const std::vector<double>& v) {
  u64(v.size());
  bytes(v.data(), v.size() * sizeof(double));
}

void BinaryWriter::i32_array(const std::vector<int>& v) {
  u64(v.size());
  for (int x : v) {
    const int32_t w = x;
    bytes(&w, sizeof w);
  }
}

void BinaryWriter::matrix(const Matrix& m) {
  u32(static_cast<uint32_t>(m.rows()));
  u32(static_cast<uint32_t>(m.cols()));
  bytes(m.data(), m.size() * sizeof(double));
}

void BinaryWriter::finish_to_file(const std::string& path) {
  const uint32_t crc = crc32_bytes(buf_.data(), buf_.size());
  u32(crc);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_io("cannot open for writing: " + tmp);
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    if (!out) fail_io("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail_io("rename failed for " + path + ": " + ec.message());
}

BinaryReader::BinaryReader(const std::string& path, const char expect_magic[8])
    : path_(path), buf_(read_file_bytes(path)) {
  if (buf_.size() < 12) fail_format(path + ": file too short");
  limit_ = buf_.size() - 4;
  uint32_t stored;
  std::memcpy(&stored, buf_.data() + limit_, 4);
  const uint32_t actual = crc32_bytes(buf_.data(), limit_);
  if (stored != actual) fail_format(path + ": checksum mismatch (corrupt file)");
  if (std::memcmp(buf_.data(), expect_magic, 8) != 0)
    fail_format(path + ": wrong file type (magic mismatch)");
  pos_ = 8;
}

void BinaryReader::need(size_t n) {
  if (n > limit_ - pos_) fail_format(path_ + ": truncated record");
}

uint8_t BinaryReader::u8() {
  need(1);
  return buf_[pos_++];
}

uint32_t BinaryReader::u32() {
  need(4);
  uint32_t v;
  std::memcpy(&v, buf_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

uint64_t BinaryReader::u64() {
  need(8);
  uint64_t v;
  std::memcpy(&v, buf_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

double BinaryReader::f64() {
  need(8);
  double v;
  std::memcpy(&v, buf_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

std::string BinaryReader::string32() {
  const uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> BinaryReader::f64_array() {
  const uint64_t n = u64();
  if (n > (limit_ - pos_) / sizeof(double)) fail_format(path_ + ": truncated record");
  std::vector<double> v(n);
  std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
  pos_ += n * sizeof(double);
  return v;
}

std::vector<double> BinaryReader::f64_block(size_t n) {
  if (n > (limit_ - pos_) / sizeof(double)) fail_format(path_ + ": truncated record");
  std::vector<double> v(n);
  std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
  pos_ += n * sizeof(double);
  return v;
}

std::vector<int> BinaryReader::i32_array() {
  const uint64_t n = u64();
  if (n > (limit_ - pos_) / sizeof(int32_t)) fail_format(path_ + ": truncated record");
  std::vector<int> v(n);
  for (uint64_t i = 0; i < n; ++i) {
    int32_t w;
    std::memcpy(&w, buf_.data() + pos_ + i * sizeof(int32_t), sizeof(int32_t));
    v[i] = w;
  }
  pos_ += n * sizeof(int32_t);
  return v;
}

Matrix BinaryReader::matrix() {
  const uint32_t r = u32();
  const uint32_t c = u32();
  const size_t n = static_cast<size_t>(r) * c;
  if (n > (limit_ - pos_) / sizeof(double)) fail_format(path_ + ": truncated record");
  Matrix m(static_cast<int>(r), static_cast<int>(c));
  std::memcpy(m.data(), buf_.data() + pos_, n * sizeof(double));
  pos_ += n * sizeof(double);
  return m;
}

uint32_t crc32_bytes(const void* p, size_t n) {
  return static_cast<uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

std::string file_crc32_hex(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  const uint32_t crc = crc32_bytes(bytes.data(), bytes.size());
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08x", crc);
  return hex;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail_io("cannot open: " + path);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) fail_io("read failed: " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_io("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_io("write failed: " + path);
}

}  // namespace satts::io
