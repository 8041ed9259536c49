#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlmap/core/crc32.hpp"

namespace nlmap {

/// Structured I/O failure (missing file, bad magic, truncation, checksum).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Little-endian binary writer that tracks a running CRC32.
/// All on-disk formats in this project assume a little-endian host.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open for writing: " + path);
    path_ = path;
  }

  template <typename T>
  void write(const T* data, size_t count) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* bytes = reinterpret_cast<const char*>(data);
    const size_t n = count * sizeof(T);
    out_.write(bytes, static_cast<std::streamsize>(n));
    crc_ = crc32(bytes, n, crc_);
  }

  template <typename T>
  void write_one(T v) {
    write(&v, 1);
  }

  void write_bytes(const std::string& s) { write(s.data(), s.size()); }

  uint32_t crc() const { return crc_; }

  void close() {
    out_.close();
    if (!out_) throw FormatError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
  uint32_t crc_ = 0;
};

/// Whole-file reader with CRC tracking and explicit truncation errors.
class BinReader {
 public:
  explicit BinReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError("cannot open: " + path);
    const auto size = in.tellg();
    buf_.resize(static_cast<size_t>(size));
    in.seekg(0);
    in.read(buf_.data(), size);
    if (!in) throw FormatError("read failed: " + path);
  }

  size_t remaining() const { return buf_.size() - pos_; }
  size_t position() const { return pos_; }

  template <typename T>
  void read(T* data, size_t count) {
    static_assert(std::is_trivially_copyable_v<T>);
    const size_t n = count * sizeof(T);
    if (remaining() < n) throw FormatError("truncated file");
    std::memcpy(data, buf_.data() + pos_, n);
    crc_ = crc32(buf_.data() + pos_, n, crc_);
    pos_ += n;
  }

  template <typename T>
  T read_one() {
    T v;
    read(&v, 1);
    return v;
  }

  std::string read_bytes(size_t n) {
    if (remaining() < n) throw FormatError("truncated file");
    std::string s(buf_.data() + pos_, n);
    crc_ = crc32(buf_.data() + pos_, n, crc_);
    pos_ += n;
    return s;
  }

  uint32_t crc() const { return crc_; }

 private:
  std::vector<char> buf_;
  size_t pos_ = 0;
  uint32_t crc_ = 0;
};

}  // namespace nlmap
