#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hint::io {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

std::vector<unsigned char> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Git-style blob hash: SHA-1 over "blob <size>\0" followed by the content.
std::string git_blob_hash(std::string_view bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

// Little-endian append/read helpers for fixed-width values.
template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const unsigned char* data, std::size_t size, std::string name)
      : data_(data), size_(size), name_(std::move(name)) {}

  template <typename T>
  T get() {
    T value;
    need(sizeof(T));
    std::memcpy(&value, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::uint32_t get_u32_be();
  void read(void* dst, std::size_t n);
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }
  const unsigned char* cursor() const { return data_ + pos_; }
  // Throws FormatError naming the byte offset unless n bytes remain.
  void need(std::size_t n) const;

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string name_;
};

}  // namespace hint::io
