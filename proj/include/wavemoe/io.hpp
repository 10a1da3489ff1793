#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "wavemoe/errors.hpp"

namespace wavemoe::io {

// All on-disk integers and floats are little-endian. The helpers below write
// through byte buffers so the formats stay bit-exact on any host.

inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const std::uint8_t*>(&probe) == 1;
}

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> buf;
  std::memcpy(buf.data(), &value, sizeof(T));
  if (!host_is_little_endian()) std::reverse(buf.begin(), buf.end());
  os.write(reinterpret_cast<const char*>(buf.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> buf;
  is.read(reinterpret_cast<char*>(buf.data()), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
    throw IoError("unexpected end of file");
  if (!host_is_little_endian()) std::reverse(buf.begin(), buf.end());
  T value;
  std::memcpy(&value, buf.data(), sizeof(T));
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) throw ContractError("string too long for format");
  write_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto len = read_le<std::uint16_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (is.gcount() != static_cast<std::streamsize>(len))
    throw IoError("unexpected end of file in string");
  return s;
}

template <typename T>
void write_scalar_array(std::ostream& os, const T* values, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) write_le<T>(os, values[i]);
}

template <typename T>
void read_scalar_array(std::istream& is, T* values, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) values[i] = read_le<T>(is);
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
class Crc32 {
public:
  Crc32() { init_table(); }

  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i)
      state_ = table_[(state_ ^ p[i]) & 0xff] ^ (state_ >> 8);
  }

  std::uint32_t value() const { return state_ ^ 0xffffffffu; }

  static std::uint32_t of(const void* data, std::size_t len) {
    Crc32 c;
    c.update(data, len);
    return c.value();
  }

private:
  void init_table() {
    static std::array<std::uint32_t, 256> shared = [] {
      std::array<std::uint32_t, 256> t{};
      for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? (0xedb88320u ^ (c >> 1)) : (c >> 1);
        t[i] = c;
      }
      return t;
    }();
    table_ = shared.data();
  }

  const std::uint32_t* table_ = nullptr;
  std::uint32_t state_ = 0xffffffffu;
};

inline std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace wavemoe::io
