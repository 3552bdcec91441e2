#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atomo/error.hpp"

namespace atomo::io {

static_assert(std::endian::native == std::endian::little,
              "containers are written in native order; big-endian hosts need byte swapping");

// Little-endian container writer.  Data go to `path.tmp` and are renamed on
// commit(), so readers never see a half-written file.
class BinaryWriter {
 public:
  BinaryWriter(const std::string& path, std::string_view magic);
  ~BinaryWriter();
  BinaryWriter(const BinaryWriter&) = delete;
  BinaryWriter& operator=(const BinaryWriter&) = delete;

  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <class T>
  void put_span(std::span<const T> v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }
  void put_string(const std::string& s);
  void commit();

 private:
  std::string path_;
  std::string tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

class BinaryReader {
 public:
  BinaryReader(const std::string& path, std::string_view magic);

  template <class T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  template <class T>
  std::vector<T> get_vector(std::size_t n) {
    std::vector<T> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    check();
    return v;
  }
  std::string get_string();

 private:
  void check();
  std::string path_;
  std::ifstream in_;
};

// Text file written atomically (temp + rename).
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// 8-bit binary PGM
struct Gray8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, top row first
};
Gray8 read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Gray8& image);

std::uint64_t fnv1a(std::string_view bytes);

// Provenance tag (the run's config hash) stamped into every file written
// while it is set: a trailer after the payload of binary containers
// ("<tag><u32 length>ATG1", invisible to the readers), a leading
// "# config_hash=" line on .csv, a PGM header comment, a "config_hash" line
// in .window sidecars and a leading "; config_hash=" line on .ini files.
// Empty (the default) = no stamping.  Not thread-safe: set it before work starts.
void set_provenance(std::string tag);
const std::string& provenance();
// tag stamped into `path`, empty if none
std::string read_provenance(const std::string& path);

}  // namespace atomo::io
