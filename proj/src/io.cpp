#include "atomo/io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace atomo::io {

namespace {
std::string g_provenance;
constexpr std::string_view kTrailerMagic = "ATG1";

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

void set_provenance(std::string tag) { g_provenance = std::move(tag); }
const std::string& provenance() { return g_provenance; }

BinaryWriter::BinaryWriter(const std::string& path, std::string_view magic)
    : path_(path), tmp_(path + ".tmp") {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) fail(ErrorKind::kIo, "cannot open " + tmp_ + " for writing");
  out_.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

BinaryWriter::~BinaryWriter() {
  if (!committed_) {
    out_.close();
    std::remove(tmp_.c_str());
  }
}

void BinaryWriter::put_string(const std::string& s) {
  put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::commit() {
  if (!g_provenance.empty()) {
    out_.write(g_provenance.data(), static_cast<std::streamsize>(g_provenance.size()));
    put<std::uint32_t>(static_cast<std::uint32_t>(g_provenance.size()));
    out_.write(kTrailerMagic.data(), static_cast<std::streamsize>(kTrailerMagic.size()));
  }
  out_.close();
  if (!out_) fail(ErrorKind::kIo, "write failed for " + tmp_);
  std::filesystem::rename(tmp_, path_);
  committed_ = true;
}

BinaryReader::BinaryReader(const std::string& path, std::string_view magic) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) fail(ErrorKind::kIo, "cannot open " + path);
  std::string got(magic.size(), '\0');
  in_.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in_ || got != magic)
    fail(ErrorKind::kData, path + ": expected magic " + std::string(magic));
}

std::string BinaryReader::get_string() {
  auto n = get<std::uint32_t>();
  std::string s(n, '\0');
  in_.read(s.data(), n);
  check();
  return s;
}

void BinaryReader::check() {
  if (!in_) fail(ErrorKind::kData, path_ + ": truncated container");
}

void write_text(const std::string& path, const std::string& text) {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot open " + tmp + " for writing");
    if (!g_provenance.empty() && ends_with(path, ".csv")) out << "# config_hash=" << g_provenance << '\n';
    if (!g_provenance.empty() && ends_with(path, ".ini")) out << "; config_hash=" << g_provenance << '\n';
    out << text;
    if (!g_provenance.empty() && ends_with(path, ".window")) out << "config_hash " << g_provenance << '\n';
    if (!out) fail(ErrorKind::kIo, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

// next header token of a PGM, skipping whitespace and # comments
std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Gray8 read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open raster " + path);
  if (pgm_token(in) != "P5") fail(ErrorKind::kIo, path + ": not a binary PGM (P5)");
  Gray8 img;
  try {
    img.width = std::stoi(pgm_token(in));
    img.height = std::stoi(pgm_token(in));
    int maxval = std::stoi(pgm_token(in));
    if (maxval <= 0 || maxval > 255) fail(ErrorKind::kIo, path + ": only 8-bit PGM supported");
  } catch (const std::logic_error&) {
    fail(ErrorKind::kIo, path + ": malformed PGM header");
  }
  if (img.width <= 0 || img.height <= 0) fail(ErrorKind::kIo, path + ": empty raster");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) fail(ErrorKind::kIo, path + ": truncated raster");
  return img;
}

void write_pgm(const std::string& path, const Gray8& image) {
  std::ostringstream ss;
  ss << "P5\n";
  if (!g_provenance.empty()) ss << "# config_hash=" << g_provenance << '\n';
  ss << image.width << ' ' << image.height << "\n255\n";
  ss.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  write_text(path, ss.str());
}

std::string read_provenance(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  // binary trailer
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size >= 8) {
    char tail[8];
    in.seekg(static_cast<std::streamoff>(size - 8));
    in.read(tail, 8);
    if (std::string_view(tail + 4, 4) == kTrailerMagic) {
      std::uint32_t n;
      std::memcpy(&n, tail, 4);
      if (n + 8 <= size) {
        std::string tag(n, '\0');
        in.seekg(static_cast<std::streamoff>(size - 8 - n));
        in.read(tag.data(), n);
        return tag;
      }
    }
  }
  // text stamp near the top or, for sidecars and manifests, anywhere
  in.clear();
  in.seekg(0);
  std::string head(std::min<std::size_t>(size, 1 << 16), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  auto at = head.find("config_hash");
  if (at == std::string::npos) return {};
  at += 11;
  while (at < head.size() && (head[at] == '=' || head[at] == ' ' || head[at] == '"' || head[at] == ':')) ++at;
  std::string tag;
  while (at < head.size() && std::isxdigit(static_cast<unsigned char>(head[at]))) tag.push_back(head[at++]);
  return tag;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace atomo::io
