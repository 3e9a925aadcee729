#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "cisseg/errors.hpp"

// Shared plumbing for the text record files (checkpoints, prototype snapshots).
//
// Every record file is plain text: a magic/version line, a body, and a final
// `checksum <16 hex digits>` line holding FNV-1a 64 of everything before it.
// Doubles are written in shortest round-trip form, so reloads are bitwise.
namespace cisseg::io {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("cannot format double");
  return std::string(buf, end);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw IoError("malformed number '" + std::string(s) + "'");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view s) {
  Int v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw IoError("malformed integer '" + std::string(s) + "'");
  }
  return v;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_checked(const std::filesystem::path& path, const std::string& body) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << body << "checksum " << hex64(fnv1a(body)) << '\n';
  out.flush();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

/// Reads a record file, verifies its checksum, and returns the body.
inline std::string read_checked(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty() || text.back() != '\n') throw IoError("'" + path.string() + "' is truncated");
  const auto last = text.rfind('\n', text.size() - 2);
  const std::size_t start = last == std::string::npos ? 0 : last + 1;
  const std::string_view trailer(text.data() + start, text.size() - start - 1);
  constexpr std::string_view kPrefix = "checksum ";
  if (trailer.substr(0, kPrefix.size()) != kPrefix) {
    throw IoError("'" + path.string() + "' has no checksum line");
  }
  std::string body = text.substr(0, start);
  if (trailer.substr(kPrefix.size()) != hex64(fnv1a(body))) {
    throw IoError("'" + path.string() + "' failed checksum verification");
  }
  return body;
}

/// Whitespace-token cursor over a record body, line by line.
class LineReader {
 public:
  explicit LineReader(std::string body) : in_(std::move(body)) {}

  // Next non-empty line split into tokens; throws at end of input.
  std::vector<std::string> next(std::string_view expect_key = {}) {
    std::string line;
    while (std::getline(in_, line)) {
      std::istringstream ls(line);
      std::vector<std::string> tok{std::istream_iterator<std::string>(ls),
                                   std::istream_iterator<std::string>()};
      if (tok.empty()) continue;
      if (!expect_key.empty() && tok.front() != expect_key) {
        throw IoError("expected '" + std::string(expect_key) + "', found '" + tok.front() + "'");
      }
      return tok;
    }
    throw IoError("unexpected end of record");
  }

  bool at_end() {
    in_ >> std::ws;
    return in_.peek() == std::char_traits<char>::eof();
  }

 private:
  std::istringstream in_;
};

inline void expect_tokens(const std::vector<std::string>& tok, std::size_t n) {
  if (tok.size() != n) {
    throw IoError("line '" + (tok.empty() ? std::string() : tok.front()) + "' has " +
                  std::to_string(tok.size()) + " fields, expected " + std::to_string(n));
  }
}

}  // namespace cisseg::io
