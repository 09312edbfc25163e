#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "ntformer/errors.hpp"

namespace ntformer::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  template <typename T>
  void scalar(T v) {
    static_assert(std::is_arithmetic_v<T>);
    bytes(&v, sizeof(T));
  }
  std::vector<char>& buffer() { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  std::vector<char> buf_;
};

// Bounds-checked reader; running off the end throws UserError(on_short).
class ByteReader {
 public:
  ByteReader(const std::vector<char>& buf, std::string on_short)
      : buf_(buf), on_short_(std::move(on_short)) {}

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool magic(std::string_view m) {
    if (remaining() < m.size()) return false;
    const bool ok = std::string_view(buf_.data() + pos_, m.size()) == m;
    pos_ += m.size();
    return ok;
  }
  template <typename T>
  T scalar() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string string(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const char* cursor() const { return buf_.data() + pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) throw UserError(on_short_);
  }

 private:
  const std::vector<char>& buf_;
  std::string on_short_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

// Writes to a sibling temp file, then renames over `path`.
void atomic_write(const std::filesystem::path& path, const char* data, std::size_t size);
inline void atomic_write(const std::filesystem::path& path, const std::vector<char>& data) {
  atomic_write(path, data.data(), data.size());
}
inline void atomic_write(const std::filesystem::path& path, std::string_view text) {
  atomic_write(path, text.data(), text.size());
}

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

// `h` continues a running hash, so large inputs can be folded piecewise.
std::uint64_t fnv1a(const char* data, std::size_t size, std::uint64_t h = kFnvOffset);

}  // namespace ntformer::detail
