#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "unifuse/error.hpp"

namespace unifuse::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Append-only little-endian byte buffer.
class Writer {
public:
    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }
    void bytes(std::string_view s) { buf_.append(s); }
    /// u16 length prefix followed by the bytes.
    void str16(std::string_view s) {
        if (s.size() > 0xffff) throw ConfigError("string too long for u16 length prefix");
        put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
        bytes(s);
    }
    [[nodiscard]] const std::string& data() const noexcept { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

/// Bounds-checked cursor over a byte buffer; short reads throw IoError naming `what`.
class Reader {
public:
    Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        std::string_view s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str16() { return std::string(bytes(get<std::uint16_t>())); }
    [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw IoError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::string_view data_;
    std::string what_;
    std::size_t pos_ = 0;
};

/// Whole-file helpers; both throw IoError with the path on failure.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace unifuse::binio
