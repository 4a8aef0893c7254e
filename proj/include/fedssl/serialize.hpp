#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedssl/param_set.hpp"

namespace fedssl::io {

using Bytes = std::vector<std::uint8_t>;

// Little-endian primitive encoder.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void raw(const void* p, std::size_t n);
    void str(const std::string& s);  // u32 length + bytes

    const Bytes& bytes() const { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    Bytes buf_;
};

// Bounds-checked decoder; throws FormatError on truncation.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    void raw(void* p, std::size_t n);
    std::string str();
    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const;
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// Checkpoint container:
//   magic "FSSLCKPT" (8 bytes) | u32 version (=1) | u64 count
//   per parameter: u32 name length | UTF-8 name | u32 rank | u64 extents[rank]
//                  | f64 payload (row-major, little-endian)
inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'S', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

Bytes encode_checkpoint(const ParamSet& params);
// Decoded tensors are leaves with requires_grad = true, all tagged global.
ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
Bytes read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace fedssl::io
