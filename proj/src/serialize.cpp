#include "fedssl/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fedssl/errors.hpp"

namespace fedssl::io {

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
}

void ByteWriter::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
}

void ByteReader::need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("truncated input");
}

std::uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
}

std::string ByteReader::str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
}

Bytes encode_checkpoint(const ParamSet& params) {
    ByteWriter w;
    w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    w.u64(params.size());
    for (auto& e : params.entries()) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
        for (auto d : e.tensor.shape()) w.u64(d);
        for (double v : e.tensor.data()) w.f64(v);
    }
    return w.take();
}

ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint (bad magic)");
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t count = r.u64();
    ParamSet out;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str();
        std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw FormatError("bad rank for " + name);
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(r.u64());
            if (d == 0) throw FormatError("zero extent for " + name);
            n *= d;
        }
        if (n > r.remaining() / 8) throw FormatError("truncated payload for " + name);
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64();
        out.add(std::move(name), Tensor(std::move(shape), std::move(data), true));
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint");
    return out;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed: " + path.string());
}

Bytes read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open for reading: " + path.string());
    return Bytes(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
    write_file(path, encode_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace fedssl::io
