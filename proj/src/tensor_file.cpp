#include "embedkit/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace embedkit {

namespace {

constexpr char kMagic[4] = {'G', 'U', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(b, 8);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2))
        throw std::runtime_error("TensorFile: truncated file");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("TensorFile: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        throw std::runtime_error("TensorFile: truncated file");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

void TensorFile::put(const std::string& name, Matrix value) {
    if (has(name)) throw std::invalid_argument("TensorFile: duplicate section '" + name + "'");
    sections_.emplace_back(name, std::move(value));
}

void TensorFile::put_scalar(const std::string& name, double value) {
    Matrix m(1, 1);
    m(0, 0) = value;
    put(name, std::move(m));
}

bool TensorFile::has(const std::string& name) const {
    for (const auto& [n, m] : sections_)
        if (n == name) return true;
    return false;
}

const Matrix& TensorFile::get(const std::string& name) const {
    for (const auto& [n, m] : sections_)
        if (n == name) return m;
    throw std::runtime_error("TensorFile: missing section '" + name + "'");
}

double TensorFile::get_scalar(const std::string& name) const {
    const Matrix& m = get(name);
    if (m.rows() != 1 || m.cols() != 1)
        throw std::runtime_error("TensorFile: section '" + name + "' is not a scalar");
    return m(0, 0);
}

void TensorFile::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("TensorFile: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(sections_.size()));
    for (const auto& [name, m] : sections_) {
        if (name.size() > 0xffff)
            throw std::invalid_argument("TensorFile: section name too long");
        put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(m.rows()));
        put_u32(os, static_cast<std::uint32_t>(m.cols()));
        for (std::size_t i = 0; i < m.size(); ++i) put_f64(os, m.data()[i]);
    }
    if (!os) throw std::runtime_error("TensorFile: write failure on '" + path + "'");
}

TensorFile TensorFile::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("TensorFile: cannot open '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4)) throw std::runtime_error("TensorFile: truncated header");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("TensorFile: bad magic in '" + path + "'");
    std::uint32_t version = get_u32(is);
    if (version != kVersion)
        throw std::runtime_error("TensorFile: unsupported version " + std::to_string(version));
    std::uint32_t count = get_u32(is);
    TensorFile tf;
    for (std::uint32_t k = 0; k < count; ++k) {
        std::uint16_t len = get_u16(is);
        std::string name(len, '\0');
        if (len > 0 && !is.read(name.data(), len))
            throw std::runtime_error("TensorFile: truncated section name");
        std::uint32_t rows = get_u32(is);
        std::uint32_t cols = get_u32(is);
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = get_f64(is);
        tf.put(name, std::move(m));
    }
    if (is.peek() != EOF) throw std::runtime_error("TensorFile: trailing bytes");
    return tf;
}

}  // namespace embedkit
