#include "fine/serialize.hpp"

#include <cstring>

namespace fine {

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw FormatError("write failed");
}

void write_u8(std::ostream& os, std::uint8_t v) { write_bytes(os, &v, 1); }
void write_u32(std::ostream& os, std::uint32_t v) { write_bytes(os, &v, 4); }
void write_u64(std::ostream& os, std::uint64_t v) { write_bytes(os, &v, 8); }
void write_f64(std::ostream& os, double v) { write_bytes(os, &v, 8); }

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    write_bytes(os, t.data(), t.size() * sizeof(double));
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n))
        throw FormatError("truncated stream: expected " + std::to_string(n) + " more bytes");
}

std::uint8_t read_u8(std::istream& is) {
    std::uint8_t v;
    read_bytes(is, &v, 1);
    return v;
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    read_bytes(is, &v, 4);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    read_bytes(is, &v, 8);
    return v;
}

double read_f64(std::istream& is) {
    double v;
    read_bytes(is, &v, 8);
    return v;
}

std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    if (n > (1u << 30)) throw FormatError("string length " + std::to_string(n) + " is implausible");
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

Tensor read_tensor(std::istream& is) {
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " is implausible");
    std::vector<int> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = read_u32(is);
        if (d == 0 || d > (1u << 28)) throw FormatError("tensor extent out of range");
        shape[i] = static_cast<int>(d);
    }
    Tensor t = Tensor::zeros(shape);
    read_bytes(is, t.data(), t.size() * sizeof(double));
    return t;
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace fine
