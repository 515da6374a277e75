#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fine/errors.hpp"
#include "fine/tensor.hpp"

namespace fine {

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian; big-endian hosts are unsupported");

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, const void* p, std::size_t n);
void write_string(std::ostream& os, const std::string& s); // u32 length prefix
void write_tensor(std::ostream& os, const Tensor& t);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_bytes(std::istream& is, void* p, std::size_t n);
std::string read_string(std::istream& is);
Tensor read_tensor(std::istream& is);

// FNV-1a 64-bit, used for config digests.
std::uint64_t fnv1a64(const std::string& s);

} // namespace fine
