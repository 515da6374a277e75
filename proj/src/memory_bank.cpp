#include "fine/memory_bank.hpp"

#include "fine/param_store.hpp"
#include "fine/serialize.hpp"

namespace fine {

namespace {
constexpr std::uint32_t kBankVersion = 1;
constexpr char kBankMagic[8] = {'F', 'B', 'A', 'N', 'K', '0', '0', '1'};
} // namespace

MemoryBank::MemoryBank(int cell_count, int tokens_per_cell, int channels, Rng& init_rng)
    : cell_count_(cell_count), tokens_per_cell_(tokens_per_cell), channels_(channels) {
    if (cell_count < 1 || tokens_per_cell < 1 || channels < 1)
        throw ContractError("MemoryBank: all extents must be >= 1");
    tokens_ = init_tensor({cell_count * tokens_per_cell, channels}, Init::normal_002, init_rng);
    init_tokens_ = tokens_.detached_copy();
    momentum_ = Tensor::zeros(tokens_.shape());
    seen_.assign(static_cast<std::size_t>(cell_count), 0);
}

void MemoryBank::mark_seen(const IntersectionSet& inter) {
    for (int cell : inter.cells) {
        if (cell < 0 || cell >= cell_count_)
            throw BoundsError("MemoryBank: cell " + std::to_string(cell) + " out of range");
        seen_[static_cast<std::size_t>(cell)] = 1;
    }
}

int MemoryBank::seen_count() const {
    int n = 0;
    for (std::uint8_t s : seen_) n += s;
    return n;
}

std::vector<int> MemoryBank::intersection_rows(const IntersectionSet& inter) const {
    std::vector<int> rows;
    rows.reserve(inter.cells.size() * static_cast<std::size_t>(tokens_per_cell_));
    for (int cell : inter.cells)
        for (int t = 0; t < tokens_per_cell_; ++t) rows.push_back(cell * tokens_per_cell_ + t);
    return rows;
}

Tensor MemoryBank::gather_intersection(const Tensor& bound_tokens, const IntersectionSet& inter) {
    if (inter.cells.empty())
        throw ContractError("gather_intersection: empty intersection set");
    mark_seen(inter);
    return gather_rows(bound_tokens, intersection_rows(inter));
}

std::vector<bool> MemoryBank::unseen_row_mask() const {
    std::vector<bool> mask(static_cast<std::size_t>(row_count()), false);
    for (int cell = 0; cell < cell_count_; ++cell) {
        if (seen_[static_cast<std::size_t>(cell)]) continue;
        for (int t = 0; t < tokens_per_cell_; ++t)
            mask[static_cast<std::size_t>(cell * tokens_per_cell_ + t)] = true;
    }
    return mask;
}

void MemoryBank::save(std::ostream& os) const {
    write_bytes(os, kBankMagic, sizeof(kBankMagic));
    write_u32(os, kBankVersion);
    write_u32(os, static_cast<std::uint32_t>(cell_count_));
    write_u32(os, static_cast<std::uint32_t>(tokens_per_cell_));
    write_u32(os, static_cast<std::uint32_t>(channels_));
    write_tensor(os, tokens_);
    write_tensor(os, momentum_);
    write_tensor(os, init_tokens_);
    write_bytes(os, seen_.data(), seen_.size());
}

MemoryBank MemoryBank::load(std::istream& is) {
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::string(magic, 8) != std::string(kBankMagic, 8))
        throw FormatError("memory bank stream: bad magic");
    const std::uint32_t version = read_u32(is);
    if (version != kBankVersion)
        throw FormatError("memory bank stream: unsupported version " + std::to_string(version));
    MemoryBank bank;
    bank.cell_count_ = static_cast<int>(read_u32(is));
    bank.tokens_per_cell_ = static_cast<int>(read_u32(is));
    bank.channels_ = static_cast<int>(read_u32(is));
    if (bank.cell_count_ < 1 || bank.tokens_per_cell_ < 1 || bank.channels_ < 1)
        throw FormatError("memory bank stream: invalid extents");
    bank.tokens_ = read_tensor(is);
    bank.momentum_ = read_tensor(is);
    bank.init_tokens_ = read_tensor(is);
    const std::vector<int> expect{bank.cell_count_ * bank.tokens_per_cell_, bank.channels_};
    if (bank.tokens_.shape() != expect)
        throw FormatError("memory bank stream: token shape " + shape_str(bank.tokens_.shape()) +
                          " does not match header extents " + shape_str(expect));
    if (bank.momentum_.shape() != expect || bank.init_tokens_.shape() != expect)
        throw FormatError("memory bank stream: state shape mismatch");
    bank.seen_.assign(static_cast<std::size_t>(bank.cell_count_), 0);
    read_bytes(is, bank.seen_.data(), bank.seen_.size());
    return bank;
}

} // namespace fine
