#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <vector>

#include "fine/geometry.hpp"
#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

// Persistent volume tokens for one volume at one embedding width. Tokens are
// learnable parameters; cells that no processed crop has touched stay masked
// out of attention and receive no gradient, so their rows never move from
// the initialization (which doubles as a learned positional code).
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(int cell_count, int tokens_per_cell, int channels, Rng& init_rng);

    int cell_count() const { return cell_count_; }
    int tokens_per_cell() const { return tokens_per_cell_; }
    int channels() const { return channels_; }
    int row_count() const { return cell_count_ * tokens_per_cell_; }

    Tensor& tokens() { return tokens_; }
    const Tensor& tokens() const { return tokens_; }
    Tensor& momentum() { return momentum_; }
    const Tensor& init_tokens() const { return init_tokens_; }

    bool seen(int cell) const { return seen_[static_cast<std::size_t>(cell)] != 0; }
    const std::vector<std::uint8_t>& seen_flags() const { return seen_; }
    void mark_seen(const IntersectionSet& inter);
    int seen_count() const;

    // Bank rows for the intersecting cells, in ascending cell order. Marks
    // those cells seen. `bound_tokens` is the tape-bound view of tokens().
    Tensor gather_intersection(const Tensor& bound_tokens, const IntersectionSet& inter);

    std::vector<int> intersection_rows(const IntersectionSet& inter) const;

    // True where the owning cell has never been seen.
    std::vector<bool> unseen_row_mask() const;

    void save(std::ostream& os) const;
    static MemoryBank load(std::istream& is);

private:
    int cell_count_ = 0;
    int tokens_per_cell_ = 0;
    int channels_ = 0;
    Tensor tokens_;
    Tensor momentum_;
    Tensor init_tokens_;
    std::vector<std::uint8_t> seen_;
};

} // namespace fine
