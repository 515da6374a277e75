#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fine/geometry.hpp"

namespace fine {

// Fully resolved run configuration. Parsed from a line-based `key = value`
// file; command-line `--set key=value` overrides win. Unknown keys are
// rejected so typos fail loudly.
struct RunConfig {
    std::uint64_t seed = 1;

    Dims3 volume_dims{48, 48, 24};
    int grid_cells_x = 3;
    int grid_cells_y = 3;
    Dims3 crop_size{16, 16, 16};
    Dims3 window_size{4, 4, 4};

    // Memory stages need at least two blocks: a block's crop-level attention
    // updates window tokens that only the next block's window attention can
    // propagate into visual tokens.
    std::vector<int> stage_dims{8, 16, 32};
    std::vector<int> stage_blocks{1, 2, 2};
    std::vector<int> stage_downsample{1, 2, 2};
    std::vector<int> fine_stages{1, 2};
    int heads = 2;
    int tokens_per_window = 1;
    int tokens_per_cell = 1;
    int mlp_ratio = 2;
    bool rel_pos_bias = true;
    bool deep_supervision = true;
    int classes = 4;
    std::string ablate = "none"; // none | no-volume-tokens | no-memory

    int epochs = 8;
    int iters_per_epoch = 250;
    double base_lr = 0.01;
    double momentum = 0.99;
    bool nesterov = true;
    double poly_power = 0.9;
    double dice_weight = 0.5;
    double ce_weight = 0.5;

    int distractor_min = 2;
    int distractor_max = 4;
    int blob_radius_min = 3;
    int blob_radius_max = 5;
    int marker_min_cell_dist = 2;
    double noise_sigma = 0.1;

    void apply(const std::string& key, const std::string& value);
    void validate() const;

    // Canonical serialization (fixed key order); identical configs produce
    // identical bytes, so the digest is stable.
    std::string resolved_text() const;
    std::uint64_t digest() const;

    static RunConfig from_text(const std::string& text,
                               const std::vector<std::string>& overrides = {});
    static RunConfig from_file(const std::string& path,
                               const std::vector<std::string>& overrides = {});
};

} // namespace fine
