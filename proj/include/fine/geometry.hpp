#pragma once

#include <string>
#include <vector>

#include "fine/errors.hpp"
#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

struct Dims3 {
    int x = 0, y = 0, z = 0;
    bool operator==(const Dims3&) const = default;
    long long voxels() const { return static_cast<long long>(x) * y * z; }
    std::string str() const;
};

// Voxel order is row-major with x slowest and z fastest.
inline long long voxel_index(const Dims3& dims, int x, int y, int z) {
    return (static_cast<long long>(x) * dims.y + y) * dims.z + z;
}

// Coarse partition of the full volume that owns the volume tokens. Cells
// subdivide only x and y; each cell spans the full z extent, so a crop can
// straddle at most one cell boundary per axis and intersects at most 4 cells.
struct VolumeGrid {
    Dims3 volume_dims;
    int cells_x = 1, cells_y = 1;   // cell counts
    int cell_size_x = 0, cell_size_y = 0; // voxels per cell (last cells may be smaller)
    int cell_count() const { return cells_x * cells_y; }

    int cell_of_voxel(int x, int y) const;
    int cell_index(int cx, int cy) const { return cx * cells_y + cy; }
};

struct CropSpec {
    Dims3 origin;
    Dims3 size;
};

struct WindowPartition {
    Dims3 crop_size;
    Dims3 window_size;
    Dims3 window_grid;  // windows per axis
    int window_count = 0;   // N
    int window_voxels = 0;  // N_u
};

struct IntersectionSet {
    std::vector<int> cells; // ascending, unique
    int count() const { return static_cast<int>(cells.size()); }
};

// Builds the sub-volume grid. `min_crop` is the configured crop size; cells
// must be at least that large in x and y so the at-most-4 intersection bound
// holds for every crop placement.
VolumeGrid build_grid(Dims3 volume_dims, int cells_x, int cells_y, Dims3 min_crop);

// Cells whose xy-footprint overlaps the crop (z ignored by construction).
IntersectionSet intersect(const VolumeGrid& grid, const CropSpec& crop);

WindowPartition make_window_partition(Dims3 crop_size, Dims3 window_size);

// Permutation taking voxel-order rows to window-major rows (window index
// lexicographic in (wx,wy,wz), voxels within a window lexicographic too).
std::vector<int> window_permutation(const WindowPartition& part);
std::vector<int> inverse_permutation(const std::vector<int>& perm);

// [Px,Py,Pz,c] -> [N, N_u, c] and back; merge(split(x)) is bit-exact.
Tensor window_split(const Tensor& crop_tensor, Dims3 window_size);
Tensor window_merge(const Tensor& windows, Dims3 crop_size, Dims3 window_size);

// Uniform crop origin over all valid placements.
CropSpec sample_crop(Dims3 volume_dims, Dims3 crop_size, Rng& rng);

// Row indices (into a [rows*8, c] gather source) regrouping 2x2x2 voxel
// blocks for strided down/up-sampling, offsets lexicographic in (dx,dy,dz).
// downsample: for each coarse voxel, its 8 fine source rows.
std::vector<int> downsample_gather_indices(Dims3 fine_dims);
// upsample: for each fine voxel, the row holding it in the [coarse*8] layout.
std::vector<int> upsample_gather_indices(Dims3 fine_dims);

// Index map for the learned relative-position bias of window attention over
// a (N_u + n_mem)-token sequence: visual pairs index a (2Wx-1)(2Wy-1)(2Wz-1)
// table by relative offset; pairs involving memory tokens share three extra
// rows (visual->memory, memory->visual, memory->memory) appended at the end.
struct RelBiasLayout {
    int table_rows = 0; // relative entries + 3 memory rows
    int seq_len = 0;
    std::vector<int> index_map; // seq_len * seq_len entries
};
RelBiasLayout relative_bias_layout(Dims3 window_size, int n_mem);

} // namespace fine
