#include "fine/geometry.hpp"

#include <algorithm>
#include <sstream>

namespace fine {

std::string Dims3::str() const {
    std::ostringstream os;
    os << "(" << x << "," << y << "," << z << ")";
    return os.str();
}

int VolumeGrid::cell_of_voxel(int x, int y) const {
    const int cx = std::min(x / cell_size_x, cells_x - 1);
    const int cy = std::min(y / cell_size_y, cells_y - 1);
    return cell_index(cx, cy);
}

VolumeGrid build_grid(Dims3 volume_dims, int cells_x, int cells_y, Dims3 min_crop) {
    if (volume_dims.x <= 0 || volume_dims.y <= 0 || volume_dims.z <= 0)
        throw ConfigError("build_grid: volume dims must be positive, got " + volume_dims.str());
    if (cells_x < 1 || cells_y < 1)
        throw ConfigError("build_grid: cell counts must be >= 1");
    VolumeGrid g;
    g.volume_dims = volume_dims;
    g.cells_x = cells_x;
    g.cells_y = cells_y;
    g.cell_size_x = (volume_dims.x + cells_x - 1) / cells_x;
    g.cell_size_y = (volume_dims.y + cells_y - 1) / cells_y;
    // A crop larger than a cell could straddle two boundaries on one axis,
    // breaking the at-most-4 intersecting-cells bound the attention relies on.
    if (g.cell_size_x < min_crop.x || g.cell_size_y < min_crop.y) {
        std::ostringstream os;
        os << "build_grid: cell size (" << g.cell_size_x << "," << g.cell_size_y
           << ") is smaller than the crop footprint (" << min_crop.x << "," << min_crop.y
           << "); a crop may then intersect more than 4 cells. Use fewer cells or a"
              " smaller crop.";
        throw ConfigError(os.str());
    }
    return g;
}

IntersectionSet intersect(const VolumeGrid& grid, const CropSpec& crop) {
    if (crop.origin.x < 0 || crop.origin.y < 0 || crop.origin.z < 0 ||
        crop.origin.x + crop.size.x > grid.volume_dims.x ||
        crop.origin.y + crop.size.y > grid.volume_dims.y ||
        crop.origin.z + crop.size.z > grid.volume_dims.z)
        throw BoundsError("intersect: crop at " + crop.origin.str() + " size " +
                          crop.size.str() + " is outside volume " + grid.volume_dims.str());
    const int cx0 = std::min(crop.origin.x / grid.cell_size_x, grid.cells_x - 1);
    const int cx1 = std::min((crop.origin.x + crop.size.x - 1) / grid.cell_size_x, grid.cells_x - 1);
    const int cy0 = std::min(crop.origin.y / grid.cell_size_y, grid.cells_y - 1);
    const int cy1 = std::min((crop.origin.y + crop.size.y - 1) / grid.cell_size_y, grid.cells_y - 1);
    IntersectionSet set;
    for (int cx = cx0; cx <= cx1; ++cx)
        for (int cy = cy0; cy <= cy1; ++cy)
            set.cells.push_back(grid.cell_index(cx, cy));
    std::sort(set.cells.begin(), set.cells.end());
    return set;
}

WindowPartition make_window_partition(Dims3 crop_size, Dims3 window_size) {
    if (window_size.x <= 0 || window_size.y <= 0 || window_size.z <= 0)
        throw DimensionError("window size must be positive, got " + window_size.str());
    if (crop_size.x % window_size.x || crop_size.y % window_size.y || crop_size.z % window_size.z)
        throw DimensionError("crop " + crop_size.str() + " is not divisible by window " +
                             window_size.str());
    WindowPartition p;
    p.crop_size = crop_size;
    p.window_size = window_size;
    p.window_grid = Dims3{crop_size.x / window_size.x, crop_size.y / window_size.y,
                          crop_size.z / window_size.z};
    p.window_count = p.window_grid.x * p.window_grid.y * p.window_grid.z;
    p.window_voxels = window_size.x * window_size.y * window_size.z;
    return p;
}

std::vector<int> window_permutation(const WindowPartition& p) {
    std::vector<int> perm(static_cast<std::size_t>(p.window_count) * p.window_voxels);
    std::size_t out = 0;
    for (int wx = 0; wx < p.window_grid.x; ++wx)
        for (int wy = 0; wy < p.window_grid.y; ++wy)
            for (int wz = 0; wz < p.window_grid.z; ++wz)
                for (int lx = 0; lx < p.window_size.x; ++lx)
                    for (int ly = 0; ly < p.window_size.y; ++ly)
                        for (int lz = 0; lz < p.window_size.z; ++lz)
                            perm[out++] = static_cast<int>(
                                voxel_index(p.crop_size, wx * p.window_size.x + lx,
                                            wy * p.window_size.y + ly,
                                            wz * p.window_size.z + lz));
    return perm;
}

std::vector<int> inverse_permutation(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

Tensor window_split(const Tensor& crop_tensor, Dims3 window_size) {
    if (crop_tensor.rank() != 4)
        throw DimensionError("window_split expects [Px,Py,Pz,c], got " +
                             shape_str(crop_tensor.shape()));
    const Dims3 crop{crop_tensor.dim(0), crop_tensor.dim(1), crop_tensor.dim(2)};
    const int c = crop_tensor.dim(3);
    const WindowPartition p = make_window_partition(crop, window_size);
    const Tensor flat = reshape(crop_tensor, {static_cast<int>(crop.voxels()), c});
    const Tensor reordered = gather_rows(flat, window_permutation(p));
    return reshape(reordered, {p.window_count, p.window_voxels, c});
}

Tensor window_merge(const Tensor& windows, Dims3 crop_size, Dims3 window_size) {
    if (windows.rank() != 3)
        throw DimensionError("window_merge expects [N,N_u,c], got " + shape_str(windows.shape()));
    const WindowPartition p = make_window_partition(crop_size, window_size);
    if (windows.dim(0) != p.window_count || windows.dim(1) != p.window_voxels)
        throw DimensionError("window_merge: " + shape_str(windows.shape()) +
                             " does not match crop " + crop_size.str() + " / window " +
                             window_size.str());
    const int c = windows.dim(2);
    const Tensor flat = reshape(windows, {static_cast<int>(crop_size.voxels()), c});
    const Tensor reordered = gather_rows(flat, inverse_permutation(window_permutation(p)));
    return reshape(reordered, {crop_size.x, crop_size.y, crop_size.z, c});
}

CropSpec sample_crop(Dims3 volume_dims, Dims3 crop_size, Rng& rng) {
    if (crop_size.x > volume_dims.x || crop_size.y > volume_dims.y ||
        crop_size.z > volume_dims.z)
        throw ConfigError("sample_crop: crop " + crop_size.str() + " exceeds volume " +
                          volume_dims.str());
    CropSpec crop;
    crop.size = crop_size;
    crop.origin.x = static_cast<int>(rng.below(static_cast<std::uint64_t>(volume_dims.x - crop_size.x) + 1));
    crop.origin.y = static_cast<int>(rng.below(static_cast<std::uint64_t>(volume_dims.y - crop_size.y) + 1));
    crop.origin.z = static_cast<int>(rng.below(static_cast<std::uint64_t>(volume_dims.z - crop_size.z) + 1));
    return crop;
}

std::vector<int> downsample_gather_indices(Dims3 fine) {
    if (fine.x % 2 || fine.y % 2 || fine.z % 2)
        throw DimensionError("downsample requires even dims, got " + fine.str());
    const Dims3 coarse{fine.x / 2, fine.y / 2, fine.z / 2};
    std::vector<int> idx(static_cast<std::size_t>(coarse.voxels()) * 8);
    std::size_t out = 0;
    for (int x = 0; x < coarse.x; ++x)
        for (int y = 0; y < coarse.y; ++y)
            for (int z = 0; z < coarse.z; ++z)
                for (int dx = 0; dx < 2; ++dx)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dz = 0; dz < 2; ++dz)
                            idx[out++] = static_cast<int>(
                                voxel_index(fine, 2 * x + dx, 2 * y + dy, 2 * z + dz));
    return idx;
}

std::vector<int> upsample_gather_indices(Dims3 fine) {
    // Inverse view of downsample_gather_indices: row j of the [coarse*8, c]
    // expansion holds fine voxel downsample_gather_indices(fine)[j].
    const std::vector<int> down = downsample_gather_indices(fine);
    return inverse_permutation(down);
}

RelBiasLayout relative_bias_layout(Dims3 w, int n_mem) {
    RelBiasLayout layout;
    const int rx = 2 * w.x - 1, ry = 2 * w.y - 1, rz = 2 * w.z - 1;
    const int rel_entries = rx * ry * rz;
    layout.table_rows = rel_entries + 3;
    const int n_u = w.x * w.y * w.z;
    const int L = n_u + n_mem;
    layout.seq_len = L;
    layout.index_map.resize(static_cast<std::size_t>(L) * L);

    std::vector<int> px(static_cast<std::size_t>(n_u)), py(px), pz(px);
    int v = 0;
    for (int x = 0; x < w.x; ++x)
        for (int y = 0; y < w.y; ++y)
            for (int z = 0; z < w.z; ++z) {
                px[static_cast<std::size_t>(v)] = x;
                py[static_cast<std::size_t>(v)] = y;
                pz[static_cast<std::size_t>(v)] = z;
                ++v;
            }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            int entry;
            if (i < n_u && j < n_u) {
                const int dx = px[static_cast<std::size_t>(i)] - px[static_cast<std::size_t>(j)] + w.x - 1;
                const int dy = py[static_cast<std::size_t>(i)] - py[static_cast<std::size_t>(j)] + w.y - 1;
                const int dz = pz[static_cast<std::size_t>(i)] - pz[static_cast<std::size_t>(j)] + w.z - 1;
                entry = (dx * ry + dy) * rz + dz;
            } else if (i < n_u) {
                entry = rel_entries; // visual query, memory key
            } else if (j < n_u) {
                entry = rel_entries + 1; // memory query, visual key
            } else {
                entry = rel_entries + 2; // memory pair
            }
            layout.index_map[static_cast<std::size_t>(i) * L + j] = entry;
        }
    return layout;
}

} // namespace fine
