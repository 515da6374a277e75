#include "fine/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "fine/serialize.hpp"

namespace fine {

SyntheticSpec SyntheticSpec::from_config(const RunConfig& cfg) {
    SyntheticSpec s;
    s.volume_dims = cfg.volume_dims;
    s.classes = cfg.classes;
    s.grid_cells_x = cfg.grid_cells_x;
    s.grid_cells_y = cfg.grid_cells_y;
    s.crop_size = cfg.crop_size;
    s.distractor_min = cfg.distractor_min;
    s.distractor_max = cfg.distractor_max;
    s.blob_radius_min = cfg.blob_radius_min;
    s.blob_radius_max = cfg.blob_radius_max;
    s.marker_min_cell_dist = cfg.marker_min_cell_dist;
    s.noise_sigma = cfg.noise_sigma;
    return s;
}

namespace {

struct Blob {
    Dims3 center;
    Dims3 radius;
};

void paint(Volume& v, const Blob& b, double intensity, std::uint8_t label) {
    const Dims3& d = v.dims;
    const int x0 = std::max(0, b.center.x - b.radius.x), x1 = std::min(d.x - 1, b.center.x + b.radius.x);
    const int y0 = std::max(0, b.center.y - b.radius.y), y1 = std::min(d.y - 1, b.center.y + b.radius.y);
    const int z0 = std::max(0, b.center.z - b.radius.z), z1 = std::min(d.z - 1, b.center.z + b.radius.z);
    for (int x = x0; x <= x1; ++x)
        for (int y = y0; y <= y1; ++y)
            for (int z = z0; z <= z1; ++z) {
                const double fx = static_cast<double>(x - b.center.x) / b.radius.x;
                const double fy = static_cast<double>(y - b.center.y) / b.radius.y;
                const double fz = static_cast<double>(z - b.center.z) / b.radius.z;
                if (fx * fx + fy * fy + fz * fz > 1.0) continue;
                const std::size_t idx = static_cast<std::size_t>(voxel_index(d, x, y, z));
                v.intensity[idx] = static_cast<float>(intensity);
                v.labels[idx] = label;
            }
}

// Center placed so the whole blob stays inside the cell's xy footprint and
// the volume's z extent.
Blob place_in_cell(const VolumeGrid& grid, int cx, int cy, Dims3 radius, Rng& rng) {
    const int cell_x0 = cx * grid.cell_size_x;
    const int cell_x1 = std::min((cx + 1) * grid.cell_size_x, grid.volume_dims.x) - 1;
    const int cell_y0 = cy * grid.cell_size_y;
    const int cell_y1 = std::min((cy + 1) * grid.cell_size_y, grid.volume_dims.y) - 1;
    const int lo_x = cell_x0 + radius.x, hi_x = cell_x1 - radius.x;
    const int lo_y = cell_y0 + radius.y, hi_y = cell_y1 - radius.y;
    const int lo_z = radius.z, hi_z = grid.volume_dims.z - 1 - radius.z;
    if (lo_x > hi_x || lo_y > hi_y || lo_z > hi_z)
        throw DataError("synthetic generation: blob radius " + radius.str() +
                        " does not fit inside a grid cell; shrink synth.blob_radius");
    Blob b;
    b.radius = radius;
    b.center = Dims3{rng.range_int(lo_x, hi_x), rng.range_int(lo_y, hi_y), rng.range_int(lo_z, hi_z)};
    return b;
}

Dims3 draw_radius(const SyntheticSpec& spec, Rng& rng) {
    return Dims3{rng.range_int(spec.blob_radius_min, spec.blob_radius_max),
                 rng.range_int(spec.blob_radius_min, spec.blob_radius_max),
                 rng.range_int(spec.blob_radius_min, spec.blob_radius_max)};
}

} // namespace

Volume generate(const SyntheticSpec& spec, std::uint64_t seed, int variant_override,
                GeneratedMeta* meta) {
    if (spec.classes < 4)
        throw ConfigError("synthetic task needs at least 4 classes (background, two dependent "
                          "classes, marker)");
    const VolumeGrid grid =
        build_grid(spec.volume_dims, spec.grid_cells_x, spec.grid_cells_y, spec.crop_size);

    // Placement, noise and the variant coin use separate streams so that
    // forcing the variant leaves everything else untouched.
    Rng place_rng(seed * 0x9e3779b97f4a7c15ULL + 1);
    Rng noise_rng(seed * 0x9e3779b97f4a7c15ULL + 2);
    Rng variant_rng(seed * 0x9e3779b97f4a7c15ULL + 3);

    Volume v;
    v.dims = spec.volume_dims;
    v.original_dims = spec.volume_dims;
    v.intensity.assign(static_cast<std::size_t>(v.dims.voxels()),
                       static_cast<float>(SyntheticSpec::kBackgroundIntensity));
    v.labels.assign(static_cast<std::size_t>(v.dims.voxels()), kLabelBackground);

    // Distractors first; the marker and the dependent blob overwrite them.
    const int n_distract = place_rng.range_int(spec.distractor_min, spec.distractor_max);
    for (int i = 0; i < n_distract; ++i) {
        const Dims3 r = draw_radius(spec, place_rng);
        const int cx = place_rng.range_int(0, grid.cells_x - 1);
        const int cy = place_rng.range_int(0, grid.cells_y - 1);
        paint(v, place_in_cell(grid, cx, cy, r, place_rng), SyntheticSpec::kDistractorIntensity,
              kLabelBackground);
    }

    // The dependent blob may only land in cells that still leave room for a
    // marker at the required distance (the center of a 3x3 grid does not).
    std::vector<std::pair<int, int>> dep_cells;
    for (int cx = 0; cx < grid.cells_x; ++cx)
        for (int cy = 0; cy < grid.cells_y; ++cy) {
            const int reach = std::max({cx, grid.cells_x - 1 - cx, cy, grid.cells_y - 1 - cy});
            if (reach >= spec.marker_min_cell_dist) dep_cells.emplace_back(cx, cy);
        }
    if (dep_cells.empty())
        throw DataError("synthetic generation: no pair of grid cells is " +
                        std::to_string(spec.marker_min_cell_dist) +
                        " cells apart; enlarge grid.cells or lower synth.marker_min_cell_dist");
    const auto [dep_cx, dep_cy] =
        dep_cells[static_cast<std::size_t>(place_rng.below(dep_cells.size()))];
    std::vector<std::pair<int, int>> marker_cells;
    for (int cx = 0; cx < grid.cells_x; ++cx)
        for (int cy = 0; cy < grid.cells_y; ++cy)
            if (std::max(std::abs(cx - dep_cx), std::abs(cy - dep_cy)) >= spec.marker_min_cell_dist)
                marker_cells.emplace_back(cx, cy);
    const auto [mk_cx, mk_cy] =
        marker_cells[static_cast<std::size_t>(place_rng.below(marker_cells.size()))];

    const Blob dependent = place_in_cell(grid, dep_cx, dep_cy, draw_radius(spec, place_rng), place_rng);
    const Blob marker = place_in_cell(grid, mk_cx, mk_cy, draw_radius(spec, place_rng), place_rng);

    int variant = static_cast<int>(variant_rng.below(2));
    if (variant_override >= 0) variant = variant_override;

    paint(v, marker,
          variant == 0 ? SyntheticSpec::kMarkerAIntensity : SyntheticSpec::kMarkerBIntensity,
          kLabelMarker);
    paint(v, dependent, SyntheticSpec::kDependentIntensity,
          variant == 0 ? kLabelDependentA : kLabelDependentB);

    if (spec.noise_sigma > 0.0)
        for (float& x : v.intensity)
            x = static_cast<float>(x + spec.noise_sigma * noise_rng.gaussian());

    if (meta) {
        meta->dependent_cell = grid.cell_index(dep_cx, dep_cy);
        meta->marker_cell = grid.cell_index(mk_cx, mk_cy);
        meta->variant = variant;
        meta->dependent_center = dependent.center;
        meta->marker_center = marker.center;
    }
    return v;
}

// ---- FVOL container ----

namespace {

constexpr char kFvolMagic[8] = {'F', 'V', 'O', 'L', '0', '0', '0', '1'};
constexpr std::uint32_t kFvolVersion = 1;

void write_fvol_header(std::ostream& os, const Volume& v, std::uint8_t dtype) {
    write_bytes(os, kFvolMagic, sizeof(kFvolMagic));
    write_u32(os, kFvolVersion);
    write_u32(os, static_cast<std::uint32_t>(v.dims.x));
    write_u32(os, static_cast<std::uint32_t>(v.dims.y));
    write_u32(os, static_cast<std::uint32_t>(v.dims.z));
    write_u8(os, dtype);
    write_u32(os, static_cast<std::uint32_t>(v.original_dims.x));
    write_u32(os, static_cast<std::uint32_t>(v.original_dims.y));
    write_u32(os, static_cast<std::uint32_t>(v.original_dims.z));
}

struct FvolData {
    Dims3 dims;
    Dims3 original_dims;
    std::uint8_t dtype = 0;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;
};

FvolData read_fvol(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open volume file '" + path + "'");
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::string(magic, 8) != std::string(kFvolMagic, 8))
        throw FormatError("'" + path + "': bad magic, not an FVOL file");
    const std::uint32_t version = read_u32(is);
    if (version != kFvolVersion)
        throw FormatError("'" + path + "': unsupported FVOL version " + std::to_string(version));
    FvolData d;
    d.dims.x = static_cast<int>(read_u32(is));
    d.dims.y = static_cast<int>(read_u32(is));
    d.dims.z = static_cast<int>(read_u32(is));
    d.dtype = read_u8(is);
    d.original_dims.x = static_cast<int>(read_u32(is));
    d.original_dims.y = static_cast<int>(read_u32(is));
    d.original_dims.z = static_cast<int>(read_u32(is));
    if (d.dims.x <= 0 || d.dims.y <= 0 || d.dims.z <= 0 || d.original_dims.x <= 0 ||
        d.original_dims.y <= 0 || d.original_dims.z <= 0 || d.original_dims.x > d.dims.x ||
        d.original_dims.y > d.dims.y || d.original_dims.z > d.dims.z)
        throw FormatError("'" + path + "': invalid extents in header");
    const std::size_t n = static_cast<std::size_t>(d.dims.voxels());
    if (d.dtype == 0) {
        d.f32.resize(n);
        read_bytes(is, d.f32.data(), n * sizeof(float));
    } else if (d.dtype == 1) {
        d.u8.resize(n);
        read_bytes(is, d.u8.data(), n);
    } else {
        throw FormatError("'" + path + "': unknown dtype code " + std::to_string(d.dtype));
    }
    // A well-formed file ends exactly after the payload.
    char extra;
    is.read(&extra, 1);
    if (is.gcount() != 0)
        throw FormatError("'" + path + "': trailing bytes after payload");
    return d;
}

} // namespace

void write_fvol_intensity(const std::string& path, const Volume& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    write_fvol_header(os, v, 0);
    write_bytes(os, v.intensity.data(), v.intensity.size() * sizeof(float));
}

void write_fvol_labels(const std::string& path, const Volume& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    write_fvol_header(os, v, 1);
    write_bytes(os, v.labels.data(), v.labels.size());
}

Volume load_volume_pair(const std::string& intensity_path, const std::string& labels_path) {
    FvolData vi = read_fvol(intensity_path);
    FvolData vl = read_fvol(labels_path);
    if (vi.dtype != 0) throw FormatError("'" + intensity_path + "': expected f32 payload");
    if (vl.dtype != 1) throw FormatError("'" + labels_path + "': expected u8 label payload");
    if (!(vi.dims == vl.dims))
        throw FormatError("volume/label extents disagree: " + vi.dims.str() + " vs " +
                          vl.dims.str());
    Volume v;
    v.dims = vi.dims;
    v.original_dims = vi.original_dims;
    v.intensity = std::move(vi.f32);
    v.labels = std::move(vl.u8);
    return v;
}

Volume load_intensity(const std::string& path) {
    FvolData vi = read_fvol(path);
    if (vi.dtype != 0) throw FormatError("'" + path + "': expected f32 payload");
    Volume v;
    v.dims = vi.dims;
    v.original_dims = vi.original_dims;
    v.intensity = std::move(vi.f32);
    v.labels.assign(static_cast<std::size_t>(v.dims.voxels()), 0);
    return v;
}

Volume pad_to_window(Volume v, Dims3 window) {
    const auto round_up = [](int n, int m) { return ((n + m - 1) / m) * m; };
    const Dims3 padded{round_up(v.dims.x, window.x), round_up(v.dims.y, window.y),
                       round_up(v.dims.z, window.z)};
    if (padded == v.dims) return v;
    Volume out;
    out.dims = padded;
    out.original_dims = v.original_dims;
    out.intensity.assign(static_cast<std::size_t>(padded.voxels()), 0.0f);
    out.labels.assign(static_cast<std::size_t>(padded.voxels()), 0);
    for (int x = 0; x < v.dims.x; ++x)
        for (int y = 0; y < v.dims.y; ++y)
            for (int z = 0; z < v.dims.z; ++z) {
                const std::size_t src = static_cast<std::size_t>(voxel_index(v.dims, x, y, z));
                const std::size_t dst = static_cast<std::size_t>(voxel_index(padded, x, y, z));
                out.intensity[dst] = v.intensity[src];
                out.labels[dst] = v.labels[src];
            }
    return out;
}

// ---- metrics ----

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
            std::uint8_t cls) {
    if (pred.size() != truth.size())
        throw DimensionError("dice: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                             std::to_string(truth.size()) + ")");
    std::size_t a = 0, b = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool pa = pred[i] == cls, pb = truth[i] == cls;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a == 0 && b == 0) return 1.0;
    if (a == 0 || b == 0) return 0.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<std::uint8_t> surface_voxels(const std::vector<std::uint8_t>& mask, Dims3 dims) {
    std::vector<std::uint8_t> surf(mask.size(), 0);
    for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y)
            for (int z = 0; z < dims.z; ++z) {
                const std::size_t idx = static_cast<std::size_t>(voxel_index(dims, x, y, z));
                if (!mask[idx]) continue;
                const bool boundary =
                    x == 0 || !mask[static_cast<std::size_t>(voxel_index(dims, x - 1, y, z))] ||
                    x == dims.x - 1 || !mask[static_cast<std::size_t>(voxel_index(dims, x + 1, y, z))] ||
                    y == 0 || !mask[static_cast<std::size_t>(voxel_index(dims, x, y - 1, z))] ||
                    y == dims.y - 1 || !mask[static_cast<std::size_t>(voxel_index(dims, x, y + 1, z))] ||
                    z == 0 || !mask[static_cast<std::size_t>(voxel_index(dims, x, y, z - 1))] ||
                    z == dims.z - 1 || !mask[static_cast<std::size_t>(voxel_index(dims, x, y, z + 1))];
                if (boundary) surf[idx] = 1;
            }
    return surf;
}

namespace {

// One pass of the parabola-envelope scan along a line with sample step `w`.
void edt_1d(const double* f, double* d, int n, double w, std::vector<int>& v,
            std::vector<double>& z) {
    const double inf = std::numeric_limits<double>::infinity();
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    const double w2 = w * w;
    for (int q = 1; q < n; ++q) {
        if (f[q] == inf) continue;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            if (f[p] == inf) {
                // replace the placeholder parabola entirely
                if (k == 0) {
                    v[0] = q;
                    z[0] = -inf;
                    z[1] = inf;
                    break;
                }
                --k;
                continue;
            }
            const double s =
                (f[q] + w2 * q * q - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
                continue;
            }
            ++k;
            v[static_cast<std::size_t>(k)] = q;
            z[static_cast<std::size_t>(k)] = s;
            z[static_cast<std::size_t>(k) + 1] = inf;
            break;
        }
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const int p = v[static_cast<std::size_t>(k)];
        d[q] = f[p] == inf ? inf : w2 * (q - p) * (q - p) + f[p];
    }
}

} // namespace

std::vector<double> squared_edt(const std::vector<std::uint8_t>& feature, Dims3 dims, double sx,
                                double sy, double sz) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dist(feature.size());
    for (std::size_t i = 0; i < feature.size(); ++i) dist[i] = feature[i] ? 0.0 : inf;

    std::vector<int> v;
    std::vector<double> z, line, out;

    // z axis (contiguous)
    line.resize(static_cast<std::size_t>(dims.z));
    out.resize(static_cast<std::size_t>(dims.z));
    for (int x = 0; x < dims.x; ++x)
        for (int y = 0; y < dims.y; ++y) {
            const std::size_t base = static_cast<std::size_t>(voxel_index(dims, x, y, 0));
            for (int zz = 0; zz < dims.z; ++zz) line[static_cast<std::size_t>(zz)] = dist[base + static_cast<std::size_t>(zz)];
            edt_1d(line.data(), out.data(), dims.z, sz, v, z);
            for (int zz = 0; zz < dims.z; ++zz) dist[base + static_cast<std::size_t>(zz)] = out[static_cast<std::size_t>(zz)];
        }

    // y axis
    line.resize(static_cast<std::size_t>(dims.y));
    out.resize(static_cast<std::size_t>(dims.y));
    for (int x = 0; x < dims.x; ++x)
        for (int zz = 0; zz < dims.z; ++zz) {
            for (int y = 0; y < dims.y; ++y)
                line[static_cast<std::size_t>(y)] = dist[static_cast<std::size_t>(voxel_index(dims, x, y, zz))];
            edt_1d(line.data(), out.data(), dims.y, sy, v, z);
            for (int y = 0; y < dims.y; ++y)
                dist[static_cast<std::size_t>(voxel_index(dims, x, y, zz))] = out[static_cast<std::size_t>(y)];
        }

    // x axis
    line.resize(static_cast<std::size_t>(dims.x));
    out.resize(static_cast<std::size_t>(dims.x));
    for (int y = 0; y < dims.y; ++y)
        for (int zz = 0; zz < dims.z; ++zz) {
            for (int x = 0; x < dims.x; ++x)
                line[static_cast<std::size_t>(x)] = dist[static_cast<std::size_t>(voxel_index(dims, x, y, zz))];
            edt_1d(line.data(), out.data(), dims.x, sx, v, z);
            for (int x = 0; x < dims.x; ++x)
                dist[static_cast<std::size_t>(voxel_index(dims, x, y, zz))] = out[static_cast<std::size_t>(x)];
        }
    return dist;
}

double percentile_interpolated(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

double hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
            std::uint8_t cls, Dims3 dims, double sx, double sy, double sz) {
    if (pred.size() != truth.size() ||
        pred.size() != static_cast<std::size_t>(dims.voxels()))
        throw DimensionError("hd95: mask sizes do not match dims " + dims.str());
    std::vector<std::uint8_t> a(pred.size()), b(pred.size());
    bool any_a = false, any_b = false;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        a[i] = pred[i] == cls;
        b[i] = truth[i] == cls;
        any_a |= a[i];
        any_b |= b[i];
    }
    if (!any_a || !any_b) return std::numeric_limits<double>::infinity();

    const std::vector<std::uint8_t> sa = surface_voxels(a, dims);
    const std::vector<std::uint8_t> sb = surface_voxels(b, dims);
    const std::vector<double> to_b = squared_edt(sb, dims, sx, sy, sz);
    const std::vector<double> to_a = squared_edt(sa, dims, sx, sy, sz);

    std::vector<double> pooled;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i]) pooled.push_back(std::sqrt(to_b[i]));
        if (sb[i]) pooled.push_back(std::sqrt(to_a[i]));
    }
    return percentile_interpolated(std::move(pooled), 0.95);
}

MetricReport evaluate_labels(const std::vector<std::uint8_t>& pred,
                             const std::vector<std::uint8_t>& truth, int classes, Dims3 dims) {
    MetricReport r;
    r.dice_per_class.resize(static_cast<std::size_t>(classes));
    r.hd95_per_class.resize(static_cast<std::size_t>(classes));
    double dice_sum = 0.0, hd_sum = 0.0;
    for (int k = 0; k < classes; ++k) {
        const double dk = dice(pred, truth, static_cast<std::uint8_t>(k));
        const double hk = hd95(pred, truth, static_cast<std::uint8_t>(k), dims);
        r.dice_per_class[static_cast<std::size_t>(k)] = dk;
        r.hd95_per_class[static_cast<std::size_t>(k)] = hk;
        dice_sum += dk;
        if (std::isfinite(hk)) {
            hd_sum += hk;
            ++r.defined_hd95;
        }
    }
    r.mean_dice = dice_sum / classes;
    r.mean_hd95 = r.defined_hd95 ? hd_sum / r.defined_hd95 : std::numeric_limits<double>::infinity();
    return r;
}

} // namespace fine
