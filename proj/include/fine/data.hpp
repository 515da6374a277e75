#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fine/config.hpp"
#include "fine/geometry.hpp"
#include "fine/rng.hpp"

namespace fine {

// Label codes of the synthetic task.
inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelDependentA = 1; // dependent blob when the marker is variant A
inline constexpr std::uint8_t kLabelDependentB = 2; // dependent blob when the marker is variant B
inline constexpr std::uint8_t kLabelMarker = 3;

struct SyntheticSpec {
    Dims3 volume_dims{48, 48, 24};
    int classes = 4;
    int grid_cells_x = 3;
    int grid_cells_y = 3;
    Dims3 crop_size{16, 16, 16}; // grid constraint only
    int distractor_min = 2;
    int distractor_max = 4;
    int blob_radius_min = 3;
    int blob_radius_max = 5;
    int marker_min_cell_dist = 2;
    double noise_sigma = 0.1;

    // Intensity palette. The dependent blob keeps one intensity in both
    // variants; only the distant marker blob distinguishes them, so no
    // window that excludes the marker can identify the dependent class.
    static constexpr double kBackgroundIntensity = 0.0;
    static constexpr double kDistractorIntensity = 0.15;
    static constexpr double kMarkerAIntensity = 0.35;
    static constexpr double kDependentIntensity = 0.55;
    static constexpr double kMarkerBIntensity = 0.80;

    static SyntheticSpec from_config(const RunConfig& cfg);
};

struct Volume {
    Dims3 dims;          // stored (possibly padded) extents
    Dims3 original_dims; // extents before padding; metrics use these
    std::vector<float> intensity;   // dims.voxels() values
    std::vector<std::uint8_t> labels;
};

struct GeneratedMeta {
    int dependent_cell = -1;
    int marker_cell = -1;
    int variant = 0; // 0 -> marker A / label kLabelDependentA, 1 -> B
    Dims3 dependent_center{};
    Dims3 marker_center{};
};

// Deterministic per seed. variant_override forces the marker variant while
// keeping every placement and the noise field identical, which is what the
// per-window ambiguity argument rests on.
Volume generate(const SyntheticSpec& spec, std::uint64_t seed, int variant_override = -1,
                GeneratedMeta* meta = nullptr);

// ---- volume container (FVOL) ----
// magic "FVOL0001", u32 version, u32 dims x/y/z, u8 dtype (0 = f32 volume,
// 1 = u8 labels), 3x u32 reserved slots holding the pre-padding dims,
// payload row-major little-endian.

void write_fvol_intensity(const std::string& path, const Volume& v);
void write_fvol_labels(const std::string& path, const Volume& v);
Volume load_volume_pair(const std::string& intensity_path, const std::string& labels_path);
// Intensity-only load; labels are zero-filled.
Volume load_intensity(const std::string& path);

// Pads stored extents up to multiples of `window` (zero fill), recording
// the original extents.
Volume pad_to_window(Volume v, Dims3 window);

// ---- metrics ----

// 2|A∩B| / (|A|+|B|); both masks empty -> 1.0, exactly one empty -> 0.0.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
            std::uint8_t cls);

// 95th percentile (linear interpolation) of the pooled directed surface
// distances, Euclidean with anisotropic spacing, 6-connectivity boundaries.
// Returns +inf when either mask has no voxels.
double hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
            std::uint8_t cls, Dims3 dims, double sx = 1.0, double sy = 1.0, double sz = 1.0);

struct MetricReport {
    std::vector<double> dice_per_class; // index = class
    std::vector<double> hd95_per_class; // +inf marks "undefined"
    double mean_dice = 0.0;
    double mean_hd95 = 0.0; // over defined entries
    int defined_hd95 = 0;
};

MetricReport evaluate_labels(const std::vector<std::uint8_t>& pred,
                             const std::vector<std::uint8_t>& truth, int classes, Dims3 dims);

// Exact squared Euclidean distance transform (per-axis parabola scan) to the
// `true` voxels of the feature mask. Distances use the given spacing.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& feature, Dims3 dims, double sx,
                                double sy, double sz);

// Boundary voxels of a mask under 6-connectivity (out-of-volume counts as
// background).
std::vector<std::uint8_t> surface_voxels(const std::vector<std::uint8_t>& mask, Dims3 dims);

double percentile_interpolated(std::vector<double> values, double q);

} // namespace fine
