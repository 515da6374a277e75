#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fine/attention.hpp"
#include "fine/config.hpp"
#include "fine/data.hpp"
#include "fine/geometry.hpp"
#include "fine/memory_bank.hpp"
#include "fine/param_store.hpp"

namespace fine {

BlockMode block_mode_from_ablate(const std::string& ablate);

// Volume-token banks for one volume: one bank per memory stage (stages can
// have different embedding widths).
struct VolumeBanks {
    std::vector<MemoryBank> per_stage; // aligned with SegModel::memory_stage_indices()
};
using BankMap = std::map<std::string, VolumeBanks>;

struct LevelLogits {
    Dims3 dims;    // spatial extents of this level
    Tensor logits; // [dims.voxels(), classes]
};

struct ForwardResult {
    std::vector<LevelLogits> levels; // level 0 is full crop resolution
    std::vector<Tensor> bound_bank_tokens; // tape views, aligned with memory stages
};

// U-shaped encoder/decoder over one crop. Downsampling regroups 2x2x2 voxel
// blocks through a linear map; every stage runs windowed transformer blocks,
// and the configured memory stages run full FINE blocks against the bank.
class SegModel {
public:
    explicit SegModel(const RunConfig& cfg);

    const RunConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const VolumeGrid& grid() const { return grid_; }
    BlockMode memory_mode() const { return mode_; }
    const std::vector<int>& memory_stage_indices() const { return memory_stages_; }
    int memory_stage_channels(int i) const;

    VolumeBanks make_banks(const std::string& volume_id) const;

    Dims3 stage_res(int enc_index) const { return encoder_[static_cast<std::size_t>(enc_index)].res; }
    const WindowPartition& stage_partition(int enc_index) const {
        return encoder_[static_cast<std::size_t>(enc_index)].part;
    }

    // crop_feat: [crop voxels, 1] intensity tensor (bound to the tape by the
    // caller if input gradients are wanted). banks may be nullptr when the
    // model has no memory stages.
    ForwardResult forward(Binding& binding, const Tensor& crop_feat, const CropSpec& crop,
                          VolumeBanks* banks, FineBlockCapture* capture = nullptr,
                          int capture_memory_stage = 0) const;

    // Number of deep-supervision levels this configuration produces.
    int level_count() const;
    Dims3 level_dims(int level) const;

private:
    struct BlockLayer {
        FineBlockIds ids;
        FineBlockConfig cfg;
        const RelBiasLayout* layout = nullptr;
    };
    struct EncStage {
        int dim = 0;
        Dims3 res;
        WindowPartition part;
        std::vector<int> perm, inv_perm;
        std::vector<int> down_gather; // nonempty when this stage halves resolution
        int in_w = -1, in_b = -1;     // stem / downsample / transition projection
        int wt_embed = -1;            // window-token embedding (memory stages)
        bool is_memory = false;
        int memory_index = -1; // index into banks.per_stage
        std::vector<BlockLayer> blocks;
    };
    struct DecStage {
        int enc_index = 0; // encoder stage this mirrors
        int dim = 0;
        Dims3 res;
        WindowPartition part;
        std::vector<int> perm, inv_perm;
        std::vector<int> up_gather; // nonempty when the stage above halved resolution
        int up_w = -1, up_b = -1;
        int fuse_w = -1, fuse_b = -1;
        BlockLayer block;
        int head_w = -1, head_b = -1;
        bool has_head = false;
    };

    Tensor run_blocks(Binding& binding, const EncStage& st, Tensor window_major,
                      VolumeBanks* banks, const IntersectionSet& inter,
                      std::vector<Tensor>* bound_banks, FineBlockCapture* capture,
                      bool capture_here) const;

    RunConfig cfg_;
    BlockMode mode_;
    VolumeGrid grid_;
    ParamStore store_;
    std::vector<EncStage> encoder_;
    std::vector<DecStage> decoder_; // ordered coarse-to-fine
    std::vector<int> memory_stages_;
    // bias layouts shared across blocks (keyed by memory-token count)
    RelBiasLayout layout_plain_;
    RelBiasLayout layout_mem_;
};

// ---- losses and schedule ----

// dice_w * (1 - mean per-class soft Dice, eps 1e-5) + ce_w * mean CE.
Tensor dice_ce_loss(const Tensor& logits, const std::vector<std::uint8_t>& labels, int classes,
                    double dice_w, double ce_w);

// Deep-supervision total: sum_k alpha_k * loss_k with alpha_k proportional
// to 2^-k, normalized. labels_full is at level-0 resolution.
Tensor deep_supervision_loss(const std::vector<LevelLogits>& levels,
                             const std::vector<std::uint8_t>& labels_full, Dims3 full_dims,
                             int classes, double dice_w, double ce_w);

double poly_lr(long long iter, long long max_iter, double base_lr, double power);

// Strided nearest-voxel label downsampling for deep supervision.
std::vector<std::uint8_t> downsample_labels(const std::vector<std::uint8_t>& labels,
                                            Dims3 full_dims, Dims3 target_dims);

// Crop helpers.
std::vector<std::uint8_t> crop_labels(const Volume& vol, const CropSpec& crop);
Tensor crop_intensity(const Volume& vol, const CropSpec& crop);

// ---- optimizer / trainer ----

struct SgdHyper {
    double lr = 0.01;
    double momentum = 0.99;
    bool nesterov = true;
};

void sgd_update(Tensor& value, Tensor& momentum, const Tensor& grad, const SgdHyper& h);

class Trainer {
public:
    Trainer(SegModel& model, const RunConfig& cfg);

    // One iteration: sample a volume and crop, forward, backward, SGD step.
    // Returns the loss value.
    double step(const std::vector<Volume>& volumes, const std::vector<std::string>& ids,
                BankMap& banks);

    // Runs the remaining epochs (optionally only up to `until_epoch`),
    // reporting per-epoch mean loss. The LR schedule always spans the full
    // configured epoch count, so an interrupted run resumes on the exact
    // trajectory.
    void run(const std::vector<Volume>& volumes, const std::vector<std::string>& ids,
             BankMap& banks, const std::function<void(int, double, double)>& on_epoch,
             int until_epoch = -1);

    long long global_iter() const { return global_iter_; }
    long long max_iter() const { return max_iter_; }
    std::string rng_state() const { return rng_.save_state(); }
    void restore(long long iter, const std::string& rng_state);
    double current_lr() const;

private:
    SegModel& model_;
    RunConfig cfg_;
    Rng rng_;
    long long global_iter_ = 0;
    long long max_iter_ = 0;
};

// ---- inference ----

// Regular crop grid with 50% overlap, softmax-probability averaging in the
// overlaps, argmax per voxel. When `two_pass` is set the bank seen-mask is
// warmed over all crop positions before prediction (fresh banks at
// inference time).
std::vector<std::uint8_t> sliding_infer(SegModel& model, VolumeBanks* banks, const Volume& vol,
                                        bool two_pass);

std::vector<int> sliding_origins(int dim, int crop, int stride);

// Per-volume, per-class dice/hd95 CSV (plus mean rows) over a data set.
// Stored banks are used where the volume id is known; fresh banks with the
// two-pass protocol otherwise. Byte-deterministic for fixed inputs.
std::string eval_report_csv(SegModel& model, BankMap& banks, const std::vector<Volume>& volumes,
                            const std::vector<std::string>& ids);

// ---- checkpoints ----
// Layout: magic "FINECKPT", u32 format version, u64 config digest, resolved
// config text, parameter blobs in declaration order, banks keyed by volume
// id, trainer state (iteration counter + RNG), end marker.

struct TrainerState {
    long long global_iter = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const SegModel& model, const BankMap& banks,
                     const TrainerState& state);

struct LoadedCheckpoint {
    RunConfig config;
    std::unique_ptr<SegModel> model;
    BankMap banks;
    TrainerState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace fine
