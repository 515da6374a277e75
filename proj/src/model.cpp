#include "fine/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fine/serialize.hpp"

namespace fine {

BlockMode block_mode_from_ablate(const std::string& ablate) {
    if (ablate == "none") return BlockMode::full;
    if (ablate == "no-volume-tokens") return BlockMode::window_tokens_only;
    if (ablate == "no-memory") return BlockMode::no_memory;
    throw ConfigError("unknown ablation '" + ablate + "'");
}

// ---- SegModel construction ----

SegModel::SegModel(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.stage_dims.size() < 2)
        throw ConfigError("the encoder/decoder needs at least 2 stages");
    mode_ = block_mode_from_ablate(cfg_.ablate);
    grid_ = build_grid(cfg_.volume_dims, cfg_.grid_cells_x, cfg_.grid_cells_y, cfg_.crop_size);
    layout_plain_ = relative_bias_layout(cfg_.window_size, 0);
    layout_mem_ = relative_bias_layout(cfg_.window_size, cfg_.tokens_per_window);

    Rng rng(cfg_.seed);
    const int S = static_cast<int>(cfg_.stage_dims.size());

    Dims3 res = cfg_.crop_size;
    int prev_dim = 1;
    for (int s = 0; s < S; ++s) {
        EncStage st;
        st.dim = cfg_.stage_dims[static_cast<std::size_t>(s)];
        if (cfg_.stage_downsample[static_cast<std::size_t>(s)] == 2) {
            st.down_gather = downsample_gather_indices(res);
            res = Dims3{res.x / 2, res.y / 2, res.z / 2};
        }
        st.res = res;
        st.part = make_window_partition(res, cfg_.window_size);
        st.perm = window_permutation(st.part);
        st.inv_perm = inverse_permutation(st.perm);
        const std::string prefix = "enc" + std::to_string(s);
        const int in_width = s == 0 ? 1
                             : cfg_.stage_downsample[static_cast<std::size_t>(s)] == 2
                                 ? 8 * prev_dim
                                 : prev_dim;
        st.in_w = store_.add(prefix + ".in.w", {in_width, st.dim}, Init::normal_002, rng);
        st.in_b = store_.add(prefix + ".in.b", {st.dim}, Init::zeros, rng);

        const bool wants_memory =
            mode_ != BlockMode::no_memory &&
            std::find(cfg_.fine_stages.begin(), cfg_.fine_stages.end(), s) != cfg_.fine_stages.end();
        st.is_memory = wants_memory;
        FineBlockConfig bcfg;
        bcfg.channels = st.dim;
        bcfg.heads = cfg_.heads;
        bcfg.tokens_per_window = cfg_.tokens_per_window;
        bcfg.tokens_per_cell = cfg_.tokens_per_cell;
        bcfg.mlp_ratio = cfg_.mlp_ratio;
        bcfg.rel_pos_bias = cfg_.rel_pos_bias;
        bcfg.mode = wants_memory ? mode_ : BlockMode::no_memory;
        if (wants_memory) {
            st.memory_index = static_cast<int>(memory_stages_.size());
            memory_stages_.push_back(s);
            st.wt_embed = store_.add(prefix + ".window_token", {cfg_.tokens_per_window, st.dim},
                                     Init::normal_002, rng);
        }
        const int n_blocks = cfg_.stage_blocks[static_cast<std::size_t>(s)];
        for (int b = 0; b < n_blocks; ++b) {
            BlockLayer layer;
            layer.cfg = bcfg;
            layer.ids = register_fine_block(store_, prefix + ".block" + std::to_string(b), bcfg,
                                            cfg_.window_size, rng);
            layer.layout = bcfg.mode == BlockMode::no_memory ? &layout_plain_ : &layout_mem_;
            st.blocks.push_back(layer);
        }
        prev_dim = st.dim;
        encoder_.push_back(std::move(st));
    }

    for (int s = S - 2; s >= 0; --s) {
        DecStage st;
        st.enc_index = s;
        st.dim = cfg_.stage_dims[static_cast<std::size_t>(s)];
        st.res = encoder_[static_cast<std::size_t>(s)].res;
        st.part = encoder_[static_cast<std::size_t>(s)].part;
        st.perm = encoder_[static_cast<std::size_t>(s)].perm;
        st.inv_perm = encoder_[static_cast<std::size_t>(s)].inv_perm;
        const std::string prefix = "dec" + std::to_string(s);
        const int coarse_dim = cfg_.stage_dims[static_cast<std::size_t>(s) + 1];
        const bool upsamples = cfg_.stage_downsample[static_cast<std::size_t>(s) + 1] == 2;
        if (upsamples) st.up_gather = upsample_gather_indices(st.res);
        const int up_width = upsamples ? 8 * st.dim : st.dim;
        st.up_w = store_.add(prefix + ".up.w", {coarse_dim, up_width}, Init::normal_002, rng);
        st.up_b = store_.add(prefix + ".up.b", {up_width}, Init::zeros, rng);
        st.fuse_w = store_.add(prefix + ".fuse.w", {2 * st.dim, st.dim}, Init::normal_002, rng);
        st.fuse_b = store_.add(prefix + ".fuse.b", {st.dim}, Init::zeros, rng);
        FineBlockConfig bcfg;
        bcfg.channels = st.dim;
        bcfg.heads = cfg_.heads;
        bcfg.mlp_ratio = cfg_.mlp_ratio;
        bcfg.rel_pos_bias = cfg_.rel_pos_bias;
        bcfg.mode = BlockMode::no_memory;
        st.block.cfg = bcfg;
        st.block.ids = register_fine_block(store_, prefix + ".block", bcfg, cfg_.window_size, rng);
        st.block.layout = &layout_plain_;
        st.has_head = s == 0 || cfg_.deep_supervision;
        if (st.has_head) {
            st.head_w = store_.add(prefix + ".head.w", {st.dim, cfg_.classes}, Init::normal_002, rng);
            st.head_b = store_.add(prefix + ".head.b", {cfg_.classes}, Init::zeros, rng);
        }
        decoder_.push_back(std::move(st));
    }
}

int SegModel::memory_stage_channels(int i) const {
    return cfg_.stage_dims[static_cast<std::size_t>(memory_stages_[static_cast<std::size_t>(i)])];
}

VolumeBanks SegModel::make_banks(const std::string& volume_id) const {
    VolumeBanks banks;
    for (std::size_t i = 0; i < memory_stages_.size(); ++i) {
        Rng rng(fnv1a64(volume_id) ^ (cfg_.seed * 0x9e3779b97f4a7c15ULL) ^ (i + 1));
        banks.per_stage.emplace_back(grid_.cell_count(), cfg_.tokens_per_cell,
                                     memory_stage_channels(static_cast<int>(i)), rng);
    }
    return banks;
}

int SegModel::level_count() const {
    if (!cfg_.deep_supervision) return 1;
    return std::max(1, static_cast<int>(cfg_.stage_dims.size()) - 1);
}

Dims3 SegModel::level_dims(int level) const {
    return encoder_[static_cast<std::size_t>(level)].res;
}

Tensor SegModel::run_blocks(Binding& binding, const EncStage& st, Tensor window_major,
                            VolumeBanks* banks, const IntersectionSet& inter,
                            std::vector<Tensor>* bound_banks, FineBlockCapture* capture,
                            bool capture_here) const {
    FineBlockState state;
    state.visual = std::move(window_major);
    MemoryBank* bank = nullptr;
    if (st.is_memory) {
        const Tensor embed = binding[st.wt_embed];
        if (st.part.window_count == 1) {
            state.window_tokens = embed;
        } else {
            std::vector<Tensor> copies(static_cast<std::size_t>(st.part.window_count), embed);
            state.window_tokens = concat(0, copies);
        }
        if (mode_ == BlockMode::full) {
            if (!banks) throw ContractError("forward: this model needs volume-token banks");
            bank = &banks->per_stage[static_cast<std::size_t>(st.memory_index)];
            state.bank_tokens = binding.tape().leaf(bank->tokens());
            if (bound_banks) bound_banks->push_back(state.bank_tokens);
        }
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        const BlockLayer& layer = st.blocks[b];
        const BoundFineBlock bound = bind_fine_block(binding, layer.ids, layer.cfg, layer.layout);
        FineBlockCapture* cap = (capture_here && b == 0) ? capture : nullptr;
        state = fine_block(state, st.part.window_count, bank,
                           mode_ == BlockMode::full && st.is_memory ? &inter : nullptr, bound,
                           layer.cfg, cap);
    }
    return state.visual;
}

ForwardResult SegModel::forward(Binding& binding, const Tensor& crop_feat, const CropSpec& crop,
                                VolumeBanks* banks, FineBlockCapture* capture,
                                int capture_memory_stage) const {
    if (!(crop.size == cfg_.crop_size))
        throw DimensionError("forward: crop size " + crop.size.str() +
                             " does not match configured " + cfg_.crop_size.str());
    const long long v0 = cfg_.crop_size.voxels();
    if (crop_feat.rank() != 2 || crop_feat.rows() != v0 || crop_feat.cols() != 1)
        throw DimensionError("forward: crop features " + shape_str(crop_feat.shape()) +
                             " should be [" + std::to_string(v0) + ",1]");

    IntersectionSet inter;
    if (mode_ == BlockMode::full && !memory_stages_.empty()) inter = intersect(grid_, crop);

    ForwardResult result;
    std::vector<Tensor> skips;
    Tensor x = crop_feat;
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
        const EncStage& st = encoder_[s];
        if (!st.down_gather.empty()) {
            const int c_prev = x.cols();
            const Tensor grouped = gather_rows(x, st.down_gather);
            const Tensor merged =
                reshape(grouped, {static_cast<int>(st.res.voxels()), 8 * c_prev});
            x = add_rowwise(matmul(merged, binding[st.in_w]), binding[st.in_b]);
        } else {
            x = add_rowwise(matmul(x, binding[st.in_w]), binding[st.in_b]);
        }
        Tensor u = gather_rows(x, st.perm);
        u = run_blocks(binding, st, std::move(u), banks, inter, &result.bound_bank_tokens,
                       capture, st.is_memory && st.memory_index == capture_memory_stage);
        x = gather_rows(u, st.inv_perm);
        skips.push_back(x);
    }

    std::vector<LevelLogits> levels;
    x = skips.back();
    for (const DecStage& st : decoder_) {
        Tensor y = add_rowwise(matmul(x, binding[st.up_w]), binding[st.up_b]);
        if (!st.up_gather.empty()) {
            const Tensor expanded =
                reshape(y, {static_cast<int>(st.res.voxels()), st.dim});
            y = gather_rows(expanded, st.up_gather);
        }
        const Tensor fused = concat(1, {skips[static_cast<std::size_t>(st.enc_index)], y});
        x = add_rowwise(matmul(fused, binding[st.fuse_w]), binding[st.fuse_b]);

        Tensor u = gather_rows(x, st.perm);
        FineBlockState state;
        state.visual = std::move(u);
        const BoundFineBlock bound =
            bind_fine_block(binding, st.block.ids, st.block.cfg, st.block.layout);
        state = fine_block(state, st.part.window_count, nullptr, nullptr, bound, st.block.cfg);
        x = gather_rows(state.visual, st.inv_perm);

        if (st.has_head) {
            LevelLogits lvl;
            lvl.dims = st.res;
            lvl.logits = add_rowwise(matmul(x, binding[st.head_w]), binding[st.head_b]);
            levels.push_back(std::move(lvl));
        }
    }
    // decoder runs coarse-to-fine; present levels fine-to-coarse (level 0 first)
    std::reverse(levels.begin(), levels.end());
    result.levels = std::move(levels);
    return result;
}

// ---- losses ----

Tensor dice_ce_loss(const Tensor& logits, const std::vector<std::uint8_t>& labels, int classes,
                    double dice_w, double ce_w) {
    if (logits.rank() != 2 || logits.cols() != classes)
        throw DimensionError("dice_ce_loss: logits " + shape_str(logits.shape()) +
                             " do not match " + std::to_string(classes) + " classes");
    const int V = logits.rows();
    if (static_cast<int>(labels.size()) != V)
        throw DimensionError("dice_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(V) + " voxels");
    for (std::uint8_t l : labels)
        if (l >= classes)
            throw DataError("dice_ce_loss: label " + std::to_string(l) + " outside [0," +
                            std::to_string(classes) + ")");

    constexpr double kSmooth = 1e-5;
    const Tensor probs = softmax(logits, 1);

    Tensor onehot = Tensor::zeros({V, classes});
    std::vector<long long> class_counts(static_cast<std::size_t>(classes), 0);
    for (int v = 0; v < V; ++v) {
        onehot.data()[static_cast<std::size_t>(v) * classes + labels[static_cast<std::size_t>(v)]] = 1.0;
        ++class_counts[labels[static_cast<std::size_t>(v)]];
    }

    const Tensor ce = scale(sum(mul(log(probs), onehot)), -1.0 / V);

    Tensor dice_sum;
    for (int k = 0; k < classes; ++k) {
        Tensor col_truth = Tensor::zeros({V, classes});
        Tensor col_ones = Tensor::zeros({V, classes});
        for (int v = 0; v < V; ++v) {
            col_ones.data()[static_cast<std::size_t>(v) * classes + k] = 1.0;
            if (labels[static_cast<std::size_t>(v)] == k)
                col_truth.data()[static_cast<std::size_t>(v) * classes + k] = 1.0;
        }
        const Tensor inter = sum(mul(probs, col_truth));
        const Tensor pred_mass = sum(mul(probs, col_ones));
        const Tensor num = add(scale(inter, 2.0), Tensor::scalar(kSmooth));
        const Tensor den = add(pred_mass, Tensor::scalar(static_cast<double>(class_counts[static_cast<std::size_t>(k)]) + kSmooth));
        const Tensor dk = div(num, den);
        dice_sum = k == 0 ? dk : add(dice_sum, dk);
    }
    const Tensor dice_loss = add(Tensor::scalar(1.0), scale(dice_sum, -1.0 / classes));
    return add(scale(dice_loss, dice_w), scale(ce, ce_w));
}

std::vector<std::uint8_t> downsample_labels(const std::vector<std::uint8_t>& labels,
                                            Dims3 full_dims, Dims3 target_dims) {
    if (full_dims.x % target_dims.x || full_dims.y % target_dims.y || full_dims.z % target_dims.z)
        throw DimensionError("downsample_labels: " + full_dims.str() + " is not a multiple of " +
                             target_dims.str());
    const int fx = full_dims.x / target_dims.x;
    const int fy = full_dims.y / target_dims.y;
    const int fz = full_dims.z / target_dims.z;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(target_dims.voxels()));
    for (int x = 0; x < target_dims.x; ++x)
        for (int y = 0; y < target_dims.y; ++y)
            for (int z = 0; z < target_dims.z; ++z)
                out[static_cast<std::size_t>(voxel_index(target_dims, x, y, z))] =
                    labels[static_cast<std::size_t>(voxel_index(full_dims, x * fx, y * fy, z * fz))];
    return out;
}

Tensor deep_supervision_loss(const std::vector<LevelLogits>& levels,
                             const std::vector<std::uint8_t>& labels_full, Dims3 full_dims,
                             int classes, double dice_w, double ce_w) {
    if (levels.empty()) throw ContractError("deep_supervision_loss: no levels");
    double weight_sum = 0.0;
    for (std::size_t k = 0; k < levels.size(); ++k) weight_sum += std::pow(2.0, -static_cast<double>(k));
    Tensor total;
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const std::vector<std::uint8_t> lbl =
            levels[k].dims == full_dims ? labels_full
                                        : downsample_labels(labels_full, full_dims, levels[k].dims);
        const double alpha = std::pow(2.0, -static_cast<double>(k)) / weight_sum;
        const Tensor lk = scale(dice_ce_loss(levels[k].logits, lbl, classes, dice_w, ce_w), alpha);
        total = k == 0 ? lk : add(total, lk);
    }
    return total;
}

double poly_lr(long long iter, long long max_iter, double base_lr, double power) {
    if (max_iter < 1) throw ContractError("poly_lr: max_iter must be >= 1");
    if (iter < 0 || iter > max_iter)
        throw ContractError("poly_lr: iter " + std::to_string(iter) + " outside [0," +
                            std::to_string(max_iter) + "]");
    return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

std::vector<std::uint8_t> crop_labels(const Volume& vol, const CropSpec& crop) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(crop.size.voxels()));
    std::size_t i = 0;
    for (int x = 0; x < crop.size.x; ++x)
        for (int y = 0; y < crop.size.y; ++y)
            for (int z = 0; z < crop.size.z; ++z)
                out[i++] = vol.labels[static_cast<std::size_t>(voxel_index(
                    vol.dims, crop.origin.x + x, crop.origin.y + y, crop.origin.z + z))];
    return out;
}

Tensor crop_intensity(const Volume& vol, const CropSpec& crop) {
    Tensor t = Tensor::zeros({static_cast<int>(crop.size.voxels()), 1});
    std::size_t i = 0;
    for (int x = 0; x < crop.size.x; ++x)
        for (int y = 0; y < crop.size.y; ++y)
            for (int z = 0; z < crop.size.z; ++z)
                t.data()[i++] = vol.intensity[static_cast<std::size_t>(voxel_index(
                    vol.dims, crop.origin.x + x, crop.origin.y + y, crop.origin.z + z))];
    return t;
}

// ---- optimizer / trainer ----

void sgd_update(Tensor& value, Tensor& momentum, const Tensor& grad, const SgdHyper& h) {
    if (value.shape() != grad.shape() || value.shape() != momentum.shape())
        throw DimensionError("sgd_update: mismatched shapes");
    double* w = value.data();
    double* m = momentum.data();
    const double* g = grad.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = h.momentum * m[i] + g[i];
        w[i] -= h.lr * (h.nesterov ? g[i] + h.momentum * m[i] : m[i]);
    }
}

Trainer::Trainer(SegModel& model, const RunConfig& cfg)
    : model_(model), cfg_(cfg), rng_(cfg.seed ^ 0x747261696e5f5f31ULL) {
    max_iter_ = static_cast<long long>(cfg_.epochs) * cfg_.iters_per_epoch;
}

double Trainer::current_lr() const {
    if (max_iter_ < 1) return cfg_.base_lr;
    return poly_lr(std::min(global_iter_, max_iter_), max_iter_, cfg_.base_lr, cfg_.poly_power);
}

void Trainer::restore(long long iter, const std::string& rng_state) {
    global_iter_ = iter;
    rng_.load_state(rng_state);
}

double Trainer::step(const std::vector<Volume>& volumes, const std::vector<std::string>& ids,
                     BankMap& banks) {
    if (volumes.empty()) throw DataError("training: no volumes");
    if (volumes.size() != ids.size()) throw ContractError("training: ids do not match volumes");
    const std::size_t vi = static_cast<std::size_t>(rng_.below(volumes.size()));
    const Volume& vol = volumes[vi];
    const CropSpec crop = sample_crop(vol.dims, cfg_.crop_size, rng_);

    VolumeBanks* vb = nullptr;
    if (model_.memory_mode() == BlockMode::full && !model_.memory_stage_indices().empty()) {
        auto it = banks.find(ids[vi]);
        if (it == banks.end()) it = banks.emplace(ids[vi], model_.make_banks(ids[vi])).first;
        vb = &it->second;
    }

    Tape tape;
    Binding binding(tape, model_.store());
    const Tensor feat = crop_intensity(vol, crop);
    ForwardResult fwd = model_.forward(binding, feat, crop, vb);
    const std::vector<std::uint8_t> labels = crop_labels(vol, crop);
    const Tensor loss = deep_supervision_loss(fwd.levels, labels, crop.size, cfg_.classes,
                                              cfg_.dice_weight, cfg_.ce_weight);
    const double loss_value = loss.at(0);
    if (std::isnan(loss_value))
        throw NumericError("training aborted: NaN loss at iteration " +
                           std::to_string(global_iter_) + " on volume '" + ids[vi] + "'");
    tape.backward(loss);

    SgdHyper h;
    h.lr = poly_lr(global_iter_, max_iter_, cfg_.base_lr, cfg_.poly_power);
    h.momentum = cfg_.momentum;
    h.nesterov = cfg_.nesterov;
    for (int p = 0; p < model_.store().count(); ++p)
        sgd_update(model_.store().value(p), model_.store().momentum(p), tape.grad(binding[p]), h);
    if (vb)
        for (std::size_t i = 0; i < fwd.bound_bank_tokens.size(); ++i) {
            MemoryBank& bank = vb->per_stage[i];
            sgd_update(bank.tokens(), bank.momentum(), tape.grad(fwd.bound_bank_tokens[i]), h);
        }
    ++global_iter_;
    return loss_value;
}

void Trainer::run(const std::vector<Volume>& volumes, const std::vector<std::string>& ids,
                  BankMap& banks, const std::function<void(int, double, double)>& on_epoch,
                  int until_epoch) {
    const long long start_epoch = cfg_.iters_per_epoch ? global_iter_ / cfg_.iters_per_epoch : 0;
    const long long stop = until_epoch < 0 ? cfg_.epochs : std::min<long long>(until_epoch, cfg_.epochs);
    for (long long e = start_epoch; e < stop; ++e) {
        double sum = 0.0;
        for (int i = 0; i < cfg_.iters_per_epoch; ++i) sum += step(volumes, ids, banks);
        if (on_epoch) on_epoch(static_cast<int>(e), sum / cfg_.iters_per_epoch, current_lr());
    }
}

// ---- inference ----

std::vector<int> sliding_origins(int dim, int crop, int stride) {
    std::vector<int> out;
    if (crop > dim) throw ContractError("sliding_origins: crop exceeds dim");
    stride = std::max(1, stride);
    for (int o = 0; o + crop <= dim; o += stride) out.push_back(o);
    if (out.empty() || out.back() != dim - crop) out.push_back(dim - crop);
    return out;
}

std::vector<std::uint8_t> sliding_infer(SegModel& model, VolumeBanks* banks, const Volume& vol,
                                        bool two_pass) {
    const RunConfig& cfg = model.config();
    const Dims3 crop_size = cfg.crop_size;
    const std::vector<int> xs = sliding_origins(vol.dims.x, crop_size.x, crop_size.x / 2);
    const std::vector<int> ys = sliding_origins(vol.dims.y, crop_size.y, crop_size.y / 2);
    const std::vector<int> zs = sliding_origins(vol.dims.z, crop_size.z, crop_size.z / 2);

    if (two_pass && banks && model.memory_mode() == BlockMode::full) {
        // First sweep only establishes which cells have been observed; token
        // values do not change in a forward pass, so marking is equivalent.
        for (int x : xs)
            for (int y : ys)
                for (int z : zs) {
                    const CropSpec crop{Dims3{x, y, z}, crop_size};
                    const IntersectionSet inter = intersect(model.grid(), crop);
                    for (MemoryBank& bank : banks->per_stage) bank.mark_seen(inter);
                }
    }

    const std::size_t n_vox = static_cast<std::size_t>(vol.dims.voxels());
    const int K = cfg.classes;
    std::vector<double> prob_sum(n_vox * static_cast<std::size_t>(K), 0.0);
    std::vector<int> cover(n_vox, 0);

    for (int x : xs)
        for (int y : ys)
            for (int z : zs) {
                const CropSpec crop{Dims3{x, y, z}, crop_size};
                Tape tape;
                Binding binding(tape, model.store());
                const Tensor feat = crop_intensity(vol, crop);
                ForwardResult fwd = model.forward(binding, feat, crop, banks);
                const Tensor probs = softmax(fwd.levels[0].logits, 1);
                std::size_t i = 0;
                for (int cx = 0; cx < crop_size.x; ++cx)
                    for (int cy = 0; cy < crop_size.y; ++cy)
                        for (int cz = 0; cz < crop_size.z; ++cz) {
                            const std::size_t vox = static_cast<std::size_t>(
                                voxel_index(vol.dims, x + cx, y + cy, z + cz));
                            for (int k = 0; k < K; ++k)
                                prob_sum[vox * K + static_cast<std::size_t>(k)] +=
                                    probs.data()[i * K + static_cast<std::size_t>(k)];
                            ++cover[vox];
                            ++i;
                        }
            }

    std::vector<std::uint8_t> labels(n_vox, 0);
    for (std::size_t v = 0; v < n_vox; ++v) {
        int best = 0;
        double best_p = -1.0;
        for (int k = 0; k < K; ++k) {
            const double p = prob_sum[v * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)] / cover[v];
            if (p > best_p) {
                best_p = p;
                best = k;
            }
        }
        labels[v] = static_cast<std::uint8_t>(best);
    }
    return labels;
}

std::string eval_report_csv(SegModel& model, BankMap& banks, const std::vector<Volume>& volumes,
                            const std::vector<std::string>& ids) {
    if (volumes.empty()) throw DataError("eval: no volumes");
    if (volumes.size() != ids.size()) throw ContractError("eval: ids do not match volumes");
    const int K = model.config().classes;

    auto metric_text = [](double v) {
        if (!std::isfinite(v)) return std::string("undefined");
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };

    std::ostringstream os;
    os << "volume_id,class,dice,hd95\n";
    std::vector<double> dice_sums(static_cast<std::size_t>(K), 0.0);
    std::vector<double> hd_sums(static_cast<std::size_t>(K), 0.0);
    std::vector<int> hd_defined(static_cast<std::size_t>(K), 0);

    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const Volume& vol = volumes[i];
        VolumeBanks* vb = nullptr;
        VolumeBanks fresh;
        bool two_pass = false;
        if (model.memory_mode() == BlockMode::full) {
            auto it = banks.find(ids[i]);
            if (it != banks.end()) {
                vb = &it->second;
            } else {
                fresh = model.make_banks(ids[i]);
                vb = &fresh;
                two_pass = true;
            }
        }
        const std::vector<std::uint8_t> pred_padded = sliding_infer(model, vb, vol, two_pass);
        const Dims3 od = vol.original_dims;
        std::vector<std::uint8_t> pred(static_cast<std::size_t>(od.voxels()));
        std::vector<std::uint8_t> truth(pred.size());
        for (int x = 0; x < od.x; ++x)
            for (int y = 0; y < od.y; ++y)
                for (int z = 0; z < od.z; ++z) {
                    const std::size_t src = static_cast<std::size_t>(voxel_index(vol.dims, x, y, z));
                    const std::size_t dst = static_cast<std::size_t>(voxel_index(od, x, y, z));
                    pred[dst] = pred_padded[src];
                    truth[dst] = vol.labels[src];
                }
        const MetricReport m = evaluate_labels(pred, truth, K, od);
        for (int k = 0; k < K; ++k) {
            os << ids[i] << "," << k << "," << metric_text(m.dice_per_class[static_cast<std::size_t>(k)])
               << "," << metric_text(m.hd95_per_class[static_cast<std::size_t>(k)]) << "\n";
            dice_sums[static_cast<std::size_t>(k)] += m.dice_per_class[static_cast<std::size_t>(k)];
            if (std::isfinite(m.hd95_per_class[static_cast<std::size_t>(k)])) {
                hd_sums[static_cast<std::size_t>(k)] += m.hd95_per_class[static_cast<std::size_t>(k)];
                ++hd_defined[static_cast<std::size_t>(k)];
            }
        }
    }
    const double n = static_cast<double>(volumes.size());
    double dice_total = 0.0;
    for (int k = 0; k < K; ++k) {
        const double mean_hd = hd_defined[static_cast<std::size_t>(k)]
                                   ? hd_sums[static_cast<std::size_t>(k)] / hd_defined[static_cast<std::size_t>(k)]
                                   : std::numeric_limits<double>::infinity();
        os << "mean," << k << "," << metric_text(dice_sums[static_cast<std::size_t>(k)] / n) << ","
           << metric_text(mean_hd) << "\n";
        dice_total += dice_sums[static_cast<std::size_t>(k)] / n;
    }
    os << "mean,all," << metric_text(dice_total / K) << ",\n";
    return os.str();
}

// ---- checkpoints ----

namespace {
constexpr char kCkptMagic[8] = {'F', 'I', 'N', 'E', 'C', 'K', 'P', 'T'};
constexpr char kCkptEnd[4] = {'F', 'E', 'N', 'D'};
constexpr std::uint32_t kCkptVersion = 1;
} // namespace

void save_checkpoint(const std::string& path, const SegModel& model, const BankMap& banks,
                     const TrainerState& state) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint '" + path + "'");
    const std::string cfg_text = model.config().resolved_text();
    write_bytes(os, kCkptMagic, sizeof(kCkptMagic));
    write_u32(os, kCkptVersion);
    write_u64(os, fnv1a64(cfg_text));
    write_string(os, cfg_text);

    const ParamStore& store = model.store();
    write_u32(os, static_cast<std::uint32_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) {
        write_string(os, store.name(i));
        write_tensor(os, store.value(i));
        write_tensor(os, const_cast<ParamStore&>(store).momentum(i));
    }

    write_u32(os, static_cast<std::uint32_t>(banks.size()));
    for (const auto& [id, vb] : banks) {
        write_string(os, id);
        write_u32(os, static_cast<std::uint32_t>(vb.per_stage.size()));
        for (const MemoryBank& bank : vb.per_stage) bank.save(os);
    }

    write_u64(os, static_cast<std::uint64_t>(state.global_iter));
    write_string(os, state.rng_state);
    write_bytes(os, kCkptEnd, sizeof(kCkptEnd));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::string(magic, 8) != std::string(kCkptMagic, 8))
        throw FormatError("'" + path + "': not a checkpoint (bad magic)");
    const std::uint32_t version = read_u32(is);
    if (version != kCkptVersion)
        throw FormatError("'" + path + "': unsupported checkpoint version " +
                          std::to_string(version));
    const std::uint64_t digest = read_u64(is);
    const std::string cfg_text = read_string(is);
    if (fnv1a64(cfg_text) != digest)
        throw FormatError("'" + path + "': config digest mismatch (corrupt checkpoint)");

    LoadedCheckpoint out;
    out.config = RunConfig::from_text(cfg_text);
    out.model = std::make_unique<SegModel>(out.config);

    ParamStore& store = out.model->store();
    const std::uint32_t n_params = read_u32(is);
    if (static_cast<int>(n_params) != store.count())
        throw FormatError("'" + path + "': checkpoint has " + std::to_string(n_params) +
                          " parameters, model declares " + std::to_string(store.count()));
    for (int i = 0; i < store.count(); ++i) {
        const std::string name = read_string(is);
        if (name != store.name(i))
            throw FormatError("'" + path + "': parameter order mismatch at '" + name +
                              "', expected '" + store.name(i) + "'");
        Tensor value = read_tensor(is);
        Tensor momentum = read_tensor(is);
        if (value.shape() != store.value(i).shape())
            throw FormatError("'" + path + "': shape mismatch for '" + name + "'");
        store.value(i) = value;
        store.momentum(i) = momentum;
    }

    const std::uint32_t n_banks = read_u32(is);
    for (std::uint32_t b = 0; b < n_banks; ++b) {
        const std::string id = read_string(is);
        const std::uint32_t n_stages = read_u32(is);
        VolumeBanks vb;
        for (std::uint32_t s = 0; s < n_stages; ++s) vb.per_stage.push_back(MemoryBank::load(is));
        out.banks.emplace(id, std::move(vb));
    }

    out.state.global_iter = static_cast<long long>(read_u64(is));
    out.state.rng_state = read_string(is);
    char end[4];
    read_bytes(is, end, sizeof(end));
    if (std::string(end, 4) != std::string(kCkptEnd, 4))
        throw FormatError("'" + path + "': missing end marker (truncated checkpoint)");
    return out;
}

} // namespace fine
