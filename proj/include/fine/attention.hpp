#pragma once

#include <vector>

#include "fine/geometry.hpp"
#include "fine/memory_bank.hpp"
#include "fine/param_store.hpp"
#include "fine/tensor.hpp"

namespace fine {

enum class TokenRole { visual, window, volume };

struct TokenSeq {
    TokenRole role;
    Tensor tokens; // [count, c]
};

enum class BlockMode {
    full,               // window tokens + volume tokens (three attention stages)
    window_tokens_only, // window tokens, no volume tokens (no global stage)
    no_memory           // plain windowed attention over visual tokens
};

struct FineBlockConfig {
    int channels = 0;
    int heads = 1;
    int tokens_per_window = 1; // N_v
    int tokens_per_cell = 1;   // N_w
    int mlp_ratio = 2;
    bool rel_pos_bias = true;
    BlockMode mode = BlockMode::full;
};

// ---- parameter wiring ----

struct AttnIds {
    int norm_gain, norm_bias, wq, bq, wk, bk, wv, bv, wo, bo;
};
struct MlpIds {
    int norm_gain, norm_bias, w1, b1, w2, b2;
};
struct StageIds {
    AttnIds attn;
    MlpIds mlp;
};
struct FineBlockIds {
    StageIds w_stage{};
    StageIds g_stage{};
    StageIds global_stage{};
    int bias_table = -1;
    bool has_g_stage = false;
    bool has_global_stage = false;
};

AttnIds register_attn(ParamStore& store, const std::string& prefix, int channels, Rng& rng);
MlpIds register_mlp(ParamStore& store, const std::string& prefix, int channels, int mlp_ratio,
                    Rng& rng);
StageIds register_stage(ParamStore& store, const std::string& prefix, int channels,
                        int mlp_ratio, Rng& rng);
FineBlockIds register_fine_block(ParamStore& store, const std::string& prefix,
                                 const FineBlockConfig& cfg, Dims3 window_size, Rng& rng);

struct BoundAttn {
    Tensor norm_gain, norm_bias, wq, bq, wk, bk, wv, bv, wo, bo;
};
struct BoundMlp {
    Tensor norm_gain, norm_bias, w1, b1, w2, b2;
};
struct BoundStage {
    BoundAttn attn;
    BoundMlp mlp;
};
struct BoundFineBlock {
    BlockMode mode = BlockMode::full;
    BoundStage w_stage, g_stage, global_stage;
    Tensor bias_table;            // undefined when bias disabled
    const RelBiasLayout* bias_layout = nullptr;
};

BoundAttn bind_attn(const Binding& b, const AttnIds& ids);
BoundMlp bind_mlp(const Binding& b, const MlpIds& ids);
BoundStage bind_stage(const Binding& b, const StageIds& ids);
BoundFineBlock bind_fine_block(const Binding& b, const FineBlockIds& ids,
                               const FineBlockConfig& cfg, const RelBiasLayout* layout);

// ---- attention ops ----

// Softmax row capture, averaged over heads.
struct AttnCapture {
    int seq_len = 0;
    std::vector<double> weights; // [seq_len * seq_len]
};

// Pre-norm residual multi-head self-attention over one sequence.
// Masked rows are hidden as keys (-inf logits) and contribute nothing as
// queries (their residual delta is zeroed, so output == input there).
// logit_bias, when present, holds one [L,L] bias per head.
Tensor msa(const Tensor& seq, const BoundAttn& p, int heads,
           const std::vector<bool>* masked = nullptr,
           const std::vector<Tensor>* logit_bias = nullptr, AttnCapture* capture = nullptr);

// Pre-norm residual MLP; masked rows keep their input unchanged.
Tensor mlp(const Tensor& seq, const BoundMlp& p, const std::vector<bool>* masked = nullptr);

// msa followed by mlp with the same mask.
Tensor transformer_stage(const Tensor& seq, const BoundStage& p, int heads,
                         const std::vector<bool>* masked = nullptr,
                         const std::vector<Tensor>* logit_bias = nullptr,
                         AttnCapture* capture = nullptr);

// One [L,L] bias matrix per head from the learned table and the index map.
std::vector<Tensor> build_bias_matrices(const Tensor& table, const RelBiasLayout& layout,
                                        int heads);

struct WMsaOut {
    Tensor visual;        // [N*N_u, c]
    Tensor window_tokens; // [N*N_v, c]; undefined if none were passed
};

// Window attention: per window, one transformer stage over the concatenated
// visual (+ window-token) sequence. No information crosses windows here.
WMsaOut w_msa(const Tensor& visual, const Tensor& window_tokens, int n_windows,
              const BoundStage& stage, int heads, const RelBiasLayout* bias_layout,
              const Tensor* bias_table, AttnCapture* capture = nullptr,
              int capture_window = 0);

struct GMsaOut {
    Tensor window_tokens; // [N*N_v, c]
    Tensor volume_subset; // [N_wcap*N_w, c]; undefined if none were passed
};

// Crop-level attention over all window tokens plus the volume tokens whose
// cells intersect the crop.
GMsaOut g_msa(const Tensor& window_tokens, const Tensor& volume_subset, const BoundStage& stage,
              int heads, AttnCapture* capture = nullptr);

// Volume-level attention over the whole bank with unseen rows masked.
Tensor global_msa(const Tensor& bank_tokens, const std::vector<bool>& unseen_rows,
                  const BoundStage& stage, int heads, AttnCapture* capture = nullptr);

struct FineBlockState {
    Tensor visual;        // [N*N_u, c]
    Tensor window_tokens; // [N*N_v, c] (undefined in no_memory mode)
    Tensor bank_tokens;   // [M*N_w, c] (defined only in full mode)
};

struct FineBlockCapture {
    int window = 0; // which window's W-MSA row block to record
    AttnCapture w_msa, g_msa, global_msa;
};

// One FINE transformer block: window attention, crop attention against the
// intersecting volume tokens, then volume attention over the full bank with
// warm-up masking. `bank` supplies the seen-mask and is marked during the
// gather; pass nullptr except in full mode.
FineBlockState fine_block(const FineBlockState& in, int n_windows, MemoryBank* bank,
                          const IntersectionSet* inter, const BoundFineBlock& params,
                          const FineBlockConfig& cfg, FineBlockCapture* capture = nullptr);

} // namespace fine
