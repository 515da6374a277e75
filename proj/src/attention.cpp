#include "fine/attention.hpp"

#include <cmath>
#include <limits>

namespace fine {

namespace {

// Constant [L,L] additive mask: -inf columns for masked keys.
Tensor key_mask_matrix(const std::vector<bool>& masked) {
    const int L = static_cast<int>(masked.size());
    Tensor m = Tensor::zeros({L, L});
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            if (masked[static_cast<std::size_t>(j)])
                m.data()[static_cast<std::size_t>(i) * L + j] = neg_inf;
    return m;
}

// Constant [L,c] multiplicative mask: zero rows for masked queries.
Tensor row_keep_matrix(const std::vector<bool>& masked, int c) {
    const int L = static_cast<int>(masked.size());
    Tensor m = Tensor::full({L, c}, 1.0);
    for (int i = 0; i < L; ++i)
        if (masked[static_cast<std::size_t>(i)])
            for (int j = 0; j < c; ++j) m.data()[static_cast<std::size_t>(i) * c + j] = 0.0;
    return m;
}

} // namespace

// ---- parameter registration ----

AttnIds register_attn(ParamStore& store, const std::string& prefix, int c, Rng& rng) {
    AttnIds ids;
    ids.norm_gain = store.add(prefix + ".norm.gain", {c}, Init::ones, rng);
    ids.norm_bias = store.add(prefix + ".norm.bias", {c}, Init::zeros, rng);
    ids.wq = store.add(prefix + ".wq", {c, c}, Init::normal_002, rng);
    ids.bq = store.add(prefix + ".bq", {c}, Init::zeros, rng);
    ids.wk = store.add(prefix + ".wk", {c, c}, Init::normal_002, rng);
    ids.bk = store.add(prefix + ".bk", {c}, Init::zeros, rng);
    ids.wv = store.add(prefix + ".wv", {c, c}, Init::normal_002, rng);
    ids.bv = store.add(prefix + ".bv", {c}, Init::zeros, rng);
    ids.wo = store.add(prefix + ".wo", {c, c}, Init::normal_002, rng);
    ids.bo = store.add(prefix + ".bo", {c}, Init::zeros, rng);
    return ids;
}

MlpIds register_mlp(ParamStore& store, const std::string& prefix, int c, int mlp_ratio, Rng& rng) {
    const int h = c * mlp_ratio;
    MlpIds ids;
    ids.norm_gain = store.add(prefix + ".norm.gain", {c}, Init::ones, rng);
    ids.norm_bias = store.add(prefix + ".norm.bias", {c}, Init::zeros, rng);
    ids.w1 = store.add(prefix + ".w1", {c, h}, Init::normal_002, rng);
    ids.b1 = store.add(prefix + ".b1", {h}, Init::zeros, rng);
    ids.w2 = store.add(prefix + ".w2", {h, c}, Init::normal_002, rng);
    ids.b2 = store.add(prefix + ".b2", {c}, Init::zeros, rng);
    return ids;
}

StageIds register_stage(ParamStore& store, const std::string& prefix, int c, int mlp_ratio,
                        Rng& rng) {
    return StageIds{register_attn(store, prefix + ".attn", c, rng),
                    register_mlp(store, prefix + ".mlp", c, mlp_ratio, rng)};
}

FineBlockIds register_fine_block(ParamStore& store, const std::string& prefix,
                                 const FineBlockConfig& cfg, Dims3 window_size, Rng& rng) {
    if (cfg.channels % cfg.heads)
        throw ConfigError("fine block: channels " + std::to_string(cfg.channels) +
                          " not divisible by heads " + std::to_string(cfg.heads));
    if (cfg.tokens_per_window < 1 || cfg.tokens_per_cell < 1)
        throw ConfigError("fine block: tokens per window/cell must be >= 1");
    FineBlockIds ids;
    ids.w_stage = register_stage(store, prefix + ".w", cfg.channels, cfg.mlp_ratio, rng);
    if (cfg.mode != BlockMode::no_memory) {
        ids.g_stage = register_stage(store, prefix + ".g", cfg.channels, cfg.mlp_ratio, rng);
        ids.has_g_stage = true;
    }
    if (cfg.mode == BlockMode::full) {
        ids.global_stage = register_stage(store, prefix + ".global", cfg.channels, cfg.mlp_ratio, rng);
        ids.has_global_stage = true;
    }
    if (cfg.rel_pos_bias) {
        const RelBiasLayout layout = relative_bias_layout(
            window_size, cfg.mode == BlockMode::no_memory ? 0 : cfg.tokens_per_window);
        ids.bias_table =
            store.add(prefix + ".bias_table", {layout.table_rows, cfg.heads}, Init::zeros, rng);
    }
    return ids;
}

BoundAttn bind_attn(const Binding& b, const AttnIds& ids) {
    return BoundAttn{b[ids.norm_gain], b[ids.norm_bias], b[ids.wq], b[ids.bq], b[ids.wk],
                     b[ids.bk],        b[ids.wv],        b[ids.bv], b[ids.wo], b[ids.bo]};
}

BoundMlp bind_mlp(const Binding& b, const MlpIds& ids) {
    return BoundMlp{b[ids.norm_gain], b[ids.norm_bias], b[ids.w1], b[ids.b1], b[ids.w2], b[ids.b2]};
}

BoundStage bind_stage(const Binding& b, const StageIds& ids) {
    return BoundStage{bind_attn(b, ids.attn), bind_mlp(b, ids.mlp)};
}

BoundFineBlock bind_fine_block(const Binding& b, const FineBlockIds& ids,
                               const FineBlockConfig& cfg, const RelBiasLayout* layout) {
    BoundFineBlock bound;
    bound.mode = cfg.mode;
    bound.w_stage = bind_stage(b, ids.w_stage);
    if (ids.has_g_stage) bound.g_stage = bind_stage(b, ids.g_stage);
    if (ids.has_global_stage) bound.global_stage = bind_stage(b, ids.global_stage);
    if (ids.bias_table >= 0) {
        bound.bias_table = b[ids.bias_table];
        bound.bias_layout = layout;
    }
    return bound;
}

// ---- attention ops ----

Tensor msa(const Tensor& x, const BoundAttn& p, int heads, const std::vector<bool>* masked,
           const std::vector<Tensor>* logit_bias, AttnCapture* capture) {
    if (x.rank() != 2) throw DimensionError("msa expects [L,c], got " + shape_str(x.shape()));
    const int L = x.rows(), c = x.cols();
    if (c % heads) throw ContractError("msa: channels not divisible by heads");
    const int d = c / heads;
    if (masked) {
        if (static_cast<int>(masked->size()) != L)
            throw DimensionError("msa: mask length " + std::to_string(masked->size()) +
                                 " does not match sequence length " + std::to_string(L));
        bool any_key = false;
        for (bool m : *masked) any_key |= !m;
        if (!any_key) throw ContractError("msa: every key is masked");
    }
    if (logit_bias && static_cast<int>(logit_bias->size()) != heads)
        throw DimensionError("msa: need one logit bias per head");

    Tape* tape = x.on_tape() ? x.tape() : p.wq.tape();

    const Tensor h = layernorm(x, p.norm_gain, p.norm_bias, 1e-5);
    Tensor q, k, v;
    {
        KindScope kind(tape, MacKind::projection);
        q = add_rowwise(matmul(h, p.wq), p.bq);
        k = add_rowwise(matmul(h, p.wk), p.bk);
        v = add_rowwise(matmul(h, p.wv), p.bv);
    }
    const std::vector<int> head_sizes(static_cast<std::size_t>(heads), d);
    const std::vector<Tensor> qs = heads == 1 ? std::vector<Tensor>{q} : split(q, 1, head_sizes);
    const std::vector<Tensor> ks = heads == 1 ? std::vector<Tensor>{k} : split(k, 1, head_sizes);
    const std::vector<Tensor> vs = heads == 1 ? std::vector<Tensor>{v} : split(v, 1, head_sizes);

    Tensor key_mask;
    if (masked) key_mask = key_mask_matrix(*masked);
    if (capture) {
        capture->seq_len = L;
        capture->weights.assign(static_cast<std::size_t>(L) * L, 0.0);
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (int hh = 0; hh < heads; ++hh) {
        Tensor logits;
        {
            KindScope kind(tape, MacKind::attention);
            logits = scale(matmul(qs[static_cast<std::size_t>(hh)],
                                  transpose(ks[static_cast<std::size_t>(hh)])),
                           inv_sqrt_d);
        }
        if (logit_bias) logits = add(logits, (*logit_bias)[static_cast<std::size_t>(hh)]);
        if (masked) logits = add(logits, key_mask);
        const Tensor w = softmax(logits, 1);
        if (capture)
            for (std::size_t i = 0; i < capture->weights.size(); ++i)
                capture->weights[i] += w.data()[i] / heads;
        KindScope kind(tape, MacKind::attention);
        head_outs.push_back(matmul(w, vs[static_cast<std::size_t>(hh)]));
    }
    const Tensor o = heads == 1 ? head_outs[0] : concat(1, head_outs);
    Tensor delta;
    {
        KindScope kind(tape, MacKind::projection);
        delta = add_rowwise(matmul(o, p.wo), p.bo);
    }
    if (masked) delta = mul(delta, row_keep_matrix(*masked, c));
    return add(x, delta);
}

Tensor mlp(const Tensor& x, const BoundMlp& p, const std::vector<bool>* masked) {
    const Tensor h = layernorm(x, p.norm_gain, p.norm_bias, 1e-5);
    const Tensor a = add_rowwise(matmul(h, p.w1), p.b1);
    Tensor delta = add_rowwise(matmul(gelu(a), p.w2), p.b2);
    if (masked) delta = mul(delta, row_keep_matrix(*masked, x.cols()));
    return add(x, delta);
}

Tensor transformer_stage(const Tensor& seq, const BoundStage& p, int heads,
                         const std::vector<bool>* masked, const std::vector<Tensor>* logit_bias,
                         AttnCapture* capture) {
    return mlp(msa(seq, p.attn, heads, masked, logit_bias, capture), p.mlp, masked);
}

std::vector<Tensor> build_bias_matrices(const Tensor& table, const RelBiasLayout& layout,
                                        int heads) {
    if (table.rank() != 2 || table.rows() != layout.table_rows || table.cols() != heads)
        throw DimensionError("bias table " + shape_str(table.shape()) + " does not match layout (" +
                             std::to_string(layout.table_rows) + " rows, " +
                             std::to_string(heads) + " heads)");
    const Tensor gathered = gather_rows(table, layout.index_map);
    const int L = layout.seq_len;
    std::vector<Tensor> out;
    if (heads == 1) {
        out.push_back(reshape(gathered, {L, L}));
        return out;
    }
    const std::vector<Tensor> per_head = split(gathered, 1, std::vector<int>(static_cast<std::size_t>(heads), 1));
    out.reserve(static_cast<std::size_t>(heads));
    for (const Tensor& t : per_head) out.push_back(reshape(t, {L, L}));
    return out;
}

WMsaOut w_msa(const Tensor& visual, const Tensor& window_tokens, int n_windows,
              const BoundStage& stage, int heads, const RelBiasLayout* bias_layout,
              const Tensor* bias_table, AttnCapture* capture, int capture_window) {
    if (visual.rank() != 2 || visual.rows() % n_windows)
        throw DimensionError("w_msa: visual tokens " + shape_str(visual.shape()) +
                             " do not split into " + std::to_string(n_windows) + " windows");
    const int n_u = visual.rows() / n_windows;
    const bool with_tokens = window_tokens.defined();
    int n_v = 0;
    if (with_tokens) {
        if (window_tokens.rows() % n_windows)
            throw DimensionError("w_msa: window tokens " + shape_str(window_tokens.shape()) +
                                 " do not split into " + std::to_string(n_windows) + " windows");
        n_v = window_tokens.rows() / n_windows;
    }

    Tape* tape = visual.on_tape() ? visual.tape() : stage.attn.wq.tape();
    StageScope sc(tape, AttnStage::w_msa);

    std::vector<Tensor> bias;
    if (bias_layout && bias_table) {
        if (bias_layout->seq_len != n_u + n_v)
            throw DimensionError("w_msa: bias layout is for sequence length " +
                                 std::to_string(bias_layout->seq_len) + ", window has " +
                                 std::to_string(n_u + n_v));
        bias = build_bias_matrices(*bias_table, *bias_layout, heads);
    }

    const std::vector<Tensor> u_parts =
        n_windows == 1 ? std::vector<Tensor>{visual}
                       : split(visual, 0, std::vector<int>(static_cast<std::size_t>(n_windows), n_u));
    std::vector<Tensor> v_parts;
    if (with_tokens)
        v_parts = n_windows == 1
                      ? std::vector<Tensor>{window_tokens}
                      : split(window_tokens, 0, std::vector<int>(static_cast<std::size_t>(n_windows), n_v));

    std::vector<Tensor> u_out, v_out;
    u_out.reserve(static_cast<std::size_t>(n_windows));
    v_out.reserve(static_cast<std::size_t>(n_windows));
    for (int n = 0; n < n_windows; ++n) {
        Tensor seq = with_tokens
                         ? concat(0, {u_parts[static_cast<std::size_t>(n)], v_parts[static_cast<std::size_t>(n)]})
                         : u_parts[static_cast<std::size_t>(n)];
        AttnCapture* cap = (capture && n == capture_window) ? capture : nullptr;
        seq = transformer_stage(seq, stage, heads, nullptr, bias.empty() ? nullptr : &bias, cap);
        if (with_tokens) {
            std::vector<Tensor> parts = split(seq, 0, {n_u, n_v});
            u_out.push_back(parts[0]);
            v_out.push_back(parts[1]);
        } else {
            u_out.push_back(seq);
        }
    }
    WMsaOut out;
    out.visual = n_windows == 1 ? u_out[0] : concat(0, u_out);
    if (with_tokens) out.window_tokens = n_windows == 1 ? v_out[0] : concat(0, v_out);
    return out;
}

GMsaOut g_msa(const Tensor& window_tokens, const Tensor& volume_subset, const BoundStage& stage,
              int heads, AttnCapture* capture) {
    if (!window_tokens.defined())
        throw ContractError("g_msa: window tokens are required");
    Tape* tape = window_tokens.on_tape() ? window_tokens.tape() : stage.attn.wq.tape();
    StageScope sc(tape, AttnStage::g_msa);
    GMsaOut out;
    if (!volume_subset.defined()) {
        out.window_tokens = transformer_stage(window_tokens, stage, heads, nullptr, nullptr, capture);
        return out;
    }
    if (volume_subset.rows() < 1) throw ContractError("g_msa: empty volume-token subset");
    const Tensor seq = concat(0, {window_tokens, volume_subset});
    const Tensor y = transformer_stage(seq, stage, heads, nullptr, nullptr, capture);
    std::vector<Tensor> parts = split(y, 0, {window_tokens.rows(), volume_subset.rows()});
    out.window_tokens = parts[0];
    out.volume_subset = parts[1];
    return out;
}

Tensor global_msa(const Tensor& bank_tokens, const std::vector<bool>& unseen_rows,
                  const BoundStage& stage, int heads, AttnCapture* capture) {
    Tape* tape = bank_tokens.on_tape() ? bank_tokens.tape() : stage.attn.wq.tape();
    StageScope sc(tape, AttnStage::global_msa);
    bool any_unseen = false;
    for (bool m : unseen_rows) any_unseen |= m;
    return transformer_stage(bank_tokens, stage, heads, any_unseen ? &unseen_rows : nullptr,
                             nullptr, capture);
}

FineBlockState fine_block(const FineBlockState& in, int n_windows, MemoryBank* bank,
                          const IntersectionSet* inter, const BoundFineBlock& params,
                          const FineBlockConfig& cfg, FineBlockCapture* capture) {
    FineBlockState out;
    const WMsaOut w_out =
        w_msa(in.visual, in.window_tokens, n_windows, params.w_stage, cfg.heads,
              params.bias_layout, params.bias_table.defined() ? &params.bias_table : nullptr,
              capture ? &capture->w_msa : nullptr, capture ? capture->window : 0);
    out.visual = w_out.visual;
    if (cfg.mode == BlockMode::no_memory) return out;

    Tensor gathered;
    if (cfg.mode == BlockMode::full) {
        if (!bank || !inter || !in.bank_tokens.defined())
            throw ContractError("fine_block: full mode needs a bank, an intersection set and "
                                "bank tokens");
        if (inter->cells.empty()) throw ContractError("fine_block: empty intersection set");
        bank->mark_seen(*inter);
        gathered = gather_rows(in.bank_tokens, bank->intersection_rows(*inter));
    }
    const GMsaOut g_out = g_msa(w_out.window_tokens, gathered, params.g_stage, cfg.heads,
                                capture ? &capture->g_msa : nullptr);
    out.window_tokens = g_out.window_tokens;
    if (cfg.mode != BlockMode::full) return out;

    const Tensor bank_work =
        scatter_rows(in.bank_tokens, bank->intersection_rows(*inter), g_out.volume_subset);
    out.bank_tokens = global_msa(bank_work, bank->unseen_row_mask(), params.global_stage,
                                 cfg.heads, capture ? &capture->global_msa : nullptr);
    return out;
}

} // namespace fine
