#include <doctest.h>

#include <cmath>

#include "fine/attention.hpp"
#include "test_support.hpp"

using namespace fine;
using namespace fine::test;

namespace {

Tensor affine_rand(std::vector<int> shape, Rng& rng, double base, double spread) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = base + spread * rng.gaussian();
    return t;
}

BoundAttn random_attn(int c, Rng& rng) {
    BoundAttn p;
    p.norm_gain = affine_rand({c}, rng, 1.0, 0.1);
    p.norm_bias = affine_rand({c}, rng, 0.0, 0.1);
    p.wq = affine_rand({c, c}, rng, 0.0, 0.3);
    p.bq = affine_rand({c}, rng, 0.0, 0.1);
    p.wk = affine_rand({c, c}, rng, 0.0, 0.3);
    p.bk = affine_rand({c}, rng, 0.0, 0.1);
    p.wv = affine_rand({c, c}, rng, 0.0, 0.3);
    p.bv = affine_rand({c}, rng, 0.0, 0.1);
    p.wo = affine_rand({c, c}, rng, 0.0, 0.3);
    p.bo = affine_rand({c}, rng, 0.0, 0.1);
    return p;
}

BoundMlp random_mlp(int c, int ratio, Rng& rng) {
    BoundMlp p;
    p.norm_gain = affine_rand({c}, rng, 1.0, 0.1);
    p.norm_bias = affine_rand({c}, rng, 0.0, 0.1);
    p.w1 = affine_rand({c, c * ratio}, rng, 0.0, 0.3);
    p.b1 = affine_rand({c * ratio}, rng, 0.0, 0.1);
    p.w2 = affine_rand({c * ratio, c}, rng, 0.0, 0.3);
    p.b2 = affine_rand({c}, rng, 0.0, 0.1);
    return p;
}

// A standalone FINE block with its own parameter store, for block-level tests.
struct BlockFixture {
    FineBlockConfig cfg;
    Dims3 window;
    RelBiasLayout layout;
    ParamStore store;
    FineBlockIds ids;

    BlockFixture(BlockMode mode, int channels, int heads, Dims3 window_size, bool bias, Rng& rng,
                 double weight_scale = 0.0) {
        cfg.channels = channels;
        cfg.heads = heads;
        cfg.mlp_ratio = 2;
        cfg.rel_pos_bias = bias;
        cfg.mode = mode;
        window = window_size;
        layout = relative_bias_layout(window_size,
                                      mode == BlockMode::no_memory ? 0 : cfg.tokens_per_window);
        ids = register_fine_block(store, "block", cfg, window_size, rng);
        if (weight_scale > 0.0)
            for (int i = 0; i < store.count(); ++i) {
                Tensor& v = store.value(i);
                for (std::size_t j = 0; j < v.size(); ++j)
                    v.data()[j] = weight_scale * rng.gaussian();
            }
    }

    BoundFineBlock bind(const Binding& b) const { return bind_fine_block(b, ids, cfg, &layout); }
};

} // namespace

TEST_CASE("msa on a single token has weight exactly 1") {
    Rng rng(21);
    const int c = 6;
    const BoundAttn p = random_attn(c, rng);
    const Tensor x = random_tensor({1, c}, rng);
    AttnCapture cap;
    const Tensor y = msa(x, p, 2, nullptr, nullptr, &cap);
    CHECK(cap.seq_len == 1);
    CHECK(cap.weights[0] == 1.0);

    // output = input + out-proj of the value projection of the normed input
    const Tensor h = layernorm(x, p.norm_gain, p.norm_bias, 1e-5);
    const Tensor v = add_rowwise(matmul(h, p.wv), p.bv);
    const Tensor expect = add(x, add_rowwise(matmul(v, p.wo), p.bo));
    CHECK(max_abs_diff(y, expect) < 1e-14);
}

TEST_CASE("msa treats identical tokens identically") {
    Rng rng(22);
    const int c = 8;
    const BoundAttn p = random_attn(c, rng);
    Tensor x = random_tensor({4, c}, rng);
    for (int j = 0; j < c; ++j)
        x.data()[static_cast<std::size_t>(c) + j] = x.data()[static_cast<std::size_t>(j)];
    const Tensor y = msa(x, p, 2);
    for (int j = 0; j < c; ++j) CHECK(y.at2(0, j) == y.at2(1, j));
}

TEST_CASE("masking a token equals removing it, bit for bit") {
    Rng rng(23);
    const int c = 8, L = 5;
    const BoundAttn pa = random_attn(c, rng);
    const BoundMlp pm = random_mlp(c, 2, rng);
    const Tensor x = random_tensor({L, c}, rng);
    std::vector<bool> masked(L, false);
    masked[2] = true;

    const Tensor y_masked = mlp(msa(x, pa, 2, &masked), pm, &masked);

    std::vector<int> keep{0, 1, 3, 4};
    const Tensor y_removed = mlp(msa(gather_rows(x, keep), pa, 2), pm);

    for (std::size_t r = 0; r < keep.size(); ++r)
        for (int j = 0; j < c; ++j)
            CHECK(y_masked.at2(keep[r], j) == y_removed.at2(static_cast<int>(r), j));

    // the masked row passes through unchanged
    for (int j = 0; j < c; ++j) CHECK(y_masked.at2(2, j) == x.at2(2, j));
}

TEST_CASE("msa rejects a fully masked key set") {
    Rng rng(24);
    const BoundAttn p = random_attn(4, rng);
    const Tensor x = random_tensor({3, 4}, rng);
    const std::vector<bool> all(3, true);
    CHECK_THROWS_AS(msa(x, p, 2, &all), ContractError);
}

TEST_CASE("w_msa with one window equals one transformer stage") {
    Rng rng(25);
    BlockFixture fx(BlockMode::full, 8, 2, Dims3{2, 2, 1}, true, rng, 0.2);
    const Tensor u = random_tensor({4, 8}, rng);
    const Tensor v = random_tensor({1, 8}, rng);

    Tape t1;
    Binding b1(t1, fx.store);
    BoundFineBlock bound1 = fx.bind(b1);
    const WMsaOut out = w_msa(t1.leaf(u), t1.leaf(v), 1, bound1.w_stage, fx.cfg.heads,
                              bound1.bias_layout, &bound1.bias_table);

    Tape t2;
    Binding b2(t2, fx.store);
    BoundFineBlock bound2 = fx.bind(b2);
    const std::vector<Tensor> bias = build_bias_matrices(bound2.bias_table, fx.layout, fx.cfg.heads);
    const Tensor y = transformer_stage(concat(0, {t2.leaf(u), t2.leaf(v)}), bound2.w_stage,
                                       fx.cfg.heads, nullptr, &bias);
    const std::vector<Tensor> parts = split(y, 0, {4, 1});
    CHECK(bit_equal(out.visual.detached_copy(), parts[0].detached_copy()));
    CHECK(bit_equal(out.window_tokens.detached_copy(), parts[1].detached_copy()));
}

TEST_CASE("w_msa keeps windows isolated (Jacobian sparsity)") {
    Rng rng(26);
    BlockFixture fx(BlockMode::full, 8, 2, Dims3{2, 1, 1}, true, rng, 0.3);
    const int n_windows = 3, n_u = 2;
    const Tensor u = random_tensor({n_windows * n_u, 8}, rng);
    const Tensor v = random_tensor({n_windows, 8}, rng);

    Tape tape;
    Binding binding(tape, fx.store);
    BoundFineBlock bound = fx.bind(binding);
    const Tensor ub = tape.leaf(u);
    const WMsaOut out = w_msa(ub, tape.leaf(v), n_windows, bound.w_stage, fx.cfg.heads,
                              bound.bias_layout, &bound.bias_table);
    // loss reads only window 1
    tape.backward(sum(gather_rows(out.visual, {2, 3})));
    const Tensor du = tape.grad(ub);
    for (int r = 0; r < n_u; ++r) // window 0 rows
        for (int j = 0; j < 8; ++j) CHECK(du.at2(r, j) == 0.0);
    bool any = false;
    for (int r = 2; r < 4; ++r)
        for (int j = 0; j < 8; ++j) any |= du.at2(r, j) != 0.0;
    CHECK(any);
}

TEST_CASE("w_msa is equivariant to window order") {
    Rng rng(27);
    BlockFixture fx(BlockMode::full, 6, 2, Dims3{2, 1, 1}, true, rng, 0.3);
    const int n_windows = 3;
    const Tensor u = random_tensor({n_windows * 2, 6}, rng);
    const Tensor v = random_tensor({n_windows, 6}, rng);

    Tape t1;
    Binding b1(t1, fx.store);
    BoundFineBlock bound1 = fx.bind(b1);
    const WMsaOut base = w_msa(t1.leaf(u), t1.leaf(v), n_windows, bound1.w_stage, fx.cfg.heads,
                               bound1.bias_layout, &bound1.bias_table);

    // windows reordered 2,0,1
    const Tensor u_perm = gather_rows(u, {4, 5, 0, 1, 2, 3});
    const Tensor v_perm = gather_rows(v, {2, 0, 1});
    Tape t2;
    Binding b2(t2, fx.store);
    BoundFineBlock bound2 = fx.bind(b2);
    const WMsaOut perm = w_msa(t2.leaf(u_perm), t2.leaf(v_perm), n_windows, bound2.w_stage,
                               fx.cfg.heads, bound2.bias_layout, &bound2.bias_table);

    const Tensor expect_u = gather_rows(base.visual.detached_copy(), {4, 5, 0, 1, 2, 3});
    const Tensor expect_v = gather_rows(base.window_tokens.detached_copy(), {2, 0, 1});
    CHECK(bit_equal(perm.visual.detached_copy(), expect_u));
    CHECK(bit_equal(perm.window_tokens.detached_copy(), expect_v));
}

TEST_CASE("g_msa couples every window token pair") {
    Rng rng(28);
    BlockFixture fx(BlockMode::full, 6, 2, Dims3{2, 1, 1}, false, rng, 0.3);
    const int n_windows = 3;
    const Tensor v = random_tensor({n_windows, 6}, rng);
    const Tensor w = random_tensor({2, 6}, rng);

    for (int i = 0; i < n_windows; ++i) {
        Tape tape;
        Binding binding(tape, fx.store);
        BoundFineBlock bound = fx.bind(binding);
        const Tensor vb = tape.leaf(v);
        const GMsaOut out = g_msa(vb, tape.leaf(w), bound.g_stage, fx.cfg.heads);
        tape.backward(sum(gather_rows(out.window_tokens, {i})));
        const Tensor dv = tape.grad(vb);
        for (int j = 0; j < n_windows; ++j) {
            bool any = false;
            for (int k = 0; k < 6; ++k) any |= dv.at2(j, k) != 0.0;
            CHECK(any);
        }
    }
}

TEST_CASE("fine_block matches a hand-assembled pipeline at M=1, N=1") {
    Rng rng(29);
    BlockFixture fx(BlockMode::full, 8, 2, Dims3{2, 2, 1}, true, rng, 0.2);
    const Tensor u = random_tensor({4, 8}, rng);
    const Tensor v = random_tensor({1, 8}, rng);

    Rng bank_rng(5);
    MemoryBank bank(1, 1, 8, bank_rng);
    IntersectionSet inter;
    inter.cells = {0};

    Tape t1;
    Binding b1(t1, fx.store);
    FineBlockState in;
    in.visual = t1.leaf(u);
    in.window_tokens = t1.leaf(v);
    in.bank_tokens = t1.leaf(bank.tokens());
    const FineBlockState out = fine_block(in, 1, &bank, &inter, fx.bind(b1), fx.cfg);

    // reference composition of the three stages
    Rng bank_rng2(5);
    MemoryBank bank2(1, 1, 8, bank_rng2);
    Tape t2;
    Binding b2(t2, fx.store);
    BoundFineBlock bound = fx.bind(b2);
    const Tensor ub = t2.leaf(u), vb = t2.leaf(v), wb = t2.leaf(bank2.tokens());
    const std::vector<Tensor> bias = build_bias_matrices(bound.bias_table, fx.layout, fx.cfg.heads);
    const Tensor s1 = transformer_stage(concat(0, {ub, vb}), bound.w_stage, 2, nullptr, &bias);
    const std::vector<Tensor> p1 = split(s1, 0, {4, 1});
    const Tensor gathered = gather_rows(wb, {0});
    const Tensor s2 = transformer_stage(concat(0, {p1[1], gathered}), bound.g_stage, 2);
    const std::vector<Tensor> p2 = split(s2, 0, {1, 1});
    const Tensor bank_work = scatter_rows(wb, {0}, p2[1]);
    const Tensor s3 = transformer_stage(bank_work, bound.global_stage, 2); // all cells seen

    CHECK(bit_equal(out.visual.detached_copy(), p1[0].detached_copy()));
    CHECK(bit_equal(out.window_tokens.detached_copy(), p2[0].detached_copy()));
    CHECK(bit_equal(out.bank_tokens.detached_copy(), s3.detached_copy()));
}

TEST_CASE("zero projections leave only the MLP residual on visual tokens") {
    Rng rng(30);
    BlockFixture fx(BlockMode::full, 6, 2, Dims3{2, 1, 1}, false, rng);
    // zero every attention projection of the window stage
    for (int id : {fx.ids.w_stage.attn.wq, fx.ids.w_stage.attn.bq, fx.ids.w_stage.attn.wk,
                   fx.ids.w_stage.attn.bk, fx.ids.w_stage.attn.wv, fx.ids.w_stage.attn.bv,
                   fx.ids.w_stage.attn.wo, fx.ids.w_stage.attn.bo}) {
        Tensor& t = fx.store.value(id);
        std::fill(t.data(), t.data() + t.size(), 0.0);
    }
    // give the MLP real weights
    for (int id : {fx.ids.w_stage.mlp.w1, fx.ids.w_stage.mlp.b1, fx.ids.w_stage.mlp.w2,
                   fx.ids.w_stage.mlp.b2}) {
        Tensor& t = fx.store.value(id);
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.3 * rng.gaussian();
    }

    const Tensor u = random_tensor({4, 6}, rng);
    const Tensor v = random_tensor({2, 6}, rng);
    Rng bank_rng(7);
    MemoryBank bank(2, 1, 6, bank_rng);
    IntersectionSet inter;
    inter.cells = {0};

    Tape tape;
    Binding binding(tape, fx.store);
    BoundFineBlock bound = fx.bind(binding);
    FineBlockState in;
    in.visual = tape.leaf(u);
    in.window_tokens = tape.leaf(v);
    in.bank_tokens = tape.leaf(bank.tokens());
    const FineBlockState out = fine_block(in, 2, &bank, &inter, bound, fx.cfg);

    const Tensor expect = mlp(u, bound.w_stage.mlp); // per-token, windows do not matter
    CHECK(max_abs_diff(out.visual.detached_copy(), expect.detached_copy()) == 0.0);
}

TEST_CASE("fine_block attention rows are distributions") {
    Rng rng(31);
    BlockFixture fx(BlockMode::full, 8, 2, Dims3{2, 2, 1}, true, rng, 0.3);
    const int n_windows = 2;
    const Tensor u = random_tensor({n_windows * 4, 8}, rng);
    const Tensor v = random_tensor({n_windows, 8}, rng);
    Rng bank_rng(3);
    MemoryBank bank(4, 1, 8, bank_rng);
    IntersectionSet inter;
    inter.cells = {1, 2};

    FineBlockCapture cap;
    cap.window = 1;
    Tape tape;
    Binding binding(tape, fx.store);
    FineBlockState in;
    in.visual = tape.leaf(u);
    in.window_tokens = tape.leaf(v);
    in.bank_tokens = tape.leaf(bank.tokens());
    fine_block(in, n_windows, &bank, &inter, fx.bind(binding), fx.cfg, &cap);

    for (const AttnCapture* c : {&cap.w_msa, &cap.g_msa, &cap.global_msa}) {
        REQUIRE(c->seq_len > 0);
        for (int r = 0; r < c->seq_len; ++r) {
            double s = 0.0;
            for (int j = 0; j < c->seq_len; ++j)
                s += c->weights[static_cast<std::size_t>(r) * c->seq_len + j];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("full FINE block passes finite differences on every parameter") {
    Rng rng(32);
    BlockFixture fx(BlockMode::full, 4, 2, Dims3{2, 1, 1}, true, rng, 0.25);
    const int n_windows = 2;
    Tensor u = random_tensor({n_windows * 2, 4}, rng);
    Tensor v = random_tensor({n_windows, 4}, rng);
    Rng bank_rng(11);
    MemoryBank bank(4, 1, 4, bank_rng);
    IntersectionSet inter;
    inter.cells = {1, 2};
    bank.mark_seen(inter); // stable mask across finite-difference evals

    auto eval = [&]() {
        Tape tape;
        Binding binding(tape, fx.store);
        FineBlockState in;
        in.visual = tape.leaf(u);
        in.window_tokens = tape.leaf(v);
        in.bank_tokens = tape.leaf(bank.tokens());
        const FineBlockState out = fine_block(in, n_windows, &bank, &inter, fx.bind(binding), fx.cfg);
        return add(add(sum(out.visual), sum(out.window_tokens)), sum(out.bank_tokens)).at(0);
    };

    Tape tape;
    Binding binding(tape, fx.store);
    FineBlockState in;
    in.visual = tape.leaf(u);
    in.window_tokens = tape.leaf(v);
    in.bank_tokens = tape.leaf(bank.tokens());
    const FineBlockState out = fine_block(in, n_windows, &bank, &inter, fx.bind(binding), fx.cfg);
    tape.backward(add(add(sum(out.visual), sum(out.window_tokens)), sum(out.bank_tokens)));

    std::vector<Tensor> params{u, v, bank.tokens()};
    std::vector<Tensor> grads{tape.grad(in.visual), tape.grad(in.window_tokens),
                              tape.grad(in.bank_tokens)};
    for (int i = 0; i < fx.store.count(); ++i) {
        params.push_back(fx.store.value(i));
        grads.push_back(tape.grad(binding[i]));
    }
    CHECK(max_grad_rel_err(eval, params, grads) < 1e-5);
}
