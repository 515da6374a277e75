#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "fine/tensor.hpp"
#include "test_support.hpp"

using namespace fine;
using namespace fine::test;

TEST_CASE("matmul basics") {
    const Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor B = Tensor::from({2, 2}, {3, 4, 5, 6});
    CHECK(bit_equal(matmul(I, B), B));

    const Tensor a = Tensor::from({1, 2}, {1, 2});
    const Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(matmul(a, b).at(0) == 11.0);

    CHECK_THROWS_AS(matmul(a, a), DimensionError);
    try {
        matmul(a, a);
    } catch (const DimensionError& e) {
        // the message names both shapes
        CHECK(std::string(e.what()).find("[1,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches the closed form") {
    // d sum(A*B) / dA at A=[[1,2]], B=[[3],[4]] is [[3,4]]
    Tape tape;
    const Tensor a = tape.leaf(Tensor::from({1, 2}, {1, 2}));
    const Tensor b = tape.leaf(Tensor::from({2, 1}, {3, 4}));
    tape.backward(sum(matmul(a, b)));
    const Tensor da = tape.grad(a);
    CHECK(da.at(0) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(da.at(1) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("softmax values") {
    const Tensor z = softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(z.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-15));

    const Tensor big = softmax(Tensor::from({2}, {1000, 1000}), 0);
    CHECK(big.at(0) == 0.5);
    CHECK(big.at(1) == 0.5);

    const Tensor lg = softmax(Tensor::from({2}, {0.0, std::log(3.0)}), 0);
    CHECK(lg.at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(lg.at(1) == doctest::Approx(0.75).epsilon(1e-12));

    CHECK_THROWS_AS(softmax(Tensor::from({2}, {std::nan(""), 0.0}), 0), NumericError);
}

TEST_CASE("softmax rows are a distribution") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({5, 9}, rng, 3.0);
        const Tensor y = softmax(x, 1);
        for (int r = 0; r < 5; ++r) {
            double s = 0.0;
            for (int c = 0; c < 9; ++c) {
                const double v = y.at2(r, c);
                CHECK(v >= 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("layernorm values") {
    const Tensor gain = Tensor::from({4}, {1, 1, 1, 1});
    const Tensor bias = Tensor::from({4}, {0, 0, 0, 0});
    const Tensor constant = Tensor::from({2, 4}, {5, 5, 5, 5, -1, -1, -1, -1});
    const Tensor y = layernorm(constant, gain, bias, 1e-5);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);

    const Tensor two = Tensor::from({1, 2}, {1, 3});
    const Tensor g2 = Tensor::from({2}, {1, 1});
    const Tensor b2 = Tensor::from({2}, {0, 0});
    const Tensor z = layernorm(two, g2, b2, 0.0);
    CHECK(z.at(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(z.at(1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("elementwise op examples") {
    CHECK(gelu(Tensor::scalar(0.0)).at(0) == 0.0);

    const Tensor g = gather_rows(Tensor::from({3, 1}, {1, 2, 3}), {2, 0});
    CHECK(g.at(0) == 3.0);
    CHECK(g.at(1) == 1.0);
    CHECK_THROWS_AS(gather_rows(Tensor::from({3, 1}, {1, 2, 3}), {3}), BoundsError);

    const Tensor A = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor B = Tensor::from({1, 2}, {5, 6});
    const std::vector<Tensor> parts = split(concat(0, {A, B}), 0, {2, 1});
    CHECK(bit_equal(parts[0], A));
    CHECK(bit_equal(parts[1], B));
}

TEST_CASE("concat/split and gather/scatter round-trip bit-exactly") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int r1 = rng.range_int(1, 6), r2 = rng.range_int(1, 6), c = rng.range_int(1, 5);
        const Tensor a = random_tensor({r1, c}, rng);
        const Tensor b = random_tensor({r2, c}, rng);
        const std::vector<Tensor> back = split(concat(0, {a, b}), 0, {r1, r2});
        CHECK(bit_equal(back[0], a));
        CHECK(bit_equal(back[1], b));

        const Tensor base = random_tensor({r1 + r2, c}, rng);
        std::vector<int> idx;
        for (int i = 0; i < r1; ++i) idx.push_back(rng.range_int(0, r1 + r2 - 1));
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
        const Tensor rows = random_tensor({static_cast<int>(idx.size()), c}, rng);
        const Tensor scattered = scatter_rows(base, idx, rows);
        CHECK(bit_equal(gather_rows(scattered, idx), rows));
    }
}

TEST_CASE("forward results are deterministic") {
    Rng rng(3);
    const Tensor x = random_tensor({4, 6}, rng);
    const Tensor w = random_tensor({6, 6}, rng);
    const Tensor y1 = softmax(matmul(gelu(x), w), 1);
    const Tensor y2 = softmax(matmul(gelu(x), w), 1);
    CHECK(bit_equal(y1, y2));
}

TEST_CASE("backward contract") {
    SUBCASE("loss must be scalar") {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
        const Tensor y = add(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }
    SUBCASE("backward may run once per tape") {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::from({2}, {1, 2}));
        const Tensor loss = sum(x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), ContractError);
    }
    SUBCASE("loss = sum(x) gives all-ones gradient") {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
        tape.backward(sum(x));
        const Tensor g = tape.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == 1.0);
    }
    SUBCASE("loss = sum(x^2)/2 gives x back") {
        Tape tape;
        const Tensor x = tape.leaf(Tensor::from({2}, {1, -2}));
        tape.backward(scale(sum(mul(x, x)), 0.5));
        const Tensor g = tape.grad(x);
        CHECK(g.at(0) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(g.at(1) == doctest::Approx(-2.0).epsilon(1e-12));
    }
    SUBCASE("two tapes cannot mix") {
        Tape t1, t2;
        const Tensor a = t1.leaf(Tensor::from({2}, {1, 2}));
        const Tensor b = t2.leaf(Tensor::from({2}, {3, 4}));
        CHECK_THROWS_AS(add(a, b), ContractError);
    }
}

TEST_CASE("every op passes central finite differences on random inputs") {
    Rng rng(42);
    const double tol = 1e-5;

    auto check_unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op,
                           std::vector<int> shape) {
        CAPTURE(name);
        Tensor x = random_tensor(shape, rng);
        Tensor weights; // random linear functional over the op output
        {
            Tape probe;
            weights = random_tensor(op(probe.leaf(x)).shape(), rng);
        }
        auto eval = [&]() {
            Tape tape;
            const Tensor xb = tape.leaf(x);
            return sum(mul(op(xb), weights)).at(0);
        };
        Tape tape;
        const Tensor xb = tape.leaf(x);
        tape.backward(sum(mul(op(xb), weights)));
        std::vector<Tensor> params{x};
        const std::vector<Tensor> grads{tape.grad(xb)};
        CHECK(max_grad_rel_err(eval, params, grads) < tol);
    };

    check_unary("softmax_rank1", [](const Tensor& t) { return softmax(t, 0); }, {7});
    check_unary("softmax_rank2", [](const Tensor& t) { return softmax(t, 1); }, {3, 5});
    check_unary("softmax_rank3", [](const Tensor& t) { return softmax(t, 2); }, {2, 3, 4});
    check_unary("softmax_mid_axis", [](const Tensor& t) { return softmax(t, 1); }, {2, 3, 4});
    check_unary("gelu", [](const Tensor& t) { return gelu(t); }, {3, 4});
    check_unary("scale", [](const Tensor& t) { return scale(t, -1.7); }, {5});
    check_unary("transpose", [](const Tensor& t) { return transpose(t); }, {3, 4});
    check_unary("reshape", [](const Tensor& t) { return reshape(t, {4, 3}); }, {3, 4});
    check_unary("mean", [](const Tensor& t) { return mean(t); }, {4, 2});
    check_unary("gather", [](const Tensor& t) { return gather_rows(t, {2, 0, 2}); }, {3, 4});
    check_unary("log_offset", [](const Tensor& t) {
        return log(add(mul(t, t), Tensor::full(t.shape(), 0.5)));
    }, {3, 3});

    auto check_binary = [&](const char* name,
                            const std::function<Tensor(const Tensor&, const Tensor&)>& op,
                            std::vector<int> sa, std::vector<int> sb) {
        CAPTURE(name);
        Tensor a = random_tensor(sa, rng);
        Tensor b = random_tensor(sb, rng);
        if (std::string(name) == "div")
            for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] = 2.0 + std::abs(b.data()[i]);
        auto eval = [&]() {
            Tape tape;
            const Tensor ab = tape.leaf(a);
            const Tensor bb = tape.leaf(b);
            return sum(op(ab, bb)).at(0);
        };
        Tape tape;
        const Tensor ab = tape.leaf(a);
        const Tensor bb = tape.leaf(b);
        tape.backward(sum(op(ab, bb)));
        std::vector<Tensor> params{a, b};
        const std::vector<Tensor> grads{tape.grad(ab), tape.grad(bb)};
        CHECK(max_grad_rel_err(eval, params, grads) < tol);
    };

    check_binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {3, 4}, {4, 2});
    check_binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {2, 3}, {2, 3});
    check_binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {2, 3}, {2, 3});
    check_binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, {2, 3}, {2, 3});
    check_binary("add_rowwise",
                 [](const Tensor& a, const Tensor& b) { return add_rowwise(a, b); }, {3, 4}, {4});
    check_binary("concat0", [](const Tensor& a, const Tensor& b) { return concat(0, {a, b}); },
                 {2, 3}, {4, 3});
    check_binary("concat1", [](const Tensor& a, const Tensor& b) { return concat(1, {a, b}); },
                 {3, 2}, {3, 4});
    check_binary("split", [](const Tensor& a, const Tensor& b) {
        return mul(split(a, 1, {2, 2})[1], b);
    }, {3, 4}, {3, 2});
    check_binary("scatter", [](const Tensor& a, const Tensor& b) {
        return scatter_rows(a, {1, 3}, b);
    }, {4, 3}, {2, 3});
    check_binary("layernorm_affine", [](const Tensor& a, const Tensor& b) {
        return layernorm(a, b, b, 1e-5);
    }, {4, 5}, {5});
}

TEST_CASE("layernorm input gradient matches finite differences") {
    Rng rng(9);
    Tensor x = random_tensor({4, 6}, rng);
    const Tensor gain = random_tensor({6}, rng);
    const Tensor bias = random_tensor({6}, rng);
    const Tensor w = random_tensor({4, 6}, rng);
    auto eval = [&]() {
        Tape tape;
        const Tensor xb = tape.leaf(x);
        return sum(mul(layernorm(xb, gain, bias, 1e-5), w)).at(0);
    };
    Tape tape;
    const Tensor xb = tape.leaf(x);
    tape.backward(sum(mul(layernorm(xb, gain, bias, 1e-5), w)));
    std::vector<Tensor> params{x};
    const std::vector<Tensor> grads{tape.grad(xb)};
    CHECK(max_grad_rel_err(eval, params, grads) < 1e-6);
}
