#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fine/attention.hpp"
#include "fine/memory_bank.hpp"
#include "test_support.hpp"

using namespace fine;
using namespace fine::test;

namespace {

// A one-stage parameter set with real-sized weights for masking tests.
StageIds make_stage(ParamStore& store, int c, Rng& rng) {
    const StageIds ids = register_stage(store, "s", c, 2, rng);
    for (int i = 0; i < store.count(); ++i) {
        Tensor& t = store.value(i);
        for (std::size_t j = 0; j < t.size(); ++j) t.data()[j] = 0.3 * rng.gaussian();
    }
    return ids;
}

} // namespace

TEST_CASE("gather marks cells seen and is idempotent") {
    Rng rng(1);
    MemoryBank bank(6, 2, 4, rng);
    IntersectionSet inter;
    inter.cells = {1, 2};

    const Tensor g1 = bank.gather_intersection(bank.tokens(), inter);
    CHECK(g1.rows() == 4); // two cells, two tokens each
    CHECK(bank.seen(1));
    CHECK(bank.seen(2));
    CHECK_FALSE(bank.seen(0));
    CHECK_FALSE(bank.seen(3));

    const Tensor g2 = bank.gather_intersection(bank.tokens(), inter);
    CHECK(bit_equal(g1, g2));
    CHECK(bank.seen_count() == 2);

    // row block of a single cell
    IntersectionSet three;
    three.cells = {3};
    const Tensor g3 = bank.gather_intersection(bank.tokens(), three);
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 4; ++j)
            CHECK(g3.at2(t, j) == bank.tokens().at2(3 * 2 + t, j));

    IntersectionSet empty;
    CHECK_THROWS_AS(bank.gather_intersection(bank.tokens(), empty), ContractError);
}

TEST_CASE("unseen_row_mask tracks the seen flags") {
    Rng rng(2);
    MemoryBank bank(4, 1, 4, rng);
    IntersectionSet inter;
    inter.cells = {0, 2};
    bank.mark_seen(inter);
    const std::vector<bool> mask = bank.unseen_row_mask();
    CHECK(mask == std::vector<bool>{false, true, false, true});

    IntersectionSet rest;
    rest.cells = {1, 3};
    bank.mark_seen(rest);
    for (bool m : bank.unseen_row_mask()) CHECK_FALSE(m);
}

TEST_CASE("fully seen bank attends exactly like unmasked attention") {
    Rng rng(3);
    ParamStore store;
    const StageIds ids = make_stage(store, 4, rng);
    MemoryBank bank(3, 1, 4, rng);
    IntersectionSet all;
    all.cells = {0, 1, 2};
    bank.mark_seen(all);

    Tape t1;
    Binding b1(t1, store);
    const Tensor masked_out =
        global_msa(t1.leaf(bank.tokens()), bank.unseen_row_mask(), bind_stage(b1, ids), 2);
    Tape t2;
    Binding b2(t2, store);
    const Tensor plain_out = transformer_stage(t2.leaf(bank.tokens()), bind_stage(b2, ids), 2);
    CHECK(bit_equal(masked_out.detached_copy(), plain_out.detached_copy()));
}

TEST_CASE("masked bank equals the bank with unseen rows removed") {
    Rng rng(4);
    ParamStore store;
    const StageIds ids = make_stage(store, 6, rng);
    MemoryBank bank(5, 1, 6, rng);
    IntersectionSet seen;
    seen.cells = {0, 3, 4};
    bank.mark_seen(seen);

    Tape t1;
    Binding b1(t1, store);
    const Tensor masked_out =
        global_msa(t1.leaf(bank.tokens()), bank.unseen_row_mask(), bind_stage(b1, ids), 2);

    Tape t2;
    Binding b2(t2, store);
    const Tensor kept = gather_rows(bank.tokens(), {0, 3, 4});
    const Tensor removed_out = transformer_stage(t2.leaf(kept), bind_stage(b2, ids), 2);

    const std::vector<int> kept_rows{0, 3, 4};
    for (std::size_t r = 0; r < kept_rows.size(); ++r)
        for (int j = 0; j < 6; ++j)
            CHECK(std::abs(masked_out.at2(kept_rows[r], j) -
                           removed_out.at2(static_cast<int>(r), j)) <= 1e-12);
}

TEST_CASE("unseen tokens get exactly zero gradient and their values cannot leak") {
    Rng rng(5);
    ParamStore store;
    const StageIds ids = make_stage(store, 4, rng);
    MemoryBank bank(4, 1, 4, rng);
    IntersectionSet seen;
    seen.cells = {1, 2};
    bank.mark_seen(seen);

    Tape tape;
    Binding binding(tape, store);
    const Tensor bound = tape.leaf(bank.tokens());
    const Tensor out = global_msa(bound, bank.unseen_row_mask(), bind_stage(binding, ids), 2);
    // read only the seen rows, as the model does
    tape.backward(sum(gather_rows(out, {1, 2})));
    const Tensor g = tape.grad(bound);
    for (int j = 0; j < 4; ++j) {
        CHECK(g.at2(0, j) == 0.0);
        CHECK(g.at2(3, j) == 0.0);
    }

    // outputs for seen rows are invariant to arbitrary changes of unseen rows
    Tensor perturbed = bank.tokens().detached_copy();
    for (int j = 0; j < 4; ++j) {
        perturbed.data()[static_cast<std::size_t>(j)] += 100.0;
        perturbed.data()[static_cast<std::size_t>(3 * 4 + j)] -= 42.0;
    }
    Tape t2;
    Binding b2(t2, store);
    const Tensor out2 =
        global_msa(t2.leaf(perturbed), bank.unseen_row_mask(), bind_stage(b2, ids), 2);
    for (int r : {1, 2})
        for (int j = 0; j < 4; ++j)
            CHECK(std::abs(out.at2(r, j) - out2.at2(r, j)) <= 1e-12);
}

TEST_CASE("bank values persist across gathers within a run") {
    Rng rng(6);
    MemoryBank bank(4, 1, 4, rng);
    IntersectionSet a;
    a.cells = {0};
    bank.gather_intersection(bank.tokens(), a);
    // write something while "processing crop A"
    bank.tokens().data()[0] = 123.5;

    IntersectionSet b;
    b.cells = {0, 1};
    const Tensor g = bank.gather_intersection(bank.tokens(), b);
    CHECK(g.at2(0, 0) == 123.5);
}

TEST_CASE("bank state round-trips bit-exactly") {
    Rng rng(7);
    MemoryBank bank(5, 2, 3, rng);
    IntersectionSet inter;
    inter.cells = {1, 4};
    bank.mark_seen(inter);
    for (std::size_t i = 0; i < bank.momentum().size(); ++i)
        bank.momentum().data()[i] = rng.gaussian();

    std::ostringstream os(std::ios::binary);
    bank.save(os);
    std::istringstream is(os.str(), std::ios::binary);
    MemoryBank loaded = MemoryBank::load(is);

    CHECK(bit_equal(loaded.tokens(), bank.tokens()));
    CHECK(bit_equal(loaded.momentum(), bank.momentum()));
    CHECK(bit_equal(loaded.init_tokens(), bank.init_tokens()));
    CHECK(loaded.seen_flags() == bank.seen_flags());

    SUBCASE("truncated stream fails cleanly") {
        const std::string full = os.str();
        std::istringstream cut(full.substr(0, full.size() / 2), std::ios::binary);
        CHECK_THROWS_AS(MemoryBank::load(cut), FormatError);
    }
    SUBCASE("bad magic fails cleanly") {
        std::string broken = os.str();
        broken[0] = 'X';
        std::istringstream bad(broken, std::ios::binary);
        CHECK_THROWS_AS(MemoryBank::load(bad), FormatError);
    }
}
