#include <doctest.h>

#include <cmath>

#include "fine/attention.hpp"
#include "fine/flops.hpp"
#include "test_support.hpp"

using namespace fine;
using namespace fine::test;

namespace {

// Least-squares R^2 of y against the model basis (columns are features).
double r_squared(const std::vector<double>& x, const std::vector<double>& y, bool quadratic) {
    // fit y = a*x (+ b*x^2); tiny normal equations
    const std::size_t n = x.size();
    double sxx = 0, sxy = 0, sx2x2 = 0, sx2y = 0, sxx2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
        if (quadratic) {
            sx2x2 += x[i] * x[i] * x[i] * x[i];
            sx2y += x[i] * x[i] * y[i];
            sxx2 += x[i] * x[i] * x[i];
        }
    }
    double a, b = 0.0;
    if (quadratic) {
        const double det = sxx * sx2x2 - sxx2 * sxx2;
        a = (sxy * sx2x2 - sx2y * sxx2) / det;
        b = (sxx * sx2y - sxx2 * sxy) / det;
    } else {
        a = sxy / sxx;
    }
    double ss_res = 0, ss_tot = 0, mean = 0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double fit = a * x[i] + b * x[i] * x[i];
        ss_res += (y[i] - fit) * (y[i] - fit);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    return 1.0 - ss_res / ss_tot;
}

} // namespace

TEST_CASE("analytic cost matches hand-substituted values") {
    // 2*16*(8*66 + 8 + 27)*33 = 594528
    FlopParams p;
    p.n_windows = 8;
    p.n_u = 64;
    p.n_v = 1;
    p.n_w = 1;
    p.n_wcap = 8;
    p.m_cells = 27;
    p.channels = 16;
    CHECK(analytic_cost(p) == 594528);
    CHECK(analytic_w_term(p) + analytic_g_term(p) + analytic_global_term(p) == 594528);

    FlopParams minimal; // everything 1: 2*(1*3 + 1 + 1)*3 = 30
    CHECK(analytic_cost(minimal) == 30);

    // doubling N doubles only the window-dependent addends
    FlopParams p2 = p;
    p2.n_windows = 16;
    const long long per_window = 2LL * p.channels * (p.n_u + 2 * p.n_v) * (2 * p.channels + 1);
    CHECK(analytic_cost(p2) - analytic_cost(p) == 8 * per_window);

    FlopParams bad = p;
    bad.n_wcap = 9;
    CHECK_THROWS_AS(analytic_cost(bad), ContractError);
    bad.n_wcap = 2;
    bad.m_cells = 1;
    CHECK_THROWS_AS(analytic_cost(bad), ContractError);
}

TEST_CASE("measured msa cost matches the hand count 4Lc^2 + 2L^2c") {
    Rng rng(9);
    const int L = 3, c = 4;
    ParamStore store;
    const AttnIds ids = register_attn(store, "a", c, rng);
    Tape tape;
    FlopCounter counter;
    tape.counter = &counter;
    Binding binding(tape, store);
    const Tensor x = tape.leaf(random_tensor({L, c}, rng));
    msa(x, bind_attn(binding, ids), 1);
    const MacCounts m = counter.summed();
    CHECK(m.projection == 4LL * L * c * c);
    CHECK(m.attention == 2LL * L * L * c);
    CHECK(m.other == 0);
}

TEST_CASE("measured per-stage MACs follow the closed forms") {
    FlopParams p;
    p.n_windows = 4;
    p.n_u = 8;
    p.n_v = 1;
    p.n_w = 1;
    p.n_wcap = 3;
    p.m_cells = 9;
    p.channels = 8;
    const FlopReport r = measured_cost(p, 2, 123);
    const long long c = p.channels;
    // window stage: N sequences of length N_u+N_v
    const long long Lw = p.n_u + p.n_v;
    CHECK(r.w_stage.measured.projection == p.n_windows * 4 * Lw * c * c);
    CHECK(r.w_stage.measured.attention == p.n_windows * 2 * Lw * Lw * c);
    // crop stage: one sequence of all window tokens + gathered volume tokens
    const long long Lg = p.n_windows * p.n_v + p.n_wcap * p.n_w;
    CHECK(r.g_stage.measured.projection == 4 * Lg * c * c);
    CHECK(r.g_stage.measured.attention == 2 * Lg * Lg * c);
    // volume stage: the whole bank
    const long long Lm = static_cast<long long>(p.m_cells) * p.n_w;
    CHECK(r.global_stage.measured.projection == 4 * Lm * c * c);
    CHECK(r.global_stage.measured.attention == 2 * Lm * Lm * c);
}

TEST_CASE("window-stage cost is linear in the window count") {
    std::vector<double> xs, ys;
    for (int n : {1, 8, 64}) {
        FlopParams p;
        p.n_windows = n;
        p.n_u = 27;
        p.n_v = 1;
        p.n_w = 1;
        p.n_wcap = 2;
        p.m_cells = 4;
        p.channels = 8;
        const FlopReport r = measured_cost(p, 2, 7);
        xs.push_back(static_cast<double>(n));
        ys.push_back(static_cast<double>(r.w_stage.measured.total()));
    }
    CHECK(r_squared(xs, ys, false) > 0.999);
}

TEST_CASE("total cost is quadratic in the embedding width") {
    std::vector<double> xs, ys;
    for (int c : {8, 16, 32, 64}) {
        FlopParams p;
        p.n_windows = 4;
        p.n_u = 8;
        p.n_v = 1;
        p.n_w = 1;
        p.n_wcap = 2;
        p.m_cells = 4;
        p.channels = c;
        const FlopReport r = measured_cost(p, 2, 7);
        xs.push_back(static_cast<double>(c));
        ys.push_back(static_cast<double>(r.measured_total().projection +
                                         r.measured_total().attention));
    }
    CHECK(r_squared(xs, ys, true) > 0.999);
}

TEST_CASE("measured/analytic ratio is stable across widths under the pinned convention") {
    double lo = 1e30, hi = 0.0;
    for (int c : {8, 16, 32}) {
        FlopParams p;
        p.n_windows = 4;
        p.n_u = 16;
        p.n_v = 1;
        p.n_w = 1;
        p.n_wcap = 2;
        p.m_cells = 6;
        p.channels = c;
        const FlopReport r = measured_cost(p, 2, 7);
        lo = std::min(lo, r.ratio_total());
        hi = std::max(hi, r.ratio_total());
        // with one token per window/cell the per-stage ratio is exactly 2c/(2c+1)
        const double expect = 2.0 * c / (2.0 * c + 1.0);
        CHECK(r.w_stage.ratio() == doctest::Approx(expect).epsilon(1e-12));
        CHECK(r.global_stage.ratio() == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(hi / lo - 1.0 < 0.05);
}

TEST_CASE("memory-token overhead does not grow with the window volume") {
    // FINE projection MACs minus window-only projection MACs, per window size
    std::vector<long long> overheads;
    for (int n_u : {8, 27, 64, 125}) {
        FlopParams p;
        p.n_windows = 4;
        p.n_u = n_u;
        p.n_v = 1;
        p.n_w = 1;
        p.n_wcap = 2;
        p.m_cells = 6;
        p.channels = 8;
        const FlopReport fine_run = measured_cost(p, 2, 7);
        // window-only: sequences without the window token, no crop/volume stage
        const long long window_only = 4LL * p.n_windows * p.n_u * p.channels * p.channels;
        overheads.push_back(fine_run.measured_total().projection - window_only);
    }
    for (std::size_t i = 1; i < overheads.size(); ++i) CHECK(overheads[i] == overheads[0]);
}

TEST_CASE("report text and csv carry the convention and totals") {
    FlopParams p;
    p.n_windows = 2;
    p.n_u = 4;
    p.n_v = 1;
    p.n_w = 1;
    p.n_wcap = 1;
    p.m_cells = 4;
    p.channels = 8;
    const FlopReport r = measured_cost(p, 2, 1);
    const std::string text = r.to_text();
    CHECK(text.find("w_msa") != std::string::npos);
    CHECK(text.find("ratio") != std::string::npos);
    const std::string csv = r.to_csv();
    CHECK(csv.find("stage,projection_macs") != std::string::npos);
    CHECK(r.analytic_total ==
          r.w_stage.analytic + r.g_stage.analytic + r.global_stage.analytic);
}
