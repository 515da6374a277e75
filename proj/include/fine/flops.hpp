#pragma once

#include <string>

#include "fine/tensor.hpp"

namespace fine {

// Token-count parameters of one FINE block instance.
struct FlopParams {
    int n_windows = 1;      // N
    int n_u = 1;            // visual tokens per window
    int n_v = 1;            // window tokens per window
    int n_w = 1;            // volume tokens per cell
    int n_wcap = 1;         // cells intersecting the crop
    int m_cells = 1;        // M
    int channels = 1;       // c
};

// Closed-form cost 2c(N(N_u+2N_v) + N_wcap + M*N_w)(2c+1). The intersection
// count is bounded by 8 (4 when the cell grid is collapsed along z).
long long analytic_cost(const FlopParams& p);

// Per-stage closed-form terms; they sum to analytic_cost. Window tokens are
// attended twice (once per window, once at crop level), which is where the
// formula's 2N_v comes from.
long long analytic_w_term(const FlopParams& p);
long long analytic_g_term(const FlopParams& p);
long long analytic_global_term(const FlopParams& p);

struct StageReport {
    MacCounts measured;
    long long analytic = 0;
    // projection-convention ratio; see FlopReport::convention_note
    double ratio() const {
        return analytic ? static_cast<double>(measured.projection) / static_cast<double>(analytic)
                        : 0.0;
    }
};

struct FlopReport {
    FlopParams params;
    int heads = 1;
    StageReport w_stage, g_stage, global_stage;
    long long analytic_total = 0;
    MacCounts measured_total() const;
    double ratio_total() const;

    // The pinned accounting convention for measured/analytic comparison.
    static std::string convention_note();
    std::string to_text() const;
    std::string to_csv() const;
};

// Runs one instrumented FINE-block forward pass with random inputs and the
// given token counts, attributing multiply-accumulates per attention stage.
FlopReport measured_cost(const FlopParams& p, int heads, std::uint64_t seed);

} // namespace fine
