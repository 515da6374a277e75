#include "fine/flops.hpp"

#include <algorithm>
#include <sstream>

#include "fine/attention.hpp"
#include "fine/memory_bank.hpp"

namespace fine {

namespace {

void check_params(const FlopParams& p) {
    if (p.n_windows < 1 || p.n_u < 1 || p.n_v < 1 || p.n_w < 1 || p.m_cells < 1 ||
        p.channels < 1)
        throw ContractError("flop params must all be >= 1");
    if (p.n_wcap < 1 || p.n_wcap > std::min(8, p.m_cells))
        throw ContractError("intersection count " + std::to_string(p.n_wcap) +
                            " violates the bound min(8, M) = " +
                            std::to_string(std::min(8, p.m_cells)));
}

} // namespace

long long analytic_w_term(const FlopParams& p) {
    const long long c = p.channels;
    return 2 * c * (static_cast<long long>(p.n_windows) * (p.n_u + p.n_v)) * (2 * c + 1);
}

long long analytic_g_term(const FlopParams& p) {
    const long long c = p.channels;
    return 2 * c * (static_cast<long long>(p.n_windows) * p.n_v + p.n_wcap) * (2 * c + 1);
}

long long analytic_global_term(const FlopParams& p) {
    const long long c = p.channels;
    return 2 * c * (static_cast<long long>(p.m_cells) * p.n_w) * (2 * c + 1);
}

long long analytic_cost(const FlopParams& p) {
    check_params(p);
    const long long c = p.channels;
    const long long tokens = static_cast<long long>(p.n_windows) * (p.n_u + 2 * p.n_v) +
                             p.n_wcap + static_cast<long long>(p.m_cells) * p.n_w;
    return 2 * c * tokens * (2 * c + 1);
}

MacCounts FlopReport::measured_total() const {
    MacCounts t;
    for (const StageReport* s : {&w_stage, &g_stage, &global_stage}) {
        t.projection += s->measured.projection;
        t.attention += s->measured.attention;
        t.other += s->measured.other;
    }
    return t;
}

double FlopReport::ratio_total() const {
    return analytic_total
               ? static_cast<double>(measured_total().projection) / static_cast<double>(analytic_total)
               : 0.0;
}

std::string FlopReport::convention_note() {
    return "ratio = measured projection MACs / analytic term. The closed form counts "
           "per-token projection work (4c^2 + 2c per attended token); measured attention-"
           "weight MACs (logits and weighting, 2L^2c per sequence) are reported separately "
           "and are not part of the ratio. MLP sub-layer MACs appear under 'mlp'.";
}

std::string FlopReport::to_text() const {
    std::ostringstream os;
    os << "FINE block multiply-accumulate report\n";
    os << "params: N=" << params.n_windows << " N_u=" << params.n_u << " N_v=" << params.n_v
       << " N_w=" << params.n_w << " N_wcap=" << params.n_wcap << " M=" << params.m_cells
       << " c=" << params.channels << " heads=" << heads << "\n";
    os << "convention: " << convention_note() << "\n\n";
    os << "stage        projection     attention           mlp      analytic      ratio\n";
    auto line = [&os](const char* name, const StageReport& s) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-10s %12lld  %12lld  %12lld  %12lld   %8.6f\n", name,
                      s.measured.projection, s.measured.attention, s.measured.other, s.analytic,
                      s.ratio());
        os << buf;
    };
    line("w_msa", w_stage);
    line("g_msa", g_stage);
    line("global_msa", global_stage);
    const MacCounts t = measured_total();
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-10s %12lld  %12lld  %12lld  %12lld   %8.6f\n", "total",
                  t.projection, t.attention, t.other, analytic_total, ratio_total());
    os << buf;
    return os.str();
}

std::string FlopReport::to_csv() const {
    std::ostringstream os;
    os << "stage,projection_macs,attention_macs,mlp_macs,analytic_macs,ratio\n";
    auto line = [&os](const char* name, const MacCounts& m, long long analytic, double ratio) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%lld,%.9f\n", name, m.projection,
                      m.attention, m.other, analytic, ratio);
        os << buf;
    };
    line("w_msa", w_stage.measured, w_stage.analytic, w_stage.ratio());
    line("g_msa", g_stage.measured, g_stage.analytic, g_stage.ratio());
    line("global_msa", global_stage.measured, global_stage.analytic, global_stage.ratio());
    line("total", measured_total(), analytic_total, ratio_total());
    return os.str();
}

FlopReport measured_cost(const FlopParams& p, int heads, std::uint64_t seed) {
    check_params(p);
    if (p.channels % heads) throw ContractError("measured_cost: channels not divisible by heads");
    Rng rng(seed);

    FineBlockConfig cfg;
    cfg.channels = p.channels;
    cfg.heads = heads;
    cfg.tokens_per_window = p.n_v;
    cfg.tokens_per_cell = p.n_w;
    cfg.mlp_ratio = 2;
    cfg.rel_pos_bias = false; // bias adds no multiplies; layout-free audit
    cfg.mode = BlockMode::full;

    ParamStore store;
    const FineBlockIds ids = register_fine_block(store, "audit", cfg, Dims3{1, 1, 1}, rng);

    MemoryBank bank(p.m_cells, p.n_w, p.channels, rng);
    IntersectionSet inter;
    for (int i = 0; i < p.n_wcap; ++i) inter.cells.push_back(i);

    Tensor visual = init_tensor({p.n_windows * p.n_u, p.channels}, Init::normal_002, rng);
    Tensor wtok = init_tensor({p.n_windows * p.n_v, p.channels}, Init::normal_002, rng);

    Tape tape;
    FlopCounter counter;
    tape.counter = &counter;
    Binding binding(tape, store);
    FineBlockState state;
    state.visual = tape.leaf(visual);
    state.window_tokens = tape.leaf(wtok);
    state.bank_tokens = tape.leaf(bank.tokens());
    const BoundFineBlock bound = bind_fine_block(binding, ids, cfg, nullptr);
    fine_block(state, p.n_windows, &bank, &inter, bound, cfg);

    FlopReport report;
    report.params = p;
    report.heads = heads;
    report.w_stage.measured = counter.stage(AttnStage::w_msa);
    report.w_stage.analytic = analytic_w_term(p);
    report.g_stage.measured = counter.stage(AttnStage::g_msa);
    report.g_stage.analytic = analytic_g_term(p);
    report.global_stage.measured = counter.stage(AttnStage::global_msa);
    report.global_stage.analytic = analytic_global_term(p);
    report.analytic_total = analytic_cost(p);
    return report;
}

} // namespace fine
