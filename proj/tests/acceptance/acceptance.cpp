// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Tolerances are pinned here, not configurable.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sys/wait.h>

#include "femsched/codegen.hpp"
#include "femsched/io.hpp"
#include "femsched/search.hpp"

using namespace femsched;

namespace {

int failures = 0;
int criterion_no = 0;

void report(const std::string& name, bool pass, const std::string& detail = "") {
    ++criterion_no;
    std::printf("[%s] criterion %d: %s%s\n", pass ? "PASS" : "FAIL", criterion_no, name.c_str(),
                detail.empty() ? "" : ("  -- " + detail).c_str());
    if (!pass) ++failures;
}

struct SweepCase {
    Operator op;
    int dim, degree, q;
};

const SweepCase kSweep[] = {
    {Operator::mass, 2, 2, 7},      {Operator::laplace, 2, 2, 6},  {Operator::helmholtz, 2, 3, 12},
    {Operator::mass, 3, 1, 5},      {Operator::laplace, 3, 2, 8},  {Operator::helmholtz, 3, 1, 7},
};

std::vector<TilingParams> sample_candidates(const FormSignature& sig, const SearchConfig& cfg,
                                            int count, std::uint64_t seed) {
    std::vector<TilingParams> reservoir;
    reservoir.reserve(count);
    SynthRng rng(seed);
    long long index = 0;
    for_each_candidate(sig, cfg, [&](const TilingParams& p) {
        if (static_cast<int>(reservoir.size()) < count) {
            reservoir.push_back(p);
        } else {
            const long long j = static_cast<long long>(rng.next_u64() % (index + 1));
            if (j < count) reservoir[static_cast<std::size_t>(j)] = p;
        }
        ++index;
        return true;
    });
    return reservoir;
}

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(FEMSCHED_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    CliResult result;
    if (!pipe) return result;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) result.out.append(buf, n);
    const int status = pclose(pipe);
    result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// criteria 1 and 2 share one sweep over preset signatures and sampled
// candidates; both are scored from the same runs
void criteria_oracle_and_conformance() {
    SearchConfig cfg;
    bool equivalence_ok = true, conformance_ok = true, saw_quad_remainder = false;
    std::string detail1, detail2;
    long long runs = 0;

    for (const auto& sc : kSweep) {
        const auto sig = preset_signature(sc.op, sc.dim, sc.degree, sc.q);
        const auto inst = make_problem(sig, preset_map(sc.op, sig), 16, 7);
        const auto ref = reference_action(inst);

        auto candidates = sample_candidates(sig, cfg, 20, 20240817 + sc.q);
        candidates.push_back(TilingParams::scpt());

        for (const auto& params : candidates) {
            if (params.kind == ScheduleKind::MultiLevelTiling &&
                sig.quad_points % params.quad_tile != 0)
                saw_quad_remainder = true;
            SimTrace trace;
            try {
                trace = run_schedule(inst, build_plan(sig, params));
            } catch (const std::exception& e) {
                equivalence_ok = false;
                detail1 = std::string("execution failed: ") + e.what();
                continue;
            }
            ++runs;
            for (std::size_t i = 0; i < ref.size(); ++i) {
                const double denom = std::max(std::abs(ref[i]), 1e-30);
                if (std::abs(trace.output[i] - ref[i]) / denom > 1e-10) {
                    equivalence_ok = false;
                    detail1 = "output mismatch for " + std::string(operator_name(sc.op));
                }
            }
            const auto cen = census(trace, sig, params, inst.connectivity.cell_count);
            if (!cen.all_pass()) {
                conformance_ok = false;
                const auto* f = cen.first_failure();
                detail2 = f->quantity + " expected " + std::to_string(f->expected) + " counted " +
                          std::to_string(f->actual);
            }
        }
    }
    if (!saw_quad_remainder) {
        conformance_ok = false;
        detail2 = "sweep never exercised a quadrature remainder tile";
    }
    report("oracle equivalence: simulator vs reference action, <=1e-10 relative, " +
               std::to_string(runs) + " scheduled runs on 16-cell shared-DOF instances",
           equivalence_ok, detail1);
    report("formula-counter conformance: barriers, flops, local words, access categories, "
           "integer-exact across the sweep",
           conformance_ok, detail2);
}

void criterion_constraints() {
    bool ok = true;
    std::string detail;

    // soundness on a production-sized signature
    SearchConfig cfg;
    const auto laplace = preset_signature(Operator::laplace, 2, 2, 6);
    for_each_candidate(laplace, cfg, [&](const TilingParams& p) {
        if (!(satisfies_tile_sets(laplace, p) && satisfies_alias_floor(laplace, p, cfg) &&
              satisfies_simd_floor(p, cfg) && satisfies_workgroup_cap(p, cfg))) {
            ok = false;
            detail = "enumerated candidate violates a constraint";
            return false;
        }
        return true;
    });

    // completeness against brute force on a small instance
    FormSignature small;
    small.dim = 2;
    small.scalar_spaces = {{4, 2}};
    small.test_dofs = 4;
    small.test_deriv_terms = 2;
    small.quad_points = 4;
    small.coord_dofs = 3;
    std::set<std::vector<int>> enumerated;
    for_each_candidate(small, cfg, [&](const TilingParams& p) {
        enumerated.insert(p.order_key());
        return true;
    });
    std::set<std::vector<int>> brute;
    const auto shapes = workgroup_shapes(cfg);
    for (int tq = 1; tq <= small.quad_points; ++tq)
        for (int ter = 1; ter <= tq; ++ter)
            for (int tc = 1; tc <= small.scalar_spaces[0].dofs; ++tc)
                for (int tqr = 1; tqr <= small.test_dofs; ++tqr)
                    for (int tqc = 1; tqc <= tq; ++tqc)
                        for (const auto& [nc, wi] : shapes) {
                            TilingParams p;
                            p.kind = ScheduleKind::MultiLevelTiling;
                            p.quad_tile = tq;
                            p.eval_row_tile = ter;
                            p.eval_col_tiles_scalar = {tc};
                            p.quad_row_tile = tqr;
                            p.quad_col_tile = tqc;
                            p.cells_per_group = nc;
                            p.lanes_per_cell = wi;
                            if (satisfies_constraints(small, p, cfg)) brute.insert(p.order_key());
                        }
    if (brute != enumerated) {
        ok = false;
        detail = "enumerate != brute force (" + std::to_string(enumerated.size()) + " vs " +
                 std::to_string(brute.size()) + ")";
    }
    report("constraint soundness and brute-force completeness of the enumeration", ok, detail);
}

void criterion_winning_configs() {
    // work-group shapes of recorded tuning winners, encoded as (cells, lanes);
    // the single-cell-per-work-item rows use the fixed 32 x 1 work-group
    static const std::pair<int, int> kWinning[] = {
        // 2D, Kepler device
        {64, 2}, {64, 4}, {51, 5}, {37, 6}, {64, 4}, {64, 1}, {64, 2}, {64, 4}, {51, 5}, {64, 4},
        {51, 5}, {51, 5}, {63, 4}, {51, 5}, {51, 5}, {51, 5}, {64, 3}, {64, 3}, {56, 4}, {25, 10},
        {36, 7}, {25, 10}, {28, 9}, {53, 3}, {25, 10}, {23, 11}, {21, 12}, {21, 12}, {28, 9},
        // 2D, Volta device
        {64, 3}, {64, 4}, {64, 2}, {64, 3}, {64, 4}, {64, 4}, {55, 4}, {64, 4}, {64, 2}, {64, 4},
        {56, 4}, {56, 4}, {36, 7}, {56, 4}, {42, 6}, {32, 8}, {32, 8}, {32, 8}, {28, 9},
        // 3D, Kepler device
        {64, 2}, {64, 4}, {64, 4}, {56, 4}, {51, 5}, {64, 2}, {64, 4}, {63, 4}, {64, 4}, {42, 6},
        {56, 4}, {51, 5}, {51, 5}, {51, 5}, {64, 4}, {22, 10}, {21, 12}, {18, 14}, {17, 15},
        {18, 14}, {17, 13}, {14, 18}, {17, 15}, {13, 17},
        // 3D, Volta device
        {64, 4}, {64, 4}, {64, 4}, {64, 4}, {64, 4}, {64, 4}, {64, 4}, {42, 6}, {44, 5}, {25, 10},
        {28, 8}, {21, 12}, {44, 5}, {25, 10}, {21, 12}, {22, 10}, {12, 16},
        // rows won by the single-cell-per-work-item variant
        {32, 1},
    };
    bool ok = true;
    std::string detail;
    const Ratio floor(97, 100);
    for (const auto& [nc, wi] : kWinning) {
        if (eta_simd(nc, wi) < floor || nc * wi > 256) {
            ok = false;
            detail = "(" + std::to_string(nc) + "," + std::to_string(wi) + ") fails";
        }
    }
    if (eta_simd(51, 5) != Ratio(255, 256) || eta_simd(21, 12) != Ratio(252, 256) ||
        eta_simd(13, 17) != Ratio(221, 224)) {
        ok = false;
        detail = "spot value mismatch";
    }
    report("recorded tuning-winner work-group shapes satisfy the SIMD floor and size cap", ok, detail);
}

void criterion_tile_pruning() {
    bool ok = true;
    std::string detail;

    const auto set8 = ceil_divisor_set(8);
    if (set8 != std::vector<int>{8, 4, 3, 2, 1}) {
        ok = false;
        detail = "ceil_divisor_set(8) wrong";
    }

    FormSignature sig;
    sig.dim = 2;
    sig.scalar_spaces = {{8, 1}};
    sig.test_dofs = 8;
    sig.test_deriv_terms = 1;
    sig.quad_points = 8;
    sig.coord_dofs = 3;
    SearchConfig cfg;
    bool saw_4x4 = false, saw_7x7 = false;
    for_each_candidate(sig, cfg, [&](const TilingParams& p) {
        if (p.eval_row_tile == 4 && p.eval_col_tiles_scalar[0] == 4) saw_4x4 = true;
        if (p.eval_row_tile == 7 || p.eval_col_tiles_scalar[0] == 7) saw_7x7 = true;
        return true;
    });
    if (!saw_4x4 || saw_7x7) {
        ok = false;
        detail = "tile membership wrong";
    }

    // both tilings of the 8x8 evaluation phase run two barriers per tile
    // stage; the quadrature phase is held fixed at 4x4 tiles so only the
    // evaluation footprint differs
    auto inst = make_problem(sig, preset_map(Operator::mass, sig), 8, 3);
    auto make = [&](int tile) {
        TilingParams p = TilingParams::untiled(sig, 8, 1);
        p.eval_row_tile = tile;
        p.eval_col_tiles_scalar = {tile};
        p.quad_row_tile = 4;
        p.quad_col_tile = 4;
        return p;
    };
    const auto good = make(4), bad = make(7);
    const auto trace_good = run_mlt(inst, build_plan(sig, good));
    const auto trace_bad = run_mlt(inst, build_plan(sig, bad));
    // shared tail: 2 sync barriers + 2*ceil(8/4)*ceil(8/4) = 8 quad barriers;
    // both variants split the 8x8 evaluation phase into 4 stages of 2 barriers
    const long long eval_stage_barriers_good =
        trace_good.counters.barriers_per_workgroup - 2 - 8;
    const long long eval_stage_barriers_bad =
        trace_bad.counters.barriers_per_workgroup - 2 - 8;
    if (eval_stage_barriers_good != 8 || eval_stage_barriers_bad != 8 ||
        eval_stage_barriers_good / 4 != 2) {
        ok = false;
        detail = "barrier executions per stage diverge";
    }
    if (local_mem_words(sig, bad).buffer != 49 || local_mem_words(sig, good).buffer != 16) {
        ok = false;
        detail = "the pruned tile should cost more local memory (49 vs 16 words)";
    }
    report("pruned 7x7 vs admitted 4x4 tiling: same barrier executions, more local memory", ok,
           detail);
}

void criterion_cost_roofline() {
    bool ok = true;
    std::string detail;
    struct Probe {
        DeviceSpec dev;
        double global_peak, local_peak;
        int sat_g, sat_l;
    };
    const Probe probes[] = {{k40_device(), 288.0, 1000.0, 8, 10},
                            {titan_v_device(), 653.0, 13800.0, 1, 12}};
    for (const auto& pr : probes) {
        // exact saturation at the preset sub-group counts
        if (modeled_bandwidths(Ratio(pr.sat_g), pr.dev).global_gbs != pr.global_peak ||
            modeled_bandwidths(Ratio(pr.sat_l), pr.dev).local_gbs != pr.local_peak) {
            ok = false;
            detail = pr.dev.name + " does not saturate at its preset counts";
        }
        const auto below_g = modeled_bandwidths(Ratio(pr.sat_g * 2 - 1, 2), pr.dev);
        if (below_g.global_gbs >= pr.global_peak) {
            ok = false;
            detail = pr.dev.name + " saturates early";
        }
        // linearity of the ramp: beta(x) = peak * x / sat below saturation
        for (int i = 1; i < 2 * pr.sat_l; ++i) {
            const Ratio x(i, 2);
            const auto b = modeled_bandwidths(x, pr.dev);
            const double expected_l = x >= Ratio(pr.sat_l)
                                          ? pr.local_peak
                                          : pr.local_peak * boost::rational_cast<double>(x) / pr.sat_l;
            if (std::abs(b.local_gbs - expected_l) > 1e-9 * pr.local_peak) {
                ok = false;
                detail = pr.dev.name + " ramp is not linear";
            }
        }
    }

    const double peaks[2] = {1430.0, 6144.0};
    int dev_idx = 0;
    for (const auto& pr : probes) {
        for (const auto& sc : kSweep) {
            const auto sig = preset_signature(sc.op, sc.dim, sc.degree, sc.q);
            const long long cells = 100000;
            const auto roof = roofline(sig, pr.dev, cells, default_global_footprint_bytes(sig, cells));
            const double t1 = roof.ai_global * pr.dev.peak_global_bw_gbs;
            const double t2 = roof.ai_local * pr.dev.peak_local_bw_gbs;
            const double t3 = pr.dev.peak_gflops;
            if (roof.gflops != std::min({t1, t2, t3}) || roof.gflops > peaks[dev_idx]) {
                ok = false;
                detail = "roofline is not the minimum of its terms";
            }
        }
        ++dev_idx;
    }

    const auto sig = preset_signature(Operator::laplace, 2, 2, 6);
    const auto est = estimate_cost(sig, TilingParams::untiled(sig, 64, 2), titan_v_device());
    for (long long n : {1LL, 10LL, 500000LL, 123456789LL})
        if (est.seconds(n) != static_cast<double>(n) * est.seconds_per_cell) {
            ok = false;
            detail = "modeled time is not exactly linear in the cell count";
        }
    report("bandwidth ramp, roofline minimum, and cell-count linearity of the cost model", ok,
           detail);
}

void criterion_determinism() {
    bool ok = true;
    std::string detail;
    const std::string rank_args =
        "rank --form laplace --d 2 --degree 2 --Q 6 --device titan-v --format json";
    auto r1 = run_cli(rank_args), r2 = run_cli(rank_args);
    if (r1.code != 0 || r1.out != r2.out) {
        ok = false;
        detail = "rank output differs across runs";
    }
    const std::string enum_args =
        "enumerate --form mass --d 2 --degree 2 --Q 6 --limit 200 --format json";
    auto e1 = run_cli(enum_args), e2 = run_cli(enum_args);
    if (e1.code != 0 || e1.out != e2.out) {
        ok = false;
        detail = "enumerate output differs across runs";
    }
    const std::string tune_args =
        "tune --form mass --d 2 --degree 2 --Q 6 --device titan-v --cells 16 --seed 7 --b 3 "
        "--format json";
    auto t1 = run_cli(tune_args + " --jobs 1"), t2 = run_cli(tune_args + " --jobs 4");
    if (t1.code != 0 || t1.out != t2.out) {
        ok = false;
        detail = "tune output differs between --jobs 1 and --jobs 4";
    }
    const std::string sim_args =
        "simulate --form helmholtz --d 2 --degree 2 --Q 6 --untiled --cells 16 --seed 7 --format json";
    auto s1 = run_cli(sim_args), s2 = run_cli(sim_args);
    if (s1.code != 0 || s1.out != s2.out) {
        ok = false;
        detail = "simulate output differs across runs";
    }

    namespace fs = std::filesystem;
    const auto dir1 = fs::temp_directory_path() / "femsched_acc_cg1";
    const auto dir2 = fs::temp_directory_path() / "femsched_acc_cg2";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    const std::string cg = "codegen --form laplace --d 2 --degree 2 --Q 6 --untiled --dialect opencl";
    auto c1 = run_cli(cg + " --out " + dir1.string());
    auto c2 = run_cli(cg + " --out " + dir2.string());
    if (c1.code != 0 || c2.code != 0 ||
        read_file(dir1 / "fem_action_mlt.cl") != read_file(dir2 / "fem_action_mlt.cl") ||
        read_file(dir1 / "fem_action_mlt.cl").empty()) {
        ok = false;
        detail = "codegen output differs across runs";
    }

    // library-level: traces are bit-identical run to run
    const auto sig = preset_signature(Operator::laplace, 2, 2, 6);
    auto inst = make_problem(sig, preset_map(Operator::laplace, sig), 16, 7);
    auto params = TilingParams::untiled(sig, 8, 2);
    if (!(run_mlt(inst, build_plan(sig, params)) == run_mlt(inst, build_plan(sig, params)))) {
        ok = false;
        detail = "simulator traces differ across runs";
    }
    report("byte-identical enumerate/rank/simulate/tune/codegen across runs and worker pools", ok,
           detail);
}

void criterion_codegen_agreement() {
    bool ok = true;
    std::string detail;
    const SweepCase cases[] = {{Operator::mass, 2, 2, 6},
                               {Operator::laplace, 2, 2, 6},
                               {Operator::elasticity, 2, 2, 4},
                               {Operator::helmholtz, 3, 1, 5}};
    for (const auto& sc : cases) {
        const auto sig = preset_signature(sc.op, sc.dim, sc.degree, sc.q);
        const auto map = preset_map(sc.op, sig);
        TilingParams p = TilingParams::untiled(sig, 8, 2);
        p.quad_tile = std::max(1, sig.quad_points / 2);
        p.eval_row_tile = p.quad_tile;
        p.quad_col_tile = p.quad_tile;
        const auto plan = build_plan(sig, p);
        const auto src = emit_mlt(sig, map, p);
        if (declared_buffer_words(src) != qoi_report(sig, p).buffer_words) {
            ok = false;
            detail = std::string(operator_name(sc.op)) + ": buffer declaration size mismatch";
        }
        if (static_barrier_count(src, Dialect::portable) != plan.barrier_sites) {
            ok = false;
            detail = std::string(operator_name(sc.op)) + ": static barrier count mismatch";
        }
    }

    // golden fixtures stay stable
    const std::string golden_dir = FEMSCHED_GOLDEN_DIR;
    {
        const auto sig = preset_signature(Operator::laplace, 2, 2, 6);
        const auto map = preset_map(Operator::laplace, sig);
        auto src = emit_scpt(sig, map);
        auto res = golden_check(src.source + "---manifest---\n" + manifest_text(src),
                                golden_dir + "/scpt_laplace_2d_p2.portable.cl");
        if (!res.pass) {
            ok = false;
            detail = res.message;
        }
        TilingParams p = TilingParams::untiled(sig, 8, 2);
        p.quad_tile = 3;
        p.eval_row_tile = 3;
        p.quad_col_tile = 3;
        p.eval_col_tiles_scalar = {3};
        auto mlt = emit_mlt(sig, map, p);
        res = golden_check(mlt.source + "---manifest---\n" + manifest_text(mlt),
                           golden_dir + "/mlt_laplace_2d_p2.portable.cl");
        if (!res.pass) {
            ok = false;
            detail = res.message;
        }
    }
    report("emitted kernels agree with the plan (buffer size, barrier sites); golden files stable",
           ok, detail);
}

}  // namespace

int main() {
    criteria_oracle_and_conformance();  // criteria 1 and 2
    criterion_constraints();            // criterion 3
    criterion_winning_configs();        // criterion 4
    criterion_tile_pruning();           // criterion 5
    criterion_cost_roofline();          // criterion 6
    criterion_determinism();            // criterion 7
    criterion_codegen_agreement();      // criterion 8
    if (failures) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all acceptance criteria passed\n");
    return 0;
}
