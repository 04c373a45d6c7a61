#include <catch2/catch_amalgamated.hpp>

#include "femsched/codegen.hpp"

using namespace femsched;

namespace {

std::string golden_path(const std::string& name) {
    return std::string(FEMSCHED_GOLDEN_DIR) + "/" + name;
}

}  // namespace

TEST_CASE("emission is deterministic", "[codegen]") {
    auto sig = preset_signature(Operator::laplace, 2, 2, 6);
    auto map = preset_map(Operator::laplace, sig);
    auto a = emit_scpt(sig, map);
    auto b = emit_scpt(sig, map);
    CHECK(a.source == b.source);
    CHECK(manifest_text(a) == manifest_text(b));

    auto p = TilingParams::untiled(sig, 8, 2);
    CHECK(emit_mlt(sig, map, p).source == emit_mlt(sig, map, p).source);
}

TEST_CASE("single-cell kernel structure", "[codegen]") {
    auto sig = preset_signature(Operator::laplace, 2, 2, 6);
    auto map = preset_map(Operator::laplace, sig);
    auto src = emit_scpt(sig, map);
    CHECK(src.workgroup_dim0 == 32);
    CHECK(src.workgroup_dim1 == 1);
    CHECK(src.grid_formula == "ceil_div(n_cells, 32)");
    // one atomic-add construct for the single test-space scatter statement
    CHECK(count_occurrences(src.source, "GlobalAtomicAdd(") == 1);
    CHECK(count_occurrences(src.source, "if (i_cell >= n_cells)") == 1);
    CHECK(static_barrier_count(src, Dialect::portable) == 0);
    // manifest order matches the parameter list order
    REQUIRE(!src.args.empty());
    CHECK(src.args.front().name == "u0_in");
    CHECK(src.args.back().name == "n_cells");
    for (const auto& a : src.args)
        CHECK(src.source.find(a.name) != std::string::npos);
}

TEST_CASE("tiled kernel structural agreement with the plan", "[codegen]") {
    struct Case {
        Operator op;
        int dim, degree, q;
    };
    for (const auto& c : {Case{Operator::mass, 2, 2, 6}, Case{Operator::laplace, 2, 2, 6},
                          Case{Operator::elasticity, 2, 2, 4}, Case{Operator::helmholtz, 3, 1, 5}}) {
        auto sig = preset_signature(c.op, c.dim, c.degree, c.q);
        auto map = preset_map(c.op, sig);
        TilingParams p = TilingParams::untiled(sig, 8, 2);
        p.quad_tile = std::max(1, sig.quad_points / 2);
        p.eval_row_tile = p.quad_tile;
        p.quad_col_tile = p.quad_tile;
        auto plan = build_plan(sig, p);
        auto src = emit_mlt(sig, map, p);
        INFO("operator " << operator_name(c.op));
        CHECK(declared_buffer_words(src) == plan.buffer_words);
        CHECK(declared_buffer_words(src) == qoi_report(sig, p).buffer_words);
        CHECK(static_barrier_count(src, Dialect::portable) == plan.barrier_sites);
        CHECK(src.workgroup_dim0 == p.cells_per_group);
        CHECK(src.workgroup_dim1 == p.lanes_per_cell);
    }
}

TEST_CASE("remainder predicates appear only for inexact tilings", "[codegen]") {
    auto sig = preset_signature(Operator::mass, 2, 2, 6);
    auto map = preset_map(Operator::mass, sig);
    SECTION("exact tiling emits no ternary tile lengths") {
        auto p = TilingParams::untiled(sig, 8, 1);  // every tile spans its loop
        auto src = emit_mlt(sig, map, p);
        CHECK(src.source.find(" ? ") == std::string::npos);
    }
    SECTION("a remainder tile emits its predicate") {
        TilingParams p = TilingParams::untiled(sig, 8, 1);
        p.quad_tile = 4;  // 6 = 4 + 2
        p.eval_row_tile = 4;
        p.quad_col_tile = 4;
        auto src = emit_mlt(sig, map, p);
        CHECK(src.source.find(" ? ") != std::string::npos);
    }
}

TEST_CASE("dialect spellings", "[codegen]") {
    auto sig = preset_signature(Operator::mass, 2, 1, 3);
    auto map = preset_map(Operator::mass, sig);
    auto p = TilingParams::untiled(sig, 4, 1);

    auto ocl = emit_mlt(sig, map, p, Dialect::opencl);
    CHECK(ocl.source.find("__kernel void") != std::string::npos);
    CHECK(ocl.source.find("__local double B[") != std::string::npos);
    CHECK(static_barrier_count(ocl, Dialect::opencl) == build_plan(sig, p).barrier_sites);
    CHECK(ocl.source.find("global_atomic_add(") != std::string::npos);

    auto cu = emit_mlt(sig, map, p, Dialect::cuda);
    CHECK(cu.source.find("__global__") != std::string::npos);
    CHECK(cu.source.find("__shared__ double B[") != std::string::npos);
    CHECK(cu.source.find("__syncthreads();") != std::string::npos);
    CHECK(cu.source.find("atomicAdd(") != std::string::npos);

    auto scpt_cu = emit_scpt(sig, map, Dialect::cuda);
    CHECK(scpt_cu.source.find("atomicAdd(") != std::string::npos);
}

TEST_CASE("device-aware emission rejects oversized local allocations", "[codegen]") {
    auto sig = preset_signature(Operator::laplace, 2, 4, 25);
    auto map = preset_map(Operator::laplace, sig);
    auto p = TilingParams::untiled(sig, 256, 1);  // enormous evaluation results array
    DeviceSpec tiny = k40_device();
    tiny.max_local_bytes = 1024;
    CHECK_THROWS_AS(emit_mlt(sig, map, p, Dialect::portable, &tiny), InfeasibleError);
    CHECK_NOTHROW(emit_mlt(sig, map, p, Dialect::portable, nullptr));
}

TEST_CASE("golden fixtures stay stable", "[codegen]") {
    auto laplace = preset_signature(Operator::laplace, 2, 2, 6);
    auto laplace_map = preset_map(Operator::laplace, laplace);
    {
        auto src = emit_scpt(laplace, laplace_map);
        auto res = golden_check(src.source + "---manifest---\n" + manifest_text(src),
                                golden_path("scpt_laplace_2d_p2.portable.cl"));
        INFO(res.message);
        CHECK(res.pass);
    }
    {
        TilingParams p = TilingParams::untiled(laplace, 8, 2);
        p.quad_tile = 3;
        p.eval_row_tile = 3;
        p.quad_col_tile = 3;
        p.eval_col_tiles_scalar = {3};
        auto src = emit_mlt(laplace, laplace_map, p);
        auto res = golden_check(src.source + "---manifest---\n" + manifest_text(src),
                                golden_path("mlt_laplace_2d_p2.portable.cl"));
        INFO(res.message);
        CHECK(res.pass);
    }
    {
        auto elas = preset_signature(Operator::elasticity, 2, 2, 4);
        auto src = emit_mlt(elas, preset_map(Operator::elasticity, elas),
                            TilingParams::untiled(elas, 4, 2), Dialect::cuda);
        auto res = golden_check(src.source + "---manifest---\n" + manifest_text(src),
                                golden_path("mlt_elasticity_2d_p2.cuda.cu"));
        INFO(res.message);
        CHECK(res.pass);
    }
    SECTION("a missing fixture is reported, not silently passed") {
        if (std::getenv("FEMSCHED_UPDATE_GOLDEN") == nullptr) {
            auto res = golden_check("text", golden_path("no_such_fixture.cl"));
            CHECK_FALSE(res.pass);
        }
    }
    SECTION("comparison is byte-exact, so whitespace changes fail") {
        if (std::getenv("FEMSCHED_UPDATE_GOLDEN") == nullptr) {
            auto src = emit_scpt(laplace, laplace_map);
            const std::string text = src.source + "---manifest---\n" + manifest_text(src);
            auto res = golden_check(text + " ", golden_path("scpt_laplace_2d_p2.portable.cl"));
            CHECK_FALSE(res.pass);
        }
    }
}
