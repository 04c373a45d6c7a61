#include <catch2/catch_amalgamated.hpp>

#include "femsched/perf_model.hpp"

using namespace femsched;

namespace {

FormSignature mass_like() {
    FormSignature sig;
    sig.dim = 2;
    sig.scalar_spaces = {{6, 1}};
    sig.test_dofs = 6;
    sig.test_deriv_terms = 1;
    sig.quad_points = 6;
    sig.coord_dofs = 3;
    return sig;
}

FormSignature laplace_like() {
    FormSignature sig = mass_like();
    sig.scalar_spaces = {{6, 2}};
    sig.test_deriv_terms = 2;
    return sig;
}

}  // namespace

TEST_CASE("device presets carry the datasheet constants", "[perf]") {
    auto k40 = k40_device();
    CHECK(k40.peak_gflops == 1430.0);
    CHECK(k40.peak_global_bw_gbs == 288.0);
    CHECK(k40.peak_local_bw_gbs == 1000.0);
    CHECK(k40.max_local_bytes == 48 * 1024);
    CHECK(k40.saturation_subgroups_global == 8);
    CHECK(k40.saturation_subgroups_local == 10);

    auto tv = titan_v_device();
    CHECK(tv.peak_gflops == 6144.0);
    CHECK(tv.peak_global_bw_gbs == 653.0);
    CHECK(tv.peak_local_bw_gbs == 13800.0);
    CHECK(tv.max_local_bytes == 96 * 1024);
    CHECK(tv.saturation_subgroups_global == 1);
    CHECK(tv.saturation_subgroups_local == 12);
    CHECK(tv.max_workgroups_per_cu == 32);
}

TEST_CASE("device spec file round-trip", "[perf]") {
    std::stringstream ss;
    save_device(ss, k40_device());
    auto d = load_device(ss);
    CHECK(d.name == "k40");
    CHECK(d.peak_local_bw_gbs == 1000.0);
    CHECK(d.saturation_subgroups_local == 10);

    std::stringstream bad("peak_gflops: 100\nnonsense_field: 3\n");
    CHECK_THROWS_AS(load_device(bad), std::invalid_argument);
}

TEST_CASE("global access words per cell", "[perf]") {
    auto sig = mass_like();
    SECTION("untiled gather multiplier is one") {
        auto p = TilingParams::untiled(sig, 64, 2);
        auto w = global_access_words(sig, p);
        CHECK(w.gather == 6);
        CHECK(w.scatter == 6);
        CHECK(w.reference == Ratio(36 + 6, 64));
    }
    SECTION("vector spaces gather all components") {
        FormSignature vsig;
        vsig.dim = 3;
        vsig.vector_spaces = {{4, 2, {0, 1}}};
        vsig.test_dofs = 5;
        vsig.test_deriv_terms = 1;
        vsig.quad_points = 4;
        vsig.coord_dofs = 4;
        auto p = TilingParams::untiled(vsig, 8, 1);
        CHECK(global_access_words(vsig, p).gather == 12);  // 3 components * 4 dofs
    }
    SECTION("row-tile passes multiply the gather traffic") {
        FormSignature sig7 = sig;
        sig7.quad_points = 7;
        TilingParams p = TilingParams::untiled(sig7, 16, 1);
        p.quad_tile = 4;
        p.eval_row_tile = 2;
        p.quad_col_tile = 4;
        auto w = global_access_words(sig7, p);
        CHECK(w.gather == (2 + 2) * 6);  // full tile needs 2 passes, remainder of 3 needs 2
        CHECK(w.scatter == 2 * 6);
    }
}

TEST_CASE("local access words per cell", "[perf]") {
    auto sig = laplace_like();
    auto w = local_access_words(sig);
    CHECK(w.eval_read == 72);
    CHECK(w.eval_write == 12);
    CHECK(w.quad_read == 84);

    FormSignature doubled = sig;
    doubled.quad_points *= 2;
    auto w2 = local_access_words(doubled);
    CHECK(w2.eval_read == 2 * w.eval_read);
    CHECK(w2.eval_write == 2 * w.eval_write);
    CHECK(w2.quad_read == 2 * w.quad_read);
}

TEST_CASE("residency", "[perf]") {
    auto tv = titan_v_device();
    SECTION("no local memory bound") {
        TilingParams p = TilingParams::scpt();
        auto r = residency(p, 0, 8, tv);
        CHECK(r.subgroups == tv.max_workgroups_per_cu);  // one sub-group per group
    }
    SECTION("420 double words on titan-v with a 128-lane group") {
        auto sig = mass_like();
        TilingParams p = TilingParams::untiled(sig, 64, 2);
        auto r = residency(p, 420, 8, tv);
        CHECK(r.subgroups == 4 * 29);
    }
    SECTION("local memory over the cap cannot launch") {
        auto sig = mass_like();
        TilingParams p = TilingParams::untiled(sig, 64, 2);
        CHECK_THROWS_AS(residency(p, 96 * 1024 / 8 + 1, 8, tv), InfeasibleError);
    }
    SECTION("efficiencies derate the effective count") {
        auto sig = mass_like();
        TilingParams p = TilingParams::untiled(sig, 64, 2);
        auto r = residency(p, 420, 8, tv, Ratio(3, 4), Ratio(255, 256));
        CHECK(r.effective == Ratio(3, 4) * Ratio(255, 256) * Ratio(116));
    }
}

TEST_CASE("bandwidth ramp saturates exactly at the saturation count", "[perf]") {
    auto tv = titan_v_device();
    auto k40 = k40_device();
    SECTION("titan-v global saturates at one sub-group") {
        CHECK(modeled_bandwidths(Ratio(1), tv).global_gbs == 653.0);
        CHECK(modeled_bandwidths(Ratio(5), tv).global_gbs == 653.0);
        CHECK(modeled_bandwidths(Ratio(1, 2), tv).global_gbs == Catch::Approx(653.0 / 2));
    }
    SECTION("zero resident sub-groups means zero bandwidth") {
        auto b = modeled_bandwidths(Ratio(0), tv);
        CHECK(b.global_gbs == 0.0);
        CHECK(b.local_gbs == 0.0);
    }
    SECTION("k40 ramps linearly to 288 at 8 sub-groups") {
        CHECK(modeled_bandwidths(Ratio(4), k40).global_gbs == Catch::Approx(144.0));
        CHECK(modeled_bandwidths(Ratio(8), k40).global_gbs == 288.0);
        CHECK(modeled_bandwidths(Ratio(10), k40).local_gbs == 1000.0);
        CHECK(modeled_bandwidths(Ratio(5), k40).local_gbs == Catch::Approx(500.0));
    }
    SECTION("nondecreasing and capped along the ramp") {
        double prev = -1.0;
        for (int i = 0; i <= 40; ++i) {
            auto b = modeled_bandwidths(Ratio(i, 2), k40);
            CHECK(b.global_gbs >= prev);
            CHECK(b.global_gbs <= k40.peak_global_bw_gbs);
            prev = b.global_gbs;
        }
    }
}

TEST_CASE("heuristic cost", "[perf]") {
    auto sig = mass_like();
    auto tv = titan_v_device();
    SECTION("saturated regime reduces to bytes over peak bandwidth") {
        auto p = TilingParams::untiled(sig, 64, 2);  // large group: fully resident
        auto est = estimate_cost(sig, p, tv);
        REQUIRE(est.residency.effective >= Ratio(tv.saturation_subgroups_local));
        const double gbytes = boost::rational_cast<double>(est.global_words.total()) * 8;
        const double lbytes = static_cast<double>(est.local_words.total()) * 8;
        CHECK(est.seconds_per_cell ==
              Catch::Approx(gbytes / (653.0 * 1e9) + lbytes / (13800.0 * 1e9)));
    }
    SECTION("aggregate time is exactly linear in the cell count") {
        auto p = TilingParams::untiled(sig, 64, 2);
        auto est = estimate_cost(sig, p, tv);
        CHECK(est.seconds(10) == 10.0 * est.seconds_per_cell);
        CHECK(est.seconds(5000000) == 5000000.0 * est.seconds_per_cell);
    }
    SECTION("more cells per group amortize the reference traffic") {
        auto e32 = estimate_cost(sig, TilingParams::untiled(sig, 32, 2), tv);
        auto e64 = estimate_cost(sig, TilingParams::untiled(sig, 64, 2), tv);
        REQUIRE(e32.residency.effective >= Ratio(tv.saturation_subgroups_local));
        REQUIRE(e64.residency.effective >= Ratio(tv.saturation_subgroups_local));
        CHECK(e64.global_words.reference < e32.global_words.reference);
        CHECK(e64.seconds_per_cell < e32.seconds_per_cell);
    }
    SECTION("higher modeled bandwidth strictly lowers the time") {
        auto p = TilingParams::untiled(sig, 2, 1);  // tiny group: unsaturated ramp
        auto est = estimate_cost(sig, p, tv);
        DeviceSpec faster = tv;
        faster.peak_global_bw_gbs *= 2;
        faster.peak_local_bw_gbs *= 2;
        auto est2 = estimate_cost(sig, p, faster);
        CHECK(est2.seconds_per_cell < est.seconds_per_cell);
    }
    SECTION("the single-cell-per-work-item variant is not modeled") {
        CHECK_THROWS_AS(estimate_cost(sig, TilingParams::scpt(), tv), std::invalid_argument);
    }
}

TEST_CASE("roofline", "[perf]") {
    auto sig = mass_like();
    auto k40 = k40_device();
    SECTION("tiny footprint means the compute ceiling binds") {
        // single precision and a flop-dense mass form push the local term
        // past the peak; a vanishing global footprint then leaves compute
        auto dense = preset_signature(Operator::mass, 2, 4, 6);
        dense.word_bytes = 4;
        auto tv = titan_v_device();
        auto r = roofline(dense, tv, 1000, 1e-3);
        REQUIRE(r.ai_local * tv.peak_local_bw_gbs > tv.peak_gflops);
        CHECK(r.gflops == tv.peak_gflops);
        CHECK(r.binding == RooflineBinding::compute);
    }
    SECTION("never exceeds the compute peak") {
        for (double fp : {1.0, 1e3, 1e6, 1e9, 1e12}) {
            auto r = roofline(sig, k40, 100000, fp);
            CHECK(r.gflops <= k40.peak_gflops);
        }
    }
    SECTION("report equals the minimum of its three terms") {
        const auto fp = default_global_footprint_bytes(sig, 100000);
        auto r = roofline(sig, k40, 100000, fp);
        const double t1 = r.ai_global * k40.peak_global_bw_gbs;
        const double t2 = r.ai_local * k40.peak_local_bw_gbs;
        const double t3 = k40.peak_gflops;
        CHECK(r.gflops == std::min({t1, t2, t3}));
        const double named = r.binding == RooflineBinding::global_bw
                                 ? t1
                                 : (r.binding == RooflineBinding::local_bw ? t2 : t3);
        CHECK(r.gflops == named);
    }
    SECTION("a low-intensity mass form on k40 is global-bandwidth bound") {
        FormSignature low = sig;
        low.quad_points = 1;  // DOF traffic dwarfs the flops
        auto r = roofline(low, k40, 500000, default_global_footprint_bytes(low, 500000));
        REQUIRE(r.ai_global * 288.0 < std::min(r.ai_local * 1000.0, 1430.0));
        CHECK(r.binding == RooflineBinding::global_bw);
        CHECK(r.gflops == Catch::Approx(r.ai_global * 288.0));
    }
    SECTION("zero footprint is rejected") {
        CHECK_THROWS_AS(roofline(sig, k40, 10, 0.0), std::invalid_argument);
    }
}
