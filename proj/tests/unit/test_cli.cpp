#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "femsched/io.hpp"

using json = nlohmann::json;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(FEMSCHED_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CliResult result;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) result.out.append(buf, n);
    const int status = pclose(pipe);
    result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream os(path, std::ios::binary);
    os << content;
    return path;
}

}  // namespace

TEST_CASE("describe reports the signature and roofline", "[cli]") {
    auto r = run_cli("describe --form laplace --d 2 --degree 2 --Q 6 --device k40 --format json");
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["usable_flops_per_cell"] == 288);
    CHECK(j["signature"]["test_dofs"] == 6);
    CHECK(j["roofline"]["gflops"].get<double>() <= 1430.0);
    CHECK(j["device"] == "k40");
}

TEST_CASE("rank emits the requested table", "[cli]") {
    const std::string args = "rank --form laplace --d 2 --degree 2 --Q 6 --device titan-v";
    auto table = run_cli(args);
    REQUIRE(table.code == 0);

    auto js = run_cli(args + " --format json");
    REQUIRE(js.code == 0);
    auto j = json::parse(js.out);
    CHECK(j["candidates"].size() == 10);  // nine ranked + the single-cell variant
    CHECK(j["candidates"].back()["params"]["kind"] == "scpt");

    SECTION("table and json carry identical values") {
        for (const auto& cand : j["candidates"]) {
            if (cand["seconds_total"].is_null()) continue;
            const std::string t = cand["seconds_total"].get<std::string>();
            CHECK(table.out.find(t) != std::string::npos);
            const std::string simd = cand["qoi"]["eta_simd"]["text"].get<std::string>();
            CHECK(table.out.find("eta_simd=" + simd) != std::string::npos);
        }
    }
    SECTION("ranking output is byte-stable across runs") {
        auto again = run_cli(args + " --format json");
        CHECK(again.out == js.out);
    }
}

TEST_CASE("enumerate counts and lists candidates", "[cli]") {
    auto count = run_cli("enumerate --form mass --d 2 --degree 1 --Q 3 --count-only --format json");
    REQUIRE(count.code == 0);
    auto j = json::parse(count.out);
    const long long cardinality = j["cardinality"].get<long long>();
    CHECK(cardinality > 0);

    auto listed = run_cli("enumerate --form mass --d 2 --degree 1 --Q 3 --limit 5 --format json");
    REQUIRE(listed.code == 0);
    CHECK(json::parse(listed.out).size() == std::min<long long>(5, cardinality));
}

TEST_CASE("simulate verifies a candidate end to end", "[cli]") {
    auto r = run_cli("simulate --form laplace --d 2 --degree 2 --Q 6 --scpt --cells 16 --seed 7 "
                     "--format json");
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["pass"] == true);
    CHECK(j["trace"]["barriers_per_workgroup"] == 0);
    for (const auto& entry : j["conformance"]) CHECK(entry["pass"] == true);
}

TEST_CASE("simulate rejects a constraint-violating candidate before execution", "[cli]") {
    // quad_tile 5 is not in the ceil-divisor set of Q=6
    const auto path = temp_file("femsched_bad_candidate.txt",
                                "format_version: 1\n"
                                "kind: mlt\n"
                                "quad_tile: 5\n"
                                "eval_row_tile: 5\n"
                                "eval_col_tiles_scalar: 6\n"
                                "eval_col_tiles_vector:\n"
                                "quad_row_tile: 6\n"
                                "quad_col_tile: 5\n"
                                "cells_per_group: 32\n"
                                "lanes_per_cell: 1\n");
    auto r = run_cli("simulate --form laplace --d 2 --degree 2 --Q 6 --candidate " + path.string());
    CHECK(r.code == 3);
    CHECK(r.out.find("constraint") != std::string::npos);
}

TEST_CASE("tune is deterministic across seeds and worker pools", "[cli]") {
    const std::string base =
        "tune --form mass --d 2 --degree 2 --Q 6 --device titan-v --cells 16 --seed 7 --b 3 "
        "--format json";
    auto a = run_cli(base);
    REQUIRE(a.code == 0);
    auto b = run_cli(base);
    CHECK(a.out == b.out);
    auto parallel = run_cli(base + " --jobs 4");
    CHECK(parallel.out == a.out);

    auto ja = json::parse(a.out);
    CHECK(ja["records"].size() == 4);
    for (const auto& rec : ja["records"]) {
        CHECK(rec["output_ok"] == true);
        CHECK(rec["counters_ok"] == true);
    }
}

TEST_CASE("codegen writes source and manifest files", "[cli]") {
    const auto dir = std::filesystem::temp_directory_path() / "femsched_cli_codegen";
    std::filesystem::remove_all(dir);
    auto r = run_cli("codegen --form laplace --d 2 --degree 2 --Q 6 --untiled --dialect cuda --out " +
                     dir.string());
    REQUIRE(r.code == 0);
    CHECK(std::filesystem::exists(dir / "fem_action_mlt.cu"));
    CHECK(std::filesystem::exists(dir / "fem_action_mlt.manifest"));

    std::ifstream manifest(dir / "fem_action_mlt.manifest");
    std::string first_line;
    std::getline(manifest, first_line);
    CHECK(first_line == "entry: fem_action_mlt");
}

TEST_CASE("usage errors exit with code 2", "[cli]") {
    SECTION("missing quadrature count prints a suggestion") {
        auto r = run_cli("describe --form laplace --d 2 --degree 2");
        CHECK(r.code == 2);
        CHECK(r.out.find("--Q is required") != std::string::npos);
        CHECK(r.out.find("15") != std::string::npos);  // dim of the degree-4 space on a triangle
    }
    SECTION("unknown flags are rejected") {
        auto r = run_cli("describe --form mass --d 2 --degree 1 --Q 3 --no-such-flag");
        CHECK(r.code == 2);
    }
    SECTION("two form sources are rejected") {
        auto r = run_cli("describe --form mass --d 2 --degree 1 --Q 3 --instance /tmp/x");
        CHECK(r.code == 2);
    }
    SECTION("conflicting candidate selectors are rejected") {
        auto r = run_cli("simulate --form mass --d 2 --degree 1 --Q 3 --scpt --untiled");
        CHECK(r.code == 2);
    }
}

TEST_CASE("custom device specs resolve by path and search directory", "[cli]") {
    const std::string spec =
        "name: bench-gpu\n"
        "peak_gflops: 2000\n"
        "peak_global_bw_gbs: 400\n"
        "peak_local_bw_gbs: 2000\n"
        "max_local_bytes: 65536\n"
        "max_workgroups_per_cu: 16\n"
        "saturation_subgroups_global: 4\n"
        "saturation_subgroups_local: 6\n"
        "max_registers_per_work_item: 255\n";
    SECTION("explicit path") {
        const auto path = temp_file("femsched_device_spec.txt", spec);
        auto r = run_cli("describe --form mass --d 2 --degree 1 --Q 3 --format json --device " +
                         path.string());
        REQUIRE(r.code == 0);
        CHECK(json::parse(r.out)["device"] == "bench-gpu");
    }
    SECTION("FEMSCHED_DEVICE_PATH search directory") {
        const auto dir = std::filesystem::temp_directory_path() / "femsched_devices";
        std::filesystem::create_directories(dir);
        {
            std::ofstream os(dir / "bench-gpu");
            os << spec;
        }
        const std::string env = "FEMSCHED_DEVICE_PATH=" + dir.string() + " ";
        const std::string cmd = env + std::string(FEMSCHED_CLI_PATH) +
                                " describe --form mass --d 2 --degree 1 --Q 3 --format json "
                                "--device bench-gpu 2>&1";
        FILE* pipe = popen(cmd.c_str(), "r");
        REQUIRE(pipe != nullptr);
        std::string out;
        char buf[4096];
        while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
        const int status = pclose(pipe);
        REQUIRE(WEXITSTATUS(status) == 0);
        CHECK(json::parse(out)["device"] == "bench-gpu");
    }
    SECTION("unresolvable names are usage errors") {
        auto r = run_cli("describe --form mass --d 2 --degree 1 --Q 3 --device no-such-gpu");
        CHECK(r.code == 2);
    }
}

TEST_CASE("options load from a config file", "[cli]") {
    const auto path = temp_file("femsched_config.ini",
                                "[describe]\n"
                                "form=laplace\n"
                                "d=2\n"
                                "degree=2\n"
                                "Q=6\n"
                                "device=k40\n"
                                "format=json\n");
    auto r = run_cli("describe --config " + path.string());
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["usable_flops_per_cell"] == 288);
    CHECK(j["device"] == "k40");
}

TEST_CASE("an instance file can drive simulate", "[cli]") {
    // round-trip through the CLI-facing serialization helpers
    const auto dir = std::filesystem::temp_directory_path();
    const auto path = dir / "femsched_cli_instance.txt";
    {
        auto sig = femsched::preset_signature(femsched::Operator::mass, 2, 2, 6);
        auto inst = femsched::make_problem(sig, femsched::preset_map(femsched::Operator::mass, sig),
                                           8, 3);
        femsched::save_instance_file(path.string(), inst);
    }
    auto r = run_cli("simulate --instance " + path.string() + " --untiled --format json");
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["pass"] == true);
    CHECK(j["cells"] == 8);
}
