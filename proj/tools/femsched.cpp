// femsched command-line interface: describe forms, enumerate and rank the
// scheduling space, simulate candidates against the reference oracle, tune,
// and emit kernel source.
//
// Exit codes: 0 success, 2 usage or input error, 3 infeasible candidate,
// 4 verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "femsched/codegen.hpp"
#include "femsched/io.hpp"
#include "femsched/search.hpp"

using json = nlohmann::ordered_json;
using namespace femsched;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitVerification = 4;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string ratio_str(const Ratio& r) {
    if (r.denominator() == 1) return std::to_string(r.numerator());
    return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

std::string sec_str(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6e", s);
    return buf;
}

json ratio_json(const Ratio& r) {
    return json{{"num", r.numerator()}, {"den", r.denominator()}, {"text", ratio_str(r)}};
}

std::string tiling_str(const TilingParams& p) {
    if (p.kind == ScheduleKind::SingleCellPerWorkItem) return "scpt";
    std::string s = "TQ=" + std::to_string(p.quad_tile) + " Ter=" + std::to_string(p.eval_row_tile);
    s += " Tc=";
    bool first = true;
    for (int t : p.eval_col_tiles_scalar) {
        s += (first ? "" : ",") + std::to_string(t);
        first = false;
    }
    for (int t : p.eval_col_tiles_vector) {
        s += (first ? "" : ",") + std::to_string(t);
        first = false;
    }
    s += " Tqr=" + std::to_string(p.quad_row_tile) + " Tqc=" + std::to_string(p.quad_col_tile);
    s += " Nc=" + std::to_string(p.cells_per_group) + " Nwi=" + std::to_string(p.lanes_per_cell);
    return s;
}

json tiling_json(const TilingParams& p) {
    json j;
    j["kind"] = p.kind == ScheduleKind::SingleCellPerWorkItem ? "scpt" : "mlt";
    if (p.kind == ScheduleKind::MultiLevelTiling) {
        j["quad_tile"] = p.quad_tile;
        j["eval_row_tile"] = p.eval_row_tile;
        j["eval_col_tiles_scalar"] = p.eval_col_tiles_scalar;
        j["eval_col_tiles_vector"] = p.eval_col_tiles_vector;
        j["quad_row_tile"] = p.quad_row_tile;
        j["quad_col_tile"] = p.quad_col_tile;
        j["cells_per_group"] = p.cells_per_group;
        j["lanes_per_cell"] = p.lanes_per_cell;
    }
    return j;
}

json qoi_json(const QoIReport& q) {
    json j;
    j["barriers"] = q.barriers;
    j["local_words"] = q.local_words;
    j["buffer_words"] = q.buffer_words;
    j["eta_simd"] = ratio_json(q.simd_efficiency);
    j["eta_pred"] = ratio_json(q.predication_efficiency);
    j["eta_alias"] = ratio_json(q.alias_efficiency);
    j["flops_usable"] = q.flops_usable;
    j["flops_performed"] = q.flops_performed;
    return j;
}

// "0.8", ".97", or "4/5" -> exact ratio
Ratio parse_ratio(const std::string& text) {
    const auto slash = text.find('/');
    if (slash != std::string::npos)
        return Ratio(std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1)));
    const auto dot = text.find('.');
    if (dot == std::string::npos) return Ratio(std::stoll(text));
    const std::string whole = text.substr(0, dot), frac = text.substr(dot + 1);
    long long den = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
    const long long w = whole.empty() ? 0 : std::stoll(whole);
    return Ratio(w * den + std::stoll(frac.empty() ? "0" : frac), den);
}

struct FormOptions {
    std::string form;
    int dim = 2;
    int degree = 1;
    int quad_points = 0;
    std::string instance_path;
};

void add_form_options(CLI::App* cmd, FormOptions& o, bool allow_instance) {
    cmd->add_option("--form", o.form, "operator preset: mass|laplace|helmholtz|elasticity|hyperelasticity");
    cmd->add_option("--d", o.dim, "spatial dimension");
    cmd->add_option("--degree", o.degree, "polynomial degree of the function spaces");
    cmd->add_option("--Q", o.quad_points, "quadrature points per cell (required with --form)");
    if (allow_instance)
        cmd->add_option("--instance", o.instance_path, "load a serialized problem instance instead");
}

struct ResolvedForm {
    FormSignature sig;
    PointwiseMap map;
    std::string label;
    std::optional<ProblemInstance> instance;  // present when loaded from file
};

ResolvedForm resolve_form(const FormOptions& o) {
    if (!o.form.empty() && !o.instance_path.empty())
        throw UsageError("exactly one form source: give --form or --instance, not both");
    if (!o.instance_path.empty()) {
        ResolvedForm r{FormSignature{}, PointwiseMap{}, "instance:" + o.instance_path,
                       load_instance_file(o.instance_path)};
        r.sig = r.instance->signature;
        r.map = r.instance->map;
        return r;
    }
    if (o.form.empty()) throw UsageError("a form source is required: --form or --instance");
    const Operator op = operator_from_name(o.form);
    if (o.quad_points < 1) {
        const int suggestion = simplex_space_dim(2 * o.degree, o.dim);
        throw UsageError("--Q is required with --form; quadrature choice is problem-specific "
                         "(a degree-" + std::to_string(2 * o.degree) + " space on this simplex has " +
                         std::to_string(suggestion) + " modes, which is one reasonable choice)");
    }
    ResolvedForm r{preset_signature(op, o.dim, o.degree, o.quad_points), PointwiseMap{},
                   o.form + "." + std::to_string(o.dim) + "d.p" + std::to_string(o.degree), {}};
    r.map = preset_map(op, r.sig);
    return r;
}

DeviceSpec resolve_device(const std::string& name) {
    if (name.empty() || name == "titan-v") return titan_v_device();
    if (name == "k40") return k40_device();
    namespace fs = std::filesystem;
    if (fs::exists(name)) {
        std::ifstream is(name);
        return load_device(is);
    }
    if (const char* dir = std::getenv("FEMSCHED_DEVICE_PATH")) {
        const fs::path candidate = fs::path(dir) / name;
        if (fs::exists(candidate)) {
            std::ifstream is(candidate);
            return load_device(is);
        }
    }
    throw UsageError("unknown device '" + name + "': expected k40, titan-v, or a spec file path");
}

struct SearchOptions {
    std::string alias_floor = "0.8";
    std::string simd_floor = "0.97";
    int workgroup_cap = 256;
    int best_count = 9;

    SearchConfig to_config() const {
        SearchConfig cfg;
        cfg.alias_floor = parse_ratio(alias_floor);
        cfg.simd_floor = parse_ratio(simd_floor);
        cfg.workgroup_cap = workgroup_cap;
        cfg.best_count = best_count;
        cfg.validate();
        return cfg;
    }
};

void add_search_options(CLI::App* cmd, SearchOptions& o) {
    cmd->add_option("--alias-floor", o.alias_floor, "minimum aliasing efficiency (decimal or p/q)");
    cmd->add_option("--simd-floor", o.simd_floor, "minimum SIMD efficiency (decimal or p/q)");
    cmd->add_option("--wg-cap", o.workgroup_cap, "maximum work-group size");
    cmd->add_option("--b", o.best_count, "ranked candidates to keep");
}

long long default_cells(const FormSignature& sig) { return sig.dim >= 3 ? 200000 : 500000; }

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_describe(const ResolvedForm& form, const DeviceSpec& dev, long long cells,
                  const std::string& format) {
    const FormSignature& sig = form.sig;
    const long long flops = usable_flops(sig);
    const auto local = local_access_words(sig);
    const double footprint = default_global_footprint_bytes(sig, cells);
    const auto roof = roofline(sig, dev, cells, footprint);

    if (format == "json") {
        json j;
        j["form"] = form.label;
        json s;
        s["dim"] = sig.dim;
        s["quad_points"] = sig.quad_points;
        s["test_dofs"] = sig.test_dofs;
        s["test_deriv_terms"] = sig.test_deriv_terms;
        s["scalar_spaces"] = json::array();
        for (const auto& sp : sig.scalar_spaces)
            s["scalar_spaces"].push_back({{"dofs", sp.dofs}, {"deriv_terms", sp.deriv_terms}});
        s["vector_spaces"] = json::array();
        for (const auto& sp : sig.vector_spaces)
            s["vector_spaces"].push_back(
                {{"dofs", sp.dofs}, {"deriv_terms", sp.deriv_terms}, {"components", sp.components}});
        s["affine_geometry"] = sig.affine_geometry;
        s["word_bytes"] = sig.word_bytes;
        j["signature"] = s;
        j["usable_flops_per_cell"] = flops;
        j["local_words_per_cell"] = local.total();
        j["cells"] = cells;
        j["device"] = dev.name;
        j["roofline"] = {{"ai_global_flop_per_byte", roof.ai_global},
                         {"ai_local_flop_per_byte", roof.ai_local},
                         {"gflops", roof.gflops},
                         {"binding", binding_name(roof.binding)}};
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::cout << "form: " << form.label << "\n";
    std::cout << "dim: " << sig.dim << "  quad_points: " << sig.quad_points
              << "  test_dofs: " << sig.test_dofs << "  test_deriv_terms: " << sig.test_deriv_terms
              << "\n";
    for (const auto& sp : sig.scalar_spaces)
        std::cout << "scalar space: dofs " << sp.dofs << ", deriv terms " << sp.deriv_terms << "\n";
    for (const auto& sp : sig.vector_spaces)
        std::cout << "vector space: dofs " << sp.dofs << ", deriv terms " << sp.deriv_terms << "\n";
    std::cout << "usable flops per cell: " << flops << "\n";
    std::cout << "local words per cell: " << local.total() << "\n";
    std::cout << "cells: " << cells << "  device: " << dev.name << "\n";
    std::cout << "roofline: " << sec_str(roof.gflops) << " GFLOP/s, binding "
              << binding_name(roof.binding) << " (AI_global " << sec_str(roof.ai_global)
              << ", AI_local " << sec_str(roof.ai_local) << " FLOP/B)\n";
}

void cmd_enumerate(const ResolvedForm& form, const SearchConfig& cfg, bool count_only,
                   long long limit, const std::string& format) {
    if (count_only) {
        const long long count = cardinality(form.sig, cfg);
        if (format == "json")
            std::cout << json{{"form", form.label}, {"cardinality", count}}.dump(2) << "\n";
        else
            std::cout << "cardinality: " << count << "\n";
        return;
    }
    json rows = json::array();
    long long emitted = 0;
    for_each_candidate(form.sig, cfg, [&](const TilingParams& p) {
        if (format == "json") {
            json row = tiling_json(p);
            row["eta_simd"] = ratio_str(eta_simd(p.cells_per_group, p.lanes_per_cell));
            row["eta_alias"] = ratio_str(eta_alias(form.sig, p));
            rows.push_back(row);
        } else {
            std::cout << tiling_str(p) << "  eta_simd="
                      << ratio_str(eta_simd(p.cells_per_group, p.lanes_per_cell))
                      << " eta_alias=" << ratio_str(eta_alias(form.sig, p)) << "\n";
        }
        ++emitted;
        return limit <= 0 || emitted < limit;
    });
    if (format == "json") std::cout << rows.dump(2) << "\n";
}

json candidate_row(int index, const Candidate& c, long long cells) {
    json row;
    row["rank"] = index;
    row["params"] = tiling_json(c.params);
    row["qoi"] = qoi_json(c.qoi);
    if (c.cost) {
        row["seconds_per_cell"] = sec_str(c.cost->seconds_per_cell);
        row["seconds_total"] = sec_str(c.cost->seconds(cells));
        row["resident_subgroups"] = c.cost->residency.subgroups;
    } else {
        row["seconds_per_cell"] = nullptr;
        row["seconds_total"] = nullptr;
    }
    return row;
}

void cmd_rank(const ResolvedForm& form, const DeviceSpec& dev, const SearchConfig& cfg,
              long long cells, const std::string& format) {
    const auto ranked = rank(form.sig, dev, cfg);
    if (format == "json") {
        json j;
        j["form"] = form.label;
        j["device"] = dev.name;
        j["cells"] = cells;
        j["candidates"] = json::array();
        for (std::size_t i = 0; i < ranked.size(); ++i)
            j["candidates"].push_back(candidate_row(static_cast<int>(i), ranked[i], cells));
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::cout << "form " << form.label << " on " << dev.name << ", " << cells << " cells\n";
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        const auto& c = ranked[i];
        std::cout << i << ": " << tiling_str(c.params) << "  barriers=" << c.qoi.barriers
                  << " local_words=" << c.qoi.local_words
                  << " eta_simd=" << ratio_str(c.qoi.simd_efficiency)
                  << " eta_pred=" << ratio_str(c.qoi.predication_efficiency)
                  << " eta_alias=" << ratio_str(c.qoi.alias_efficiency);
        if (c.cost)
            std::cout << " t_heur=" << sec_str(c.cost->seconds(cells)) << "s";
        else
            std::cout << " t_heur=-";
        std::cout << "\n";
    }
}

ProblemInstance instance_for(const ResolvedForm& form, long long cells, std::uint64_t seed) {
    if (form.instance) return *form.instance;
    return make_problem(form.sig, form.map, static_cast<int>(cells), seed);
}

void cmd_simulate(const ResolvedForm& form, const TilingParams& params, const SearchConfig& cfg,
                  long long cells, std::uint64_t seed, const std::string& format) {
    if (params.kind == ScheduleKind::MultiLevelTiling && !satisfies_constraints(form.sig, params, cfg))
        throw InfeasibleError("candidate violates the search-space constraints; "
                              "it would never be enumerated");
    const auto inst = instance_for(form, cells, seed);
    const auto plan = build_plan(inst.signature, params);
    const auto trace = run_schedule(inst, plan);
    const auto ref = reference_action(inst);
    double max_rel = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double denom = std::max(std::abs(ref[i]), 1e-30);
        max_rel = std::max(max_rel, std::abs(trace.output[i] - ref[i]) / denom);
    }
    const auto cen = census(trace, inst.signature, params, inst.connectivity.cell_count);
    const bool ok = max_rel <= 1e-10 && cen.all_pass();

    if (format == "json") {
        json j;
        j["form"] = form.label;
        j["params"] = tiling_json(params);
        j["cells"] = inst.connectivity.cell_count;
        j["workgroups"] = trace.workgroups;
        const auto& c = trace.counters;
        j["trace"] = {{"barriers_per_workgroup", c.barriers_per_workgroup},
                      {"flops_matvec", c.flops_matvec},
                      {"flops_masked_padding", c.flops_masked_padding},
                      {"gather_words", c.gather_words},
                      {"scatter_words", c.scatter_words},
                      {"reference_words", c.reference_words},
                      {"local_eval_read_words", c.local_eval_read_words},
                      {"local_eval_write_words", c.local_eval_write_words},
                      {"local_quad_read_words", c.local_quad_read_words},
                      {"local_words_highwater", c.local_words_highwater},
                      {"masked_lane_fraction", ratio_json(trace.masked_lane_fraction)}};
        j["conformance"] = json::array();
        for (const auto& e : cen.entries)
            j["conformance"].push_back({{"quantity", e.quantity},
                                        {"expected", e.expected},
                                        {"actual", e.actual},
                                        {"pass", e.pass}});
        j["max_rel_error_vs_reference"] = max_rel;
        j["pass"] = ok;
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "simulated " << form.label << " with " << tiling_str(params) << "\n";
        const auto& c = trace.counters;
        std::cout << "workgroups: " << trace.workgroups
                  << "  barriers/workgroup: " << c.barriers_per_workgroup << "\n";
        std::cout << "flops: usable " << c.flops_matvec << ", masked padding "
                  << c.flops_masked_padding << "\n";
        std::cout << "words: gather " << c.gather_words << ", scatter " << c.scatter_words
                  << ", reference " << c.reference_words << "\n";
        std::cout << "local words: eval read " << c.local_eval_read_words << ", eval write "
                  << c.local_eval_write_words << ", quad read " << c.local_quad_read_words
                  << ", high water " << c.local_words_highwater << "\n";
        std::cout << "masked lane fraction: " << ratio_str(trace.masked_lane_fraction) << "\n";
        for (const auto& e : cen.entries)
            std::cout << (e.pass ? "  ok  " : "  FAIL") << "  " << e.quantity << ": expected "
                      << e.expected << ", counted " << e.actual << "\n";
        std::cout << "max relative error vs reference: " << sec_str(max_rel) << "\n";
        std::cout << (ok ? "PASS" : "FAIL") << "\n";
    }
    if (!ok) throw VerificationError("simulation disagrees with its closed forms or the reference");
}

void cmd_tune(const ResolvedForm& form, const DeviceSpec& dev, const SearchConfig& cfg,
              long long cells, std::uint64_t seed, int jobs, const std::string& format) {
    const auto inst = instance_for(form, cells, seed);
    const auto result = tune(inst, dev, cfg, jobs);
    if (format == "json") {
        json j;
        j["form"] = form.label;
        j["device"] = dev.name;
        j["winner"] = tiling_json(result.winner.params);
        j["records"] = json::array();
        for (const auto& rec : result.records) {
            json row;
            row["params"] = tiling_json(rec.candidate.params);
            row["max_rel_error"] = rec.max_rel_error;
            row["output_ok"] = rec.output_ok;
            row["counters_ok"] = rec.counters_ok;
            row["selection_seconds"] = std::isfinite(rec.selection_seconds)
                                           ? json(sec_str(rec.selection_seconds))
                                           : json(nullptr);
            j["records"].push_back(row);
        }
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::cout << "tuned " << form.label << " on " << dev.name << " (" << cells << " cells)\n";
    for (const auto& rec : result.records)
        std::cout << "  " << tiling_str(rec.candidate.params) << "  verified="
                  << (rec.output_ok && rec.counters_ok ? "yes" : "no") << " max_rel_err="
                  << sec_str(rec.max_rel_error) << " t="
                  << (std::isfinite(rec.selection_seconds) ? sec_str(rec.selection_seconds) + "s"
                                                           : std::string("-"))
                  << "\n";
    std::cout << "winner: " << tiling_str(result.winner.params) << "\n";
}

void cmd_codegen(const ResolvedForm& form, const TilingParams& params, Dialect dialect,
                 const std::string& out_dir, const DeviceSpec* dev) {
    const KernelSource src = params.kind == ScheduleKind::SingleCellPerWorkItem
                                 ? emit_scpt(form.sig, form.map, dialect)
                                 : emit_mlt(form.sig, form.map, params, dialect, dev);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string ext = dialect == Dialect::cuda ? ".cu" : ".cl";
    const fs::path source_path = fs::path(out_dir) / (src.entry + ext);
    const fs::path manifest_path = fs::path(out_dir) / (src.entry + ".manifest");
    {
        std::ofstream os(source_path, std::ios::binary);
        os << src.source;
    }
    {
        std::ofstream os(manifest_path, std::ios::binary);
        os << manifest_text(src);
    }
    std::cout << "wrote " << source_path.string() << "\n";
    std::cout << "wrote " << manifest_path.string() << "\n";
    std::cout << "workgroup " << src.workgroup_dim0 << " x " << src.workgroup_dim1 << ", grid "
              << src.grid_formula << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FEM action-kernel scheduling: search, cost model, simulation, codegen"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from a config file");
    app.failure_message(CLI::FailureMessage::simple);

    FormOptions form_opts;
    SearchOptions search_opts;
    std::string device_name;
    std::string format = "table";
    std::string candidate_path;
    bool use_scpt = false, use_untiled = false, count_only = false;
    long long cells = -1, limit = 0;
    std::uint64_t seed = 1;
    int jobs = 1;
    std::string dialect_name_opt = "portable";
    std::string out_dir = "generated";

    auto* describe = app.add_subcommand("describe", "signature, flop count, roofline ceiling");
    add_form_options(describe, form_opts, true);
    describe->add_option("--device", device_name, "k40 | titan-v | spec file");
    describe->add_option("--cells", cells, "mesh cell count");
    describe->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

    auto* enumerate = app.add_subcommand("enumerate", "list or count admissible candidates");
    add_form_options(enumerate, form_opts, true);
    add_search_options(enumerate, search_opts);
    enumerate->add_flag("--count-only", count_only, "print the cardinality only");
    enumerate->add_option("--limit", limit, "stop after this many candidates (0 = all)");
    enumerate->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

    auto* rank_cmd = app.add_subcommand("rank", "rank candidates by the heuristic cost model");
    add_form_options(rank_cmd, form_opts, true);
    add_search_options(rank_cmd, search_opts);
    rank_cmd->add_option("--device", device_name, "k40 | titan-v | spec file");
    rank_cmd->add_option("--cells", cells, "mesh cell count");
    rank_cmd->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

    auto* simulate = app.add_subcommand("simulate", "run one candidate on the work-group simulator");
    add_form_options(simulate, form_opts, true);
    add_search_options(simulate, search_opts);
    simulate->add_option("--candidate", candidate_path, "candidate file");
    simulate->add_flag("--scpt", use_scpt, "simulate the single-cell-per-work-item variant");
    simulate->add_flag("--untiled", use_untiled, "simulate the untiled multi-level-tiling point");
    simulate->add_option("--cells", cells, "synthetic mesh cells (default 16)");
    simulate->add_option("--seed", seed, "synthesis seed");
    simulate->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

    auto* tune_cmd = app.add_subcommand("tune", "execute the ranked candidates and pick the winner");
    add_form_options(tune_cmd, form_opts, true);
    add_search_options(tune_cmd, search_opts);
    tune_cmd->add_option("--device", device_name, "k40 | titan-v | spec file");
    tune_cmd->add_option("--cells", cells, "synthetic mesh cells (default 16)");
    tune_cmd->add_option("--seed", seed, "synthesis seed");
    tune_cmd->add_option("--jobs", jobs, "verification worker pool size");
    tune_cmd->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

    auto* codegen = app.add_subcommand("codegen", "emit kernel source text and a manifest");
    add_form_options(codegen, form_opts, false);
    codegen->add_option("--candidate", candidate_path, "candidate file");
    codegen->add_flag("--scpt", use_scpt, "emit the single-cell-per-work-item kernel");
    codegen->add_flag("--untiled", use_untiled, "emit the untiled multi-level-tiling kernel");
    codegen->add_option("--dialect", dialect_name_opt)
        ->check(CLI::IsMember({"portable", "opencl", "cuda"}));
    codegen->add_option("--out", out_dir, "output directory");
    codegen->add_option("--device", device_name, "reject kernels that cannot launch on this device");

    for (auto* sub : {describe, enumerate, rank_cmd, simulate, tune_cmd, codegen})
        sub->fallthrough();  // global options like --config stay usable after the subcommand

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", e.what()}, {"code", kExitUsage}}.dump() << "\n";
        return kExitUsage;
    }

    try {
        auto pick_candidate = [&](const ResolvedForm& form) -> TilingParams {
            const int sources = (!candidate_path.empty()) + use_scpt + use_untiled;
            if (sources != 1)
                throw UsageError("pick exactly one of --candidate, --scpt, --untiled");
            if (use_scpt) return TilingParams::scpt();
            if (use_untiled) return TilingParams::untiled(form.sig, 32, 1);
            auto p = load_candidate_file(candidate_path);
            p.validate(form.sig);
            return p;
        };

        if (app.got_subcommand(describe)) {
            auto form = resolve_form(form_opts);
            auto dev = resolve_device(device_name);
            cmd_describe(form, dev, cells > 0 ? cells : default_cells(form.sig), format);
        } else if (app.got_subcommand(enumerate)) {
            auto form = resolve_form(form_opts);
            cmd_enumerate(form, search_opts.to_config(), count_only, limit, format);
        } else if (app.got_subcommand(rank_cmd)) {
            auto form = resolve_form(form_opts);
            auto dev = resolve_device(device_name);
            cmd_rank(form, dev, search_opts.to_config(), cells > 0 ? cells : default_cells(form.sig),
                     format);
        } else if (app.got_subcommand(simulate)) {
            auto form = resolve_form(form_opts);
            cmd_simulate(form, pick_candidate(form), search_opts.to_config(),
                         cells > 0 ? cells : 16, seed, format);
        } else if (app.got_subcommand(tune_cmd)) {
            auto form = resolve_form(form_opts);
            auto dev = resolve_device(device_name);
            cmd_tune(form, dev, search_opts.to_config(), cells > 0 ? cells : 16, seed, jobs, format);
        } else if (app.got_subcommand(codegen)) {
            auto form = resolve_form(form_opts);
            std::optional<DeviceSpec> dev;
            if (!device_name.empty()) dev = resolve_device(device_name);
            cmd_codegen(form, pick_candidate(form), dialect_from_name(dialect_name_opt), out_dir,
                        dev ? &*dev : nullptr);
        }
    } catch (const UsageError& e) {
        std::cerr << json{{"error", e.what()}, {"code", kExitUsage}}.dump() << "\n";
        return kExitUsage;
    } catch (const InfeasibleError& e) {
        std::cerr << json{{"error", e.what()}, {"code", kExitInfeasible}}.dump() << "\n";
        return kExitInfeasible;
    } catch (const VerificationError& e) {
        std::cerr << json{{"error", e.what()}, {"code", kExitVerification}}.dump() << "\n";
        return kExitVerification;
    } catch (const std::invalid_argument& e) {
        std::cerr << json{{"error", e.what()}, {"code", kExitUsage}}.dump() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"code", 1}}.dump() << "\n";
        return 1;
    }
    return 0;
}
