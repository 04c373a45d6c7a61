#pragma once

// Bounded transformation space: tile sizes drawn from ceil-divisor sets,
// work-group shapes filtered by SIMD efficiency and a size cap, tile tuples
// filtered by the aliasing floor. Candidates are ranked by the heuristic
// cost model and the b best (plus the unconditional single-cell-per-work-item
// variant) are verified by execution.

#include <functional>
#include <future>
#include <optional>

#include "femsched/perf_model.hpp"
#include "femsched/simulate.hpp"

namespace femsched {

struct SearchConfig {
    Ratio alias_floor{4, 5};
    Ratio simd_floor{97, 100};
    int workgroup_cap = 256;
    int best_count = 9;     // candidates kept from the ranked list
    int pair_cap = 256;     // per-axis bound while enumerating work-group shapes

    void validate() const {
        if (alias_floor <= Ratio(0) || alias_floor > Ratio(1) || simd_floor <= Ratio(0) ||
            simd_floor > Ratio(1))
            throw std::invalid_argument("search: efficiency floors must lie in (0, 1]");
        if (workgroup_cap < 1 || best_count < 1 || pair_cap < 1)
            throw std::invalid_argument("search: caps must be >= 1");
    }
};

/// {ceil(n/1), ceil(n/2), ...} deduplicated, descending. These are the tile
/// sizes that use the least memory for their pass count: any size strictly
/// between two members buys no fewer passes but a larger tile.
inline std::vector<int> ceil_divisor_set(int n) {
    if (n < 1) throw std::invalid_argument("ceil_divisor_set: n >= 1 required");
    std::vector<int> out;
    for (int k = 1; k <= n; ++k) {
        const int v = static_cast<int>(ceil_div(n, k));
        if (out.empty() || out.back() != v) out.push_back(v);
    }
    return out;
}

inline bool in_ceil_divisor_set(int value, int n) {
    if (value < 1 || value > n) return false;
    return value == ceil_div(n, ceil_div(n, value));
}

// ---------------------------------------------------------------------------
// The four constraints, re-checkable independently of the enumerator
// ---------------------------------------------------------------------------

inline bool satisfies_tile_sets(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling) return false;
    if (!in_ceil_divisor_set(p.quad_tile, sig.quad_points)) return false;
    if (!in_ceil_divisor_set(p.eval_row_tile, p.quad_tile)) return false;
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        if (!in_ceil_divisor_set(p.eval_col_tiles_scalar[i], sig.scalar_spaces[i].dofs)) return false;
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        if (!in_ceil_divisor_set(p.eval_col_tiles_vector[i], sig.vector_spaces[i].dofs)) return false;
    if (!in_ceil_divisor_set(p.quad_row_tile, sig.test_dofs)) return false;
    if (!in_ceil_divisor_set(p.quad_col_tile, p.quad_tile)) return false;
    return true;
}

inline bool satisfies_alias_floor(const FormSignature& sig, const TilingParams& p,
                                  const SearchConfig& cfg) {
    return eta_alias(sig, p) >= cfg.alias_floor;
}

inline bool satisfies_simd_floor(const TilingParams& p, const SearchConfig& cfg) {
    return eta_simd(p.cells_per_group, p.lanes_per_cell) >= cfg.simd_floor;
}

inline bool satisfies_workgroup_cap(const TilingParams& p, const SearchConfig& cfg) {
    return p.cells_per_group * p.lanes_per_cell <= cfg.workgroup_cap;
}

inline bool satisfies_constraints(const FormSignature& sig, const TilingParams& p,
                                  const SearchConfig& cfg) {
    return satisfies_tile_sets(sig, p) && satisfies_alias_floor(sig, p, cfg) &&
           satisfies_simd_floor(p, cfg) && satisfies_workgroup_cap(p, cfg);
}

// ---------------------------------------------------------------------------
// Enumeration
// ---------------------------------------------------------------------------

/// Admissible (cells_per_group, lanes_per_cell) pairs in ascending
/// lexicographic order.
inline std::vector<std::pair<int, int>> workgroup_shapes(const SearchConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<int, int>> shapes;
    for (int nc = 1; nc <= std::min(cfg.pair_cap, cfg.workgroup_cap); ++nc)
        for (int wi = 1; wi <= std::min(cfg.pair_cap, cfg.workgroup_cap / nc); ++wi)
            if (eta_simd(nc, wi) >= cfg.simd_floor) shapes.emplace_back(nc, wi);
    return shapes;
}

/// Visits every admissible candidate in a deterministic nested order: tile
/// sets descending, work-group shapes ascending. The visitor returns false
/// to stop early.
template <typename Visitor>
void for_each_candidate(const FormSignature& sig, const SearchConfig& cfg, Visitor&& visit) {
    sig.validate();
    cfg.validate();
    const auto shapes = workgroup_shapes(cfg);
    const int n_scalar = static_cast<int>(sig.scalar_spaces.size());
    const int n_vector = static_cast<int>(sig.vector_spaces.size());

    TilingParams p;
    p.kind = ScheduleKind::MultiLevelTiling;
    p.eval_col_tiles_scalar.assign(n_scalar, 1);
    p.eval_col_tiles_vector.assign(n_vector, 1);

    std::vector<std::vector<int>> scalar_sets, vector_sets;
    for (const auto& s : sig.scalar_spaces) scalar_sets.push_back(ceil_divisor_set(s.dofs));
    for (const auto& v : sig.vector_spaces) vector_sets.push_back(ceil_divisor_set(v.dofs));
    const auto quad_row_set = ceil_divisor_set(sig.test_dofs);

    bool keep_going = true;
    auto emit_shapes = [&]() {
        if (eta_alias(sig, p) < cfg.alias_floor) return;
        for (const auto& [nc, wi] : shapes) {
            p.cells_per_group = nc;
            p.lanes_per_cell = wi;
            if (!visit(static_cast<const TilingParams&>(p))) {
                keep_going = false;
                return;
            }
        }
    };

    // nested column-tile choice over a variable number of spaces
    std::function<void(int)> choose_cols = [&](int space) {
        if (!keep_going) return;
        if (space == n_scalar + n_vector) {
            for (int tqr : quad_row_set) {
                p.quad_row_tile = tqr;
                for (int tqc : ceil_divisor_set(p.quad_tile)) {
                    p.quad_col_tile = tqc;
                    emit_shapes();
                    if (!keep_going) return;
                }
            }
            return;
        }
        const bool is_vec = space >= n_scalar;
        const auto& set = is_vec ? vector_sets[space - n_scalar] : scalar_sets[space];
        for (int tc : set) {
            if (is_vec)
                p.eval_col_tiles_vector[space - n_scalar] = tc;
            else
                p.eval_col_tiles_scalar[space] = tc;
            choose_cols(space + 1);
            if (!keep_going) return;
        }
    };

    for (int tq : ceil_divisor_set(sig.quad_points)) {
        p.quad_tile = tq;
        for (int ter : ceil_divisor_set(tq)) {
            p.eval_row_tile = ter;
            choose_cols(0);
            if (!keep_going) return;
        }
    }
}

inline std::vector<TilingParams> enumerate_candidates(const FormSignature& sig,
                                                      const SearchConfig& cfg) {
    std::vector<TilingParams> out;
    for_each_candidate(sig, cfg, [&](const TilingParams& p) {
        out.push_back(p);
        return true;
    });
    return out;
}

/// Candidate count without materializing the stream.
inline long long cardinality(const FormSignature& sig, const SearchConfig& cfg) {
    long long count = 0;
    for_each_candidate(sig, cfg, [&](const TilingParams&) {
        ++count;
        return true;
    });
    return count;
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

struct Candidate {
    TilingParams params;
    QoIReport qoi;
    std::optional<CostEstimate> cost;  // absent for the single-cell-per-work-item variant

    double seconds_per_cell() const {
        return cost ? cost->seconds_per_cell : std::numeric_limits<double>::infinity();
    }
};

/// The best_count lowest-modeled-time candidates in ascending order, ties
/// broken lexicographically on the tile tuple, with the
/// single-cell-per-work-item variant appended unconditionally. Candidates
/// whose local memory cannot launch on the device are dropped.
inline std::vector<Candidate> rank(const FormSignature& sig, const DeviceSpec& dev,
                                   const SearchConfig& cfg) {
    dev.validate();
    struct Entry {
        double seconds;
        std::vector<int> key;
        Candidate candidate;
    };
    std::vector<Entry> best;
    auto worse = [](const Entry& a, const Entry& b) {
        if (a.seconds != b.seconds) return a.seconds < b.seconds;
        return a.key < b.key;
    };

    long long seen = 0;
    for_each_candidate(sig, cfg, [&](const TilingParams& p) {
        ++seen;
        CostEstimate est;
        try {
            est = estimate_cost(sig, p, dev);
        } catch (const InfeasibleError&) {
            return true;  // cannot launch on this device
        }
        Entry e{est.seconds_per_cell, p.order_key(), Candidate{p, est.qoi, est}};
        auto pos = std::upper_bound(best.begin(), best.end(), e, worse);
        if (pos != best.end() || static_cast<int>(best.size()) < cfg.best_count)
            best.insert(pos, std::move(e));
        if (static_cast<int>(best.size()) > cfg.best_count) best.pop_back();
        return true;
    });
    if (seen == 0) throw std::runtime_error("rank: the search space is empty");

    std::vector<Candidate> out;
    out.reserve(best.size() + 1);
    for (auto& e : best) out.push_back(std::move(e.candidate));
    Candidate scpt;
    scpt.params = TilingParams::scpt();
    scpt.qoi = qoi_report(sig, scpt.params);
    out.push_back(std::move(scpt));
    return out;
}

// ---------------------------------------------------------------------------
// Tuning: execute the ranked candidates, verify, pick the winner
// ---------------------------------------------------------------------------

struct ExecutionOutcome {
    bool ok = false;
    std::string error;
    std::vector<double> output;
    std::optional<double> measured_seconds;  // external executors report wall time
    TraceCounters counters;
    long long workgroups = 0;
};

using Executor = std::function<ExecutionOutcome(const TilingParams&, const ProblemInstance&)>;

/// Built-in executor: the deterministic work-group simulator.
inline Executor simulator_executor() {
    return [](const TilingParams& p, const ProblemInstance& inst) {
        ExecutionOutcome out;
        try {
            auto trace = run_schedule(inst, build_plan(inst.signature, p));
            out.ok = true;
            out.output = std::move(trace.output);
            out.counters = trace.counters;
            out.workgroups = trace.workgroups;
        } catch (const std::exception& e) {
            out.error = e.what();
        }
        return out;
    };
}

struct VerificationRecord {
    Candidate candidate;
    double max_rel_error = 0.0;
    bool output_ok = false;
    bool counters_ok = false;
    std::string detail;
    double selection_seconds = std::numeric_limits<double>::infinity();
};

struct TuneResult {
    Candidate winner;
    std::vector<VerificationRecord> records;
};

namespace detail {

inline std::string describe(const TilingParams& p) {
    if (p.kind == ScheduleKind::SingleCellPerWorkItem) return "single-cell-per-work-item";
    std::string s = "mlt(TQ=" + std::to_string(p.quad_tile) + ",Ter=" + std::to_string(p.eval_row_tile) +
                    ",Tc=";
    for (int t : p.eval_col_tiles_scalar) s += std::to_string(t) + ",";
    for (int t : p.eval_col_tiles_vector) s += std::to_string(t) + ",";
    s += "Tqr=" + std::to_string(p.quad_row_tile) + ",Tqc=" + std::to_string(p.quad_col_tile) +
         ",Nc=" + std::to_string(p.cells_per_group) + ",Nwi=" + std::to_string(p.lanes_per_cell) + ")";
    return s;
}

// Heuristic time recomputed from counted words rather than the closed forms;
// once the census has passed the two agree exactly.
inline double seconds_from_counters(const FormSignature& sig, const TilingParams& p,
                                    const TraceCounters& c, long long n_cells, long long workgroups,
                                    const DeviceSpec& dev) {
    const Ratio gather(c.gather_words, n_cells);
    const Ratio scatter(c.scatter_words, n_cells);
    const Ratio reference(c.reference_words, workgroups * p.cells_per_group);
    const Ratio local_words(c.local_eval_read_words + c.local_eval_write_words +
                                c.local_quad_read_words,
                            n_cells);
    const Ratio pred(c.flops_matvec, c.flops_matvec + c.flops_masked_padding);
    const auto res = residency(p, c.local_words_highwater, sig.word_bytes, dev, pred,
                               eta_simd(p.cells_per_group, p.lanes_per_cell));
    const auto bw = modeled_bandwidths(res.effective, dev);
    const double gbytes = boost::rational_cast<double>(gather + scatter + reference) * sig.word_bytes;
    const double lbytes = boost::rational_cast<double>(local_words) * sig.word_bytes;
    return gbytes / (bw.global_gbs * 1e9) + lbytes / (bw.local_gbs * 1e9);
}

}  // namespace detail

/// Executes every ranked candidate, checks the output against the reference
/// action and (for simulator runs) the counter census, then selects the
/// winner: lowest measured time when the executor reports one, otherwise the
/// counter-derived heuristic time. Any equivalence failure aborts.
inline TuneResult tune(const ProblemInstance& inst, const DeviceSpec& dev, const SearchConfig& cfg,
                       int jobs = 1, Executor executor = {}) {
    inst.validate();
    const bool builtin = !executor;
    if (builtin) executor = simulator_executor();
    const auto ranked = rank(inst.signature, dev, cfg);
    const auto reference = reference_action(inst);
    const long long n_cells = inst.connectivity.cell_count;

    auto verify_one = [&](const Candidate& cand) {
        VerificationRecord rec;
        rec.candidate = cand;
        auto outcome = executor(cand.params, inst);
        if (!outcome.ok)
            throw VerificationError("tune: execution failed for " + detail::describe(cand.params) +
                                    ": " + outcome.error);
        if (outcome.measured_seconds && !std::isfinite(*outcome.measured_seconds))
            throw VerificationError("tune: non-finite measured time for " +
                                    detail::describe(cand.params));
        if (outcome.output.size() != reference.size())
            throw VerificationError("tune: output length mismatch for " +
                                    detail::describe(cand.params));
        for (std::size_t i = 0; i < reference.size(); ++i) {
            const double denom = std::max(std::abs(reference[i]), 1e-30);
            rec.max_rel_error = std::max(rec.max_rel_error,
                                         std::abs(outcome.output[i] - reference[i]) / denom);
        }
        rec.output_ok = rec.max_rel_error <= 1e-10;
        if (!rec.output_ok)
            throw VerificationError("tune: " + detail::describe(cand.params) +
                                    " diverges from the reference action (max relative error " +
                                    std::to_string(rec.max_rel_error) + ")");
        if (builtin) {
            SimTrace shim;
            shim.counters = outcome.counters;
            auto cen = census(shim, inst.signature, cand.params, static_cast<int>(n_cells));
            rec.counters_ok = cen.all_pass();
            if (!rec.counters_ok) {
                const auto* f = cen.first_failure();
                throw VerificationError("tune: counter mismatch for " +
                                        detail::describe(cand.params) + " on " + f->quantity);
            }
        } else {
            rec.counters_ok = true;  // external executors are not census-checked
        }
        if (outcome.measured_seconds) {
            rec.selection_seconds = *outcome.measured_seconds;
        } else if (cand.params.kind == ScheduleKind::MultiLevelTiling) {
            rec.selection_seconds =
                detail::seconds_from_counters(inst.signature, cand.params, outcome.counters, n_cells,
                                              outcome.workgroups, dev) *
                static_cast<double>(n_cells);
        }
        return rec;
    };

    TuneResult result;
    result.records.resize(ranked.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < ranked.size(); ++i) result.records[i] = verify_one(ranked[i]);
    } else {
        std::vector<std::future<VerificationRecord>> futures(ranked.size());
        for (std::size_t i = 0; i < ranked.size(); ++i)
            futures[i] = std::async(std::launch::async, verify_one, std::cref(ranked[i]));
        for (std::size_t i = 0; i < ranked.size(); ++i) result.records[i] = futures[i].get();
    }

    std::size_t winner = 0;
    for (std::size_t i = 1; i < result.records.size(); ++i) {
        const auto& a = result.records[i];
        const auto& w = result.records[winner];
        if (a.selection_seconds < w.selection_seconds ||
            (a.selection_seconds == w.selection_seconds &&
             a.candidate.params.order_key() < w.candidate.params.order_key()))
            winner = i;
    }
    result.winner = result.records[winner].candidate;
    return result;
}

}  // namespace femsched
