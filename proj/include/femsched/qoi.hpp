#pragma once

// Closed-form quantities of interest for one (signature, tiling) pair:
// barrier count, local-memory words, SIMD / predication / aliasing
// efficiencies, and the usable-vs-performed FLOP split. Everything here is
// exact integer or rational arithmetic; the work-group simulator re-derives
// the same numbers by counting and the two routes are asserted equal in the
// test suite.

#include <boost/rational.hpp>

#include "femsched/form.hpp"

namespace femsched {

using Ratio = boost::rational<long long>;

enum class ScheduleKind { SingleCellPerWorkItem, MultiLevelTiling };

/// One point in the transformation space. SingleCellPerWorkItem carries no
/// tile fields (fixed 32 x 1 work-group); MultiLevelTiling carries the full
/// tile tuple plus the work-group shape.
struct TilingParams {
    ScheduleKind kind = ScheduleKind::MultiLevelTiling;

    int quad_tile = 1;                       // quadrature points per outer tile
    int eval_row_tile = 1;                   // evaluation-phase row tile
    std::vector<int> eval_col_tiles_scalar;  // one per scalar trial space
    std::vector<int> eval_col_tiles_vector;  // one per vector trial space
    int quad_row_tile = 1;                   // quadrature-phase row tile
    int quad_col_tile = 1;                   // quadrature-phase column tile
    int cells_per_group = 1;
    int lanes_per_cell = 1;

    static TilingParams scpt() {
        TilingParams p;
        p.kind = ScheduleKind::SingleCellPerWorkItem;
        p.eval_col_tiles_scalar.clear();
        p.eval_col_tiles_vector.clear();
        return p;
    }

    /// Untiled multi-level-tiling point: every tile spans its full loop.
    static TilingParams untiled(const FormSignature& sig, int cells_per_group = 1,
                                int lanes_per_cell = 1) {
        TilingParams p;
        p.kind = ScheduleKind::MultiLevelTiling;
        p.quad_tile = sig.quad_points;
        p.eval_row_tile = sig.quad_points;
        for (const auto& s : sig.scalar_spaces) p.eval_col_tiles_scalar.push_back(s.dofs);
        for (const auto& v : sig.vector_spaces) p.eval_col_tiles_vector.push_back(v.dofs);
        p.quad_row_tile = sig.test_dofs;
        p.quad_col_tile = sig.quad_points;
        p.cells_per_group = cells_per_group;
        p.lanes_per_cell = lanes_per_cell;
        return p;
    }

    int group_size() const {
        return kind == ScheduleKind::SingleCellPerWorkItem ? kSubgroupSize
                                                           : cells_per_group * lanes_per_cell;
    }

    void validate(const FormSignature& sig) const {
        if (kind == ScheduleKind::SingleCellPerWorkItem) {
            if (!eval_col_tiles_scalar.empty() || !eval_col_tiles_vector.empty())
                throw std::invalid_argument("tiling: single-cell-per-work-item carries no tile fields");
            return;
        }
        if (cells_per_group < 1 || lanes_per_cell < 1)
            throw std::invalid_argument("tiling: work-group factors must be >= 1");
        if (quad_tile < 1 || quad_tile > sig.quad_points)
            throw std::invalid_argument("tiling: quad_tile must be in [1, quad_points]");
        if (eval_row_tile < 1 || eval_row_tile > quad_tile)
            throw std::invalid_argument("tiling: eval_row_tile must be in [1, quad_tile]");
        if (eval_col_tiles_scalar.size() != sig.scalar_spaces.size() ||
            eval_col_tiles_vector.size() != sig.vector_spaces.size())
            throw std::invalid_argument("tiling: one column tile per trial space required");
        for (std::size_t i = 0; i < eval_col_tiles_scalar.size(); ++i)
            if (eval_col_tiles_scalar[i] < 1 || eval_col_tiles_scalar[i] > sig.scalar_spaces[i].dofs)
                throw std::invalid_argument("tiling: scalar column tile out of range");
        for (std::size_t i = 0; i < eval_col_tiles_vector.size(); ++i)
            if (eval_col_tiles_vector[i] < 1 || eval_col_tiles_vector[i] > sig.vector_spaces[i].dofs)
                throw std::invalid_argument("tiling: vector column tile out of range");
        if (quad_row_tile < 1 || quad_row_tile > sig.test_dofs)
            throw std::invalid_argument("tiling: quad_row_tile must be in [1, test_dofs]");
        if (quad_col_tile < 1 || quad_col_tile > quad_tile)
            throw std::invalid_argument("tiling: quad_col_tile must be in [1, quad_tile]");
    }

    // Canonical ordering key used for deterministic tie-breaking.
    std::vector<int> order_key() const {
        std::vector<int> key;
        key.push_back(kind == ScheduleKind::SingleCellPerWorkItem ? 1 : 0);
        key.push_back(quad_tile);
        key.push_back(eval_row_tile);
        key.insert(key.end(), eval_col_tiles_scalar.begin(), eval_col_tiles_scalar.end());
        key.insert(key.end(), eval_col_tiles_vector.begin(), eval_col_tiles_vector.end());
        key.push_back(quad_row_tile);
        key.push_back(quad_col_tile);
        key.push_back(cells_per_group);
        key.push_back(lanes_per_cell);
        return key;
    }

    friend bool operator==(const TilingParams& a, const TilingParams& b) {
        return a.order_key() == b.order_key();
    }
};

// ---------------------------------------------------------------------------
// The five quantities of interest
// ---------------------------------------------------------------------------

namespace detail {

// Barriers executed during one quad-tile pass covering q quadrature points.
// Evaluation contributes two per (row tile, space, column tile), quadrature
// two per (row tile, column tile), plus the phase-sync and tile-end pair.
// Zero iterations execute zero barriers: f(0) = 0.
inline long long barriers_per_quad_tile(const FormSignature& sig, const TilingParams& p, long long q) {
    if (q == 0) return 0;
    long long barriers = 0;
    const long long row_tiles = ceil_div(q, p.eval_row_tile);
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        barriers += 2 * row_tiles * ceil_div(sig.scalar_spaces[i].dofs, p.eval_col_tiles_scalar[i]);
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        barriers += 2 * row_tiles * ceil_div(sig.vector_spaces[i].dofs, p.eval_col_tiles_vector[i]);
    barriers += 2 * ceil_div(sig.test_dofs, p.quad_row_tile) * ceil_div(q, p.quad_col_tile);
    barriers += 2;
    return barriers;
}

// Lanes executed (including masked tails rounded up to lanes_per_cell) when a
// loop of `rows` rows is strip-mined by `tile` and driven by `lanes` lanes.
inline long long padded_rows(long long rows, long long tile, long long lanes) {
    return lanes * ((rows / tile) * ceil_div(tile, lanes) + ceil_div(rows % tile, lanes));
}

// Evaluation-phase FLOPs (mul+add) for q quadrature points by one cell's
// lanes, counting masked row lanes as if they executed.
inline long long eval_flops_per_quad_tile(const FormSignature& sig, const TilingParams& p, long long q) {
    if (q == 0) return 0;
    long long cols = 0;
    for (const auto& s : sig.scalar_spaces) cols += static_cast<long long>(s.deriv_terms) * s.dofs;
    for (const auto& v : sig.vector_spaces) cols += static_cast<long long>(v.deriv_terms) * v.dofs;
    return 2 * padded_rows(q, p.eval_row_tile, p.lanes_per_cell) * cols;
}

// Quadrature-phase FLOPs for q quadrature points, same padded-lane semantics.
inline long long quad_flops_per_quad_tile(const FormSignature& sig, const TilingParams& p, long long q) {
    if (q == 0) return 0;
    return 2 * padded_rows(sig.test_dofs, p.quad_row_tile, p.lanes_per_cell) *
           static_cast<long long>(sig.test_deriv_terms) * q;
}

// Prefetched-slab footprints (words) of each phase sharing the aliased buffer.
inline std::vector<long long> phase_footprints(const FormSignature& sig, const TilingParams& p) {
    std::vector<long long> f;
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        f.push_back(static_cast<long long>(sig.scalar_spaces[i].deriv_terms) * p.eval_row_tile *
                    p.eval_col_tiles_scalar[i]);
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        f.push_back(static_cast<long long>(sig.vector_spaces[i].deriv_terms) * p.eval_row_tile *
                    p.eval_col_tiles_vector[i]);
    f.push_back(static_cast<long long>(sig.test_deriv_terms) * p.quad_row_tile * p.quad_col_tile);
    return f;
}

}  // namespace detail

/// Work-group barriers executed from kernel start to end.
inline long long n_sync(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("n_sync: single-cell-per-work-item has no barriers by construction");
    p.validate(sig);
    const long long q = sig.quad_points;
    return (q / p.quad_tile) * detail::barriers_per_quad_tile(sig, p, p.quad_tile) +
           detail::barriers_per_quad_tile(sig, p, q % p.quad_tile);
}

struct LocalMemWords {
    long long total = 0;    // aliased prefetch buffer + evaluation results
    long long buffer = 0;   // aliased prefetch buffer alone
};

/// Local-memory words allocated per work-group: the aliased prefetch buffer
/// (max over phase footprints) plus the array-expanded evaluation results.
inline LocalMemWords local_mem_words(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("local_mem_words: single-cell-per-work-item allocates no local memory");
    p.validate(sig);
    const auto footprints = detail::phase_footprints(sig, p);
    LocalMemWords w;
    w.buffer = *std::max_element(footprints.begin(), footprints.end());
    w.total = w.buffer + static_cast<long long>(p.cells_per_group) * p.quad_tile * sig.test_deriv_terms;
    return w;
}

/// Occupied fraction of the sub-groups spanned by an N_c x N_WI work-group.
inline Ratio eta_simd(int cells_per_group, int lanes_per_cell) {
    const long long lanes = static_cast<long long>(cells_per_group) * lanes_per_cell;
    if (lanes < 1) throw std::invalid_argument("eta_simd: work-group must have at least one lane");
    return Ratio(lanes, kSubgroupSize * ceil_div(lanes, kSubgroupSize));
}

/// FLOPs executed for one cell by its lanes, masked tail lanes included.
inline long long ops_performed(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("ops_performed: single-cell-per-work-item performs exactly the usable FLOPs");
    p.validate(sig);
    const long long q = sig.quad_points;
    const long long full = q / p.quad_tile, rem = q % p.quad_tile;
    return full * (detail::eval_flops_per_quad_tile(sig, p, p.quad_tile) +
                   detail::quad_flops_per_quad_tile(sig, p, p.quad_tile)) +
           detail::eval_flops_per_quad_tile(sig, p, rem) +
           detail::quad_flops_per_quad_tile(sig, p, rem);
}

/// Smallest over largest phase footprint sharing the aliased buffer.
inline Ratio eta_alias(const FormSignature& sig, const TilingParams& p) {
    if (p.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("eta_alias: single-cell-per-work-item has no aliased buffer");
    p.validate(sig);
    const auto f = detail::phase_footprints(sig, p);
    return Ratio(*std::min_element(f.begin(), f.end()), *std::max_element(f.begin(), f.end()));
}

struct QoIReport {
    long long barriers = 0;       // N_sync
    long long local_words = 0;    // total local-memory words per work-group
    long long buffer_words = 0;   // aliased prefetch buffer portion
    Ratio simd_efficiency{1};
    Ratio predication_efficiency{1};
    Ratio alias_efficiency{1};
    long long flops_usable = 0;
    long long flops_performed = 0;

    void check_invariants() const {
        if (predication_efficiency * Ratio(flops_performed) != Ratio(flops_usable))
            throw std::logic_error("qoi: predication efficiency must equal usable/performed");
        if (buffer_words > local_words) throw std::logic_error("qoi: buffer exceeds local total");
    }
};

/// All five quantities for one candidate. Single-cell-per-work-item has no
/// barriers, tiles, or local memory, so it reports the neutral values.
inline QoIReport qoi_report(const FormSignature& sig, const TilingParams& p) {
    QoIReport r;
    r.flops_usable = usable_flops(sig);
    if (p.kind == ScheduleKind::SingleCellPerWorkItem) {
        p.validate(sig);
        r.flops_performed = r.flops_usable;
        r.check_invariants();
        return r;
    }
    const auto mem = local_mem_words(sig, p);
    r.barriers = n_sync(sig, p);
    r.local_words = mem.total;
    r.buffer_words = mem.buffer;
    r.simd_efficiency = eta_simd(p.cells_per_group, p.lanes_per_cell);
    r.flops_performed = ops_performed(sig, p);
    r.predication_efficiency = Ratio(r.flops_usable, r.flops_performed);
    r.alias_efficiency = eta_alias(sig, p);
    r.check_invariants();
    return r;
}

}  // namespace femsched
