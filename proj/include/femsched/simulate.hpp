#pragma once

// Deterministic CPU execution of a scheduled action kernel with lock-step
// work-group semantics. A single run is single-threaded by contract; the
// emulation iterates barrier-delimited phases over the whole work-group
// roster, so barrier counts are uniform across work-groups and emulated
// atomic scatter order is fixed (ascending work-group, cell row, lane).
//
// The trace counters are the independent measurement route for every
// closed-form quantity: barriers, FLOPs split into usable vs masked-lane
// padding, local-memory words, and per-role access counts. Counting rules
// mirror the cost model's caching assumptions and are noted inline.

#include "femsched/perf_model.hpp"
#include "femsched/qoi.hpp"

namespace femsched {

// ---------------------------------------------------------------------------
// Schedule plan: loop/tile structure shared by the simulator and the code
// generator, derived only from (signature, params).
// ---------------------------------------------------------------------------

struct SpacePlan {
    bool is_vector = false;
    int space_index = 0;   // into signature's scalar or vector list
    int dofs = 0;
    int deriv_terms = 0;
    int col_tile = 0;
    long long term_stride = 0;  // eval_row_tile * col_tile words per derivative term
};

struct SchedulePlan {
    FormSignature sig;
    TilingParams params;
    std::vector<SpacePlan> spaces;   // scalar spaces first, then vector spaces
    long long buffer_words = 0;      // aliased prefetch buffer
    long long eval_result_words = 0; // array-expanded evaluation results
    long long local_words = 0;
    int barrier_sites = 0;           // static barrier call sites in the kernel body
    int quad_tiles = 0;

    int quad_tile_size(int tile) const {
        if (params.kind != ScheduleKind::MultiLevelTiling) return sig.quad_points;
        const int full = sig.quad_points / params.quad_tile;
        return tile < full ? params.quad_tile : sig.quad_points % params.quad_tile;
    }
};

inline SchedulePlan build_plan(const FormSignature& sig, const TilingParams& p) {
    sig.validate();
    p.validate(sig);
    SchedulePlan plan;
    plan.sig = sig;
    plan.params = p;
    if (p.kind == ScheduleKind::SingleCellPerWorkItem) return plan;

    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        SpacePlan s;
        s.is_vector = false;
        s.space_index = static_cast<int>(i);
        s.dofs = sig.scalar_spaces[i].dofs;
        s.deriv_terms = sig.scalar_spaces[i].deriv_terms;
        s.col_tile = p.eval_col_tiles_scalar[i];
        s.term_stride = static_cast<long long>(p.eval_row_tile) * s.col_tile;
        plan.spaces.push_back(s);
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        SpacePlan s;
        s.is_vector = true;
        s.space_index = static_cast<int>(i);
        s.dofs = sig.vector_spaces[i].dofs;
        s.deriv_terms = sig.vector_spaces[i].deriv_terms;
        s.col_tile = p.eval_col_tiles_vector[i];
        s.term_stride = static_cast<long long>(p.eval_row_tile) * s.col_tile;
        plan.spaces.push_back(s);
    }
    const auto mem = local_mem_words(sig, p);
    plan.buffer_words = mem.buffer;
    plan.eval_result_words = static_cast<long long>(p.cells_per_group) * p.quad_tile * sig.test_deriv_terms;
    plan.local_words = mem.total;
    plan.barrier_sites = 2 * static_cast<int>(plan.spaces.size()) + 4;
    plan.quad_tiles = static_cast<int>(ceil_div(sig.quad_points, p.quad_tile));
    return plan;
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

struct TraceCounters {
    long long barriers_per_workgroup = 0;
    long long flops_matvec = 0;          // usable mul+add FLOPs actually executed
    long long flops_masked_padding = 0;  // would-be FLOPs of masked row lanes
    long long gather_words = 0;          // global reads of trial DOF arrays
    long long scatter_words = 0;         // emulated atomic adds to the output array
    long long reference_words = 0;       // cold global reads of tabulation data
    long long reference_cached_words = 0;// tabulation re-reads served by the modeled cache
    long long coord_words = 0;           // coordinate gathers (outside the modeled categories)
    long long local_eval_read_words = 0;
    long long local_eval_write_words = 0;
    long long local_quad_read_words = 0;
    long long local_words_highwater = 0; // words of local memory the plan allocates
};

struct SimTrace {
    std::vector<double> output;
    TraceCounters counters;
    Ratio masked_lane_fraction{0};  // idle roster slots / total roster slots
    long long workgroups = 0;

    friend bool operator==(const SimTrace& a, const SimTrace& b) {
        auto key = [](const TraceCounters& c) {
            return std::vector<long long>{c.barriers_per_workgroup, c.flops_matvec,
                                          c.flops_masked_padding, c.gather_words, c.scatter_words,
                                          c.reference_words, c.reference_cached_words, c.coord_words,
                                          c.local_eval_read_words, c.local_eval_write_words,
                                          c.local_quad_read_words, c.local_words_highwater};
        };
        return a.output == b.output && key(a.counters) == key(b.counters) &&
               a.masked_lane_fraction == b.masked_lane_fraction && a.workgroups == b.workgroups;
    }
};

namespace detail {

// Word-addressed local-memory arena with hard bounds checking; an
// out-of-range access means the plan's layout arithmetic is wrong.
class LocalArena {
public:
    explicit LocalArena(long long words) : mem_(static_cast<std::size_t>(words), 0.0) {}
    void reset() { std::fill(mem_.begin(), mem_.end(), 0.0); }
    double& at(long long off) {
        if (off < 0 || off >= static_cast<long long>(mem_.size()))
            throw std::logic_error("simulator: local-memory access out of bounds at word " +
                                   std::to_string(off));
        return mem_[static_cast<std::size_t>(off)];
    }

private:
    std::vector<double> mem_;
};

struct CellState {
    bool live = false;
    int cell = -1;
    std::vector<double> coords;        // affine only
    std::vector<double> jacobian;
    double determinant = 0.0;
    std::vector<double> dof_tile;      // gathered DOFs for the current column tile
    std::vector<double> derivs;        // [term][row in eval tile], accumulated across column tiles
    std::vector<double> out_tile;      // [row in quad tile]
};

inline void check_finite(double v, int cell, const char* stage) {
    if (!std::isfinite(v))
        throw std::runtime_error("simulator: non-finite value at cell " + std::to_string(cell) +
                                 " during " + stage);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single cell per work-item
// ---------------------------------------------------------------------------

/// Runs the private-memory schedule: 32-wide work-groups, one cell per
/// work-item, tail work-items retire immediately, atomic-add scatter.
/// Tabulation reads go to global memory on every use, so reference_words is
/// a raw per-use count here (no prefetch stage exists to amortize them).
inline SimTrace run_scpt(const ProblemInstance& p) {
    p.validate();
    const FormSignature& sig = p.signature;
    const int dim = sig.dim;
    const int n_cells = p.connectivity.cell_count;

    SimTrace trace;
    trace.output.assign(static_cast<std::size_t>(p.output_size), 0.0);
    TraceCounters& c = trace.counters;
    trace.workgroups = ceil_div(n_cells, kSubgroupSize);
    trace.masked_lane_fraction =
        Ratio(trace.workgroups * kSubgroupSize - n_cells, trace.workgroups * kSubgroupSize);

    std::vector<double> local_scalar, local_vector, cell_coords(sig.affine_geometry ? sig.coord_dofs * dim : 0),
        jac(sig.affine_geometry ? dim * dim : 0);
    std::vector<double> scalar_derivs(sig.total_scalar_terms()), vector_derivs(sig.total_vector_terms());
    std::vector<double> e_values(sig.test_deriv_terms), cell_out(sig.test_dofs);

    for (long long wg = 0; wg < trace.workgroups; ++wg) {
        for (int lane = 0; lane < kSubgroupSize; ++lane) {
            const int cell = static_cast<int>(wg) * kSubgroupSize + lane;
            if (cell >= n_cells) continue;  // guard: tail lanes retire

            double det = 0.0;
            if (sig.affine_geometry) {
                const IndexMap& m = p.connectivity.coord_map;
                for (int j = 0; j < m.entries; ++j)
                    for (int d = 0; d < dim; ++d)
                        cell_coords[static_cast<std::size_t>(j) * dim + d] =
                            p.connectivity.coords[static_cast<std::size_t>(m(cell, j)) * dim + d];
                c.coord_words += static_cast<long long>(m.entries) * dim;
                affine_jacobian(cell_coords.data(), dim, jac.data(), &det);
                detail::check_finite(det, cell, "jacobian");
            }

            std::fill(cell_out.begin(), cell_out.end(), 0.0);

            for (int iq = 0; iq < sig.quad_points; ++iq) {
                for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
                    const auto& space = sig.scalar_spaces[i];
                    const IndexMap& m = p.connectivity.scalar_maps[i];
                    const int off = sig.scalar_term_offset(static_cast<int>(i));
                    for (int k = 0; k < space.deriv_terms; ++k) {
                        const Matrix& phi = p.tabulations.scalar_phi[i][k];
                        double acc = 0.0;
                        for (int j = 0; j < space.dofs; ++j)
                            acc += phi(iq, j) * p.scalar_inputs[i][m(cell, j)];
                        scalar_derivs[off + k] = acc;
                        c.flops_matvec += 2LL * space.dofs;
                        c.reference_words += space.dofs;
                    }
                }
                for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
                    const auto& space = sig.vector_spaces[i];
                    const IndexMap& m = p.connectivity.vector_maps[i];
                    const int off = sig.vector_term_offset(static_cast<int>(i));
                    for (int k = 0; k < space.deriv_terms; ++k) {
                        const Matrix& phi = p.tabulations.vector_phi[i][k];
                        const int comp = space.components[k];
                        double acc = 0.0;
                        for (int j = 0; j < space.dofs; ++j)
                            acc += phi(iq, j) *
                                   p.vector_inputs[i][static_cast<std::size_t>(m(cell, j)) * dim + comp];
                        vector_derivs[off + k] = acc;
                        c.flops_matvec += 2LL * space.dofs;
                        c.reference_words += space.dofs;
                    }
                }

                EvalInputs in;
                in.scalar_derivs = scalar_derivs.data();
                in.vector_derivs = vector_derivs.data();
                in.jacobian = sig.affine_geometry ? jac.data() : nullptr;
                in.determinant = det;
                in.weight = p.tabulations.weights[iq];
                in.cell_coords = sig.affine_geometry ? cell_coords.data() : nullptr;
                in.dim = dim;
                c.reference_words += 1;  // quadrature weight
                for (int k = 0; k < sig.test_deriv_terms; ++k) {
                    e_values[k] = p.map.eval(k, sig, in);
                    detail::check_finite(e_values[k], cell, "pointwise map");
                }

                for (int jw = 0; jw < sig.test_dofs; ++jw) {
                    double acc = cell_out[jw];
                    for (int k = 0; k < sig.test_deriv_terms; ++k)
                        acc += p.tabulations.psi[k](jw, iq) * e_values[k];
                    cell_out[jw] = acc;
                }
                c.flops_matvec += 2LL * sig.test_dofs * sig.test_deriv_terms;
                c.reference_words += static_cast<long long>(sig.test_dofs) * sig.test_deriv_terms;
            }

            // per-cell gather cost, charged once (values were read via the
            // index maps above; the model counts unique words per cell)
            for (const auto& s : sig.scalar_spaces) c.gather_words += s.dofs;
            for (const auto& v : sig.vector_spaces) c.gather_words += static_cast<long long>(v.dofs) * dim;

            for (int jw = 0; jw < sig.test_dofs; ++jw) {
                detail::check_finite(cell_out[jw], cell, "quadrature");
                trace.output[p.connectivity.test_map(cell, jw)] += cell_out[jw];
            }
            c.scatter_words += sig.test_dofs;
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Multi-level tiling
// ---------------------------------------------------------------------------

/// Runs the tiled schedule under lock-step semantics. Counting rules:
///  - gather_words: one word per gathered DOF per cell per (quad tile, row
///    tile, column tile) pass; redundant lane copies are cache-served.
///  - reference_words: cold misses only, i.e. each trial space's first
///    derivative matrix slab and the weight vector, once per work-group;
///    further derivative terms and the test-side prefetches count as cached.
///  - local reads/writes: one per executed access by a usable lane; the
///    evaluation results are charged once per element per consuming cell.
///  - FLOPs: masked row lanes perform no arithmetic but their would-be
///    mul+add pairs are recorded as padding.
inline SimTrace run_mlt(const ProblemInstance& p, const SchedulePlan& plan) {
    p.validate();
    if (plan.params.kind != ScheduleKind::MultiLevelTiling)
        throw std::invalid_argument("run_mlt: plan must be a multi-level tiling schedule");
    if (plan.sig.quad_points != p.signature.quad_points ||
        plan.sig.test_dofs != p.signature.test_dofs ||
        plan.sig.scalar_spaces.size() != p.signature.scalar_spaces.size() ||
        plan.sig.vector_spaces.size() != p.signature.vector_spaces.size())
        throw std::invalid_argument("run_mlt: plan does not match the instance signature");

    const FormSignature& sig = p.signature;
    const TilingParams& par = plan.params;
    const int dim = sig.dim;
    const int n_cells = p.connectivity.cell_count;
    const int group_cells = par.cells_per_group;
    const int lanes = par.lanes_per_cell;

    SimTrace trace;
    trace.output.assign(static_cast<std::size_t>(p.output_size), 0.0);
    TraceCounters& c = trace.counters;
    trace.workgroups = ceil_div(n_cells, group_cells);
    c.local_words_highwater = plan.local_words;
    {
        const long long total_slots = trace.workgroups * group_cells * lanes;
        trace.masked_lane_fraction =
            Ratio(total_slots - static_cast<long long>(n_cells) * lanes, total_slots);
    }

    detail::LocalArena arena(plan.local_words);
    const long long e_base = plan.buffer_words;
    auto e_slot = [&](int term, int row, int iq_in_tile) {
        return e_base + (static_cast<long long>(term) * group_cells + row) * par.quad_tile + iq_in_tile;
    };

    const int total_terms = sig.total_scalar_terms() + sig.total_vector_terms();
    std::vector<detail::CellState> cells(group_cells);
    for (auto& cs : cells) {
        if (sig.affine_geometry) {
            cs.coords.resize(static_cast<std::size_t>(sig.coord_dofs) * dim);
            cs.jacobian.resize(static_cast<std::size_t>(dim) * dim);
        }
        cs.derivs.resize(static_cast<std::size_t>(total_terms) * par.eval_row_tile);
        cs.out_tile.resize(par.quad_row_tile);
    }
    std::vector<double> packed(total_terms);  // map inputs for one (cell, point)

    long long barriers_first_group = -1;

    for (long long wg = 0; wg < trace.workgroups; ++wg) {
        arena.reset();
        long long barriers = 0;

        for (int r = 0; r < group_cells; ++r) {
            auto& cs = cells[r];
            cs.cell = static_cast<int>(wg) * group_cells + r;
            cs.live = cs.cell < n_cells;
            if (!cs.live) continue;
            if (sig.affine_geometry) {
                const IndexMap& m = p.connectivity.coord_map;
                for (int j = 0; j < m.entries; ++j)
                    for (int d = 0; d < dim; ++d)
                        cs.coords[static_cast<std::size_t>(j) * dim + d] =
                            p.connectivity.coords[static_cast<std::size_t>(m(cs.cell, j)) * dim + d];
                c.coord_words += static_cast<long long>(m.entries) * dim;
                affine_jacobian(cs.coords.data(), dim, cs.jacobian.data(), &cs.determinant);
                detail::check_finite(cs.determinant, cs.cell, "jacobian");
            }
        }

        for (int qt = 0; qt < plan.quad_tiles; ++qt) {
            const int tile_q = plan.quad_tile_size(qt);
            const int quad_begin = qt * par.quad_tile;

            // cold read of this tile's quadrature weights, once per work-group
            c.reference_words += tile_q;

            // ---- evaluation phase ----
            const int eval_row_tiles = static_cast<int>(ceil_div(tile_q, par.eval_row_tile));
            for (int rt = 0; rt < eval_row_tiles; ++rt) {
                const int row_begin = rt * par.eval_row_tile;
                const int tile_r = std::min(par.eval_row_tile, tile_q - row_begin);

                for (auto& cs : cells)
                    if (cs.live) std::fill(cs.derivs.begin(), cs.derivs.end(), 0.0);

                int term_base = 0;
                for (const auto& sp : plan.spaces) {
                    const Matrix* phis = sp.is_vector ? p.tabulations.vector_phi[sp.space_index].data()
                                                      : p.tabulations.scalar_phi[sp.space_index].data();
                    const IndexMap& imap = sp.is_vector ? p.connectivity.vector_maps[sp.space_index]
                                                        : p.connectivity.scalar_maps[sp.space_index];
                    const int col_tiles = static_cast<int>(ceil_div(sp.dofs, sp.col_tile));
                    for (int ct = 0; ct < col_tiles; ++ct) {
                        const int col_begin = ct * sp.col_tile;
                        const int tile_c = std::min(sp.col_tile, sp.dofs - col_begin);

                        // per-cell DOF tile gather
                        for (auto& cs : cells) {
                            if (!cs.live) continue;
                            cs.dof_tile.resize(sp.is_vector
                                                   ? static_cast<std::size_t>(tile_c) * dim
                                                   : static_cast<std::size_t>(tile_c));
                            if (sp.is_vector) {
                                for (int j = 0; j < tile_c; ++j)
                                    for (int d = 0; d < dim; ++d)
                                        cs.dof_tile[static_cast<std::size_t>(j) * dim + d] =
                                            p.vector_inputs[sp.space_index]
                                                           [static_cast<std::size_t>(
                                                                imap(cs.cell, col_begin + j)) * dim + d];
                                c.gather_words += static_cast<long long>(tile_c) * dim;
                            } else {
                                for (int j = 0; j < tile_c; ++j)
                                    cs.dof_tile[j] =
                                        p.scalar_inputs[sp.space_index][imap(cs.cell, col_begin + j)];
                                c.gather_words += tile_c;
                            }
                        }

                        // cooperative prefetch over the work-group roster
                        const long long tile_elems = static_cast<long long>(tile_r) * tile_c;
                        const long long rounds = ceil_div(tile_elems, static_cast<long long>(group_cells) * lanes);
                        for (long long round = 0; round < rounds; ++round)
                            for (int lid0 = 0; lid0 < group_cells; ++lid0)
                                for (int lid1 = 0; lid1 < lanes; ++lid1) {
                                    const long long flat =
                                        (static_cast<long long>(group_cells) * lanes) * round +
                                        static_cast<long long>(lanes) * lid0 + lid1;
                                    if (flat >= tile_elems) continue;
                                    const int i_row = static_cast<int>(flat / tile_c);
                                    const int j_col = static_cast<int>(flat % tile_c);
                                    const int gq = quad_begin + row_begin + i_row;
                                    const int gj = col_begin + j_col;
                                    for (int k = 0; k < sp.deriv_terms; ++k)
                                        arena.at(k * sp.term_stride +
                                                 static_cast<long long>(i_row) * sp.col_tile + j_col) =
                                            phis[k](gq, gj);
                                }
                        c.reference_words += tile_elems;  // first derivative matrix: cold
                        c.reference_cached_words += tile_elems * (sp.deriv_terms - 1);

                        ++barriers;  // prefetched tile visible to all lanes

                        // tiled matvec: lanes stride the tile's rows
                        const int row_rounds = static_cast<int>(ceil_div(tile_r, lanes));
                        for (auto& cs : cells) {
                            if (!cs.live) continue;
                            for (int rr = 0; rr < row_rounds; ++rr)
                                for (int lid1 = 0; lid1 < lanes; ++lid1) {
                                    const int iq = rr * lanes + lid1;
                                    if (iq >= tile_r) {
                                        c.flops_masked_padding += 2LL * sp.deriv_terms * tile_c;
                                        continue;
                                    }
                                    for (int k = 0; k < sp.deriv_terms; ++k) {
                                        double acc = cs.derivs[static_cast<std::size_t>(term_base + k) *
                                                                   par.eval_row_tile + iq];
                                        const int comp =
                                            sp.is_vector ? sig.vector_spaces[sp.space_index].components[k] : 0;
                                        for (int j = 0; j < tile_c; ++j) {
                                            const double phi_v =
                                                arena.at(k * sp.term_stride +
                                                         static_cast<long long>(iq) * sp.col_tile + j);
                                            const double dof = sp.is_vector
                                                                   ? cs.dof_tile[static_cast<std::size_t>(j) * dim + comp]
                                                                   : cs.dof_tile[j];
                                            acc += phi_v * dof;
                                        }
                                        cs.derivs[static_cast<std::size_t>(term_base + k) * par.eval_row_tile +
                                                  iq] = acc;
                                        c.flops_matvec += 2LL * tile_c;
                                        c.local_eval_read_words += tile_c;
                                    }
                                }
                        }

                        ++barriers;  // tile consumed; buffer may be rewritten
                    }
                    term_base += sp.deriv_terms;
                }

                // evaluation wrap-up: apply the pointwise map, store results
                for (int r = 0; r < group_cells; ++r) {
                    auto& cs = cells[r];
                    if (!cs.live) continue;
                    const int row_rounds = static_cast<int>(ceil_div(tile_r, lanes));
                    for (int rr = 0; rr < row_rounds; ++rr)
                        for (int lid1 = 0; lid1 < lanes; ++lid1) {
                            const int iq = rr * lanes + lid1;
                            if (iq >= tile_r) continue;
                            // derivs are strided per term; repack for the map
                            for (int t = 0; t < total_terms; ++t)
                                packed[t] = cs.derivs[static_cast<std::size_t>(t) * par.eval_row_tile + iq];
                            EvalInputs in;
                            in.scalar_derivs = packed.data();
                            in.vector_derivs = packed.data() + sig.total_scalar_terms();
                            in.jacobian = sig.affine_geometry ? cs.jacobian.data() : nullptr;
                            in.determinant = cs.determinant;
                            in.weight = p.tabulations.weights[quad_begin + row_begin + iq];
                            in.cell_coords = sig.affine_geometry ? cs.coords.data() : nullptr;
                            in.dim = dim;
                            for (int k = 0; k < sig.test_deriv_terms; ++k) {
                                const double e = p.map.eval(k, sig, in);
                                detail::check_finite(e, cs.cell, "pointwise map");
                                arena.at(e_slot(k, r, row_begin + iq)) = e;
                                c.local_eval_write_words += 1;
                            }
                        }
                }
            }

            ++barriers;  // evaluation results visible to the quadrature phase

            // evaluation results are re-read across the quadrature row tiles;
            // charge each element once per consuming cell (cache-modeled)
            for (const auto& cs : cells)
                if (cs.live) c.local_quad_read_words += static_cast<long long>(sig.test_deriv_terms) * tile_q;

            // ---- quadrature phase ----
            const int quad_row_tiles = static_cast<int>(ceil_div(sig.test_dofs, par.quad_row_tile));
            for (int rt = 0; rt < quad_row_tiles; ++rt) {
                const int row_begin = rt * par.quad_row_tile;
                const int tile_r = std::min(par.quad_row_tile, sig.test_dofs - row_begin);

                for (auto& cs : cells)
                    if (cs.live) std::fill(cs.out_tile.begin(), cs.out_tile.end(), 0.0);

                const int quad_col_tiles = static_cast<int>(ceil_div(tile_q, par.quad_col_tile));
                const long long psi_stride =
                    static_cast<long long>(par.quad_row_tile) * par.quad_col_tile;
                for (int ct = 0; ct < quad_col_tiles; ++ct) {
                    const int col_begin = ct * par.quad_col_tile;
                    const int tile_c = std::min(par.quad_col_tile, tile_q - col_begin);

                    const long long tile_elems = static_cast<long long>(tile_r) * tile_c;
                    const long long rounds =
                        ceil_div(tile_elems, static_cast<long long>(group_cells) * lanes);
                    for (long long round = 0; round < rounds; ++round)
                        for (int lid0 = 0; lid0 < group_cells; ++lid0)
                            for (int lid1 = 0; lid1 < lanes; ++lid1) {
                                const long long flat =
                                    (static_cast<long long>(group_cells) * lanes) * round +
                                    static_cast<long long>(lanes) * lid0 + lid1;
                                if (flat >= tile_elems) continue;
                                const int i_row = static_cast<int>(flat / tile_c);
                                const int j_col = static_cast<int>(flat % tile_c);
                                for (int k = 0; k < sig.test_deriv_terms; ++k)
                                    arena.at(k * psi_stride +
                                             static_cast<long long>(i_row) * par.quad_col_tile + j_col) =
                                        p.tabulations.psi[k](row_begin + i_row,
                                                             quad_begin + col_begin + j_col);
                            }
                    c.reference_cached_words += tile_elems * sig.test_deriv_terms;

                    ++barriers;  // prefetched test tile visible

                    const int row_rounds = static_cast<int>(ceil_div(tile_r, lanes));
                    for (int r = 0; r < group_cells; ++r) {
                        auto& cs = cells[r];
                        if (!cs.live) continue;
                        for (int rr = 0; rr < row_rounds; ++rr)
                            for (int lid1 = 0; lid1 < lanes; ++lid1) {
                                const int jw = rr * lanes + lid1;
                                if (jw >= tile_r) {
                                    c.flops_masked_padding +=
                                        2LL * sig.test_deriv_terms * tile_c;
                                    continue;
                                }
                                double acc = cs.out_tile[jw];
                                for (int iq = 0; iq < tile_c; ++iq) {
                                    for (int k = 0; k < sig.test_deriv_terms; ++k) {
                                        const double psi_v =
                                            arena.at(k * psi_stride +
                                                     static_cast<long long>(jw) * par.quad_col_tile + iq);
                                        acc += psi_v * arena.at(e_slot(k, r, col_begin + iq));
                                        c.local_quad_read_words += 1;  // psi tile read
                                    }
                                }
                                cs.out_tile[jw] = acc;
                                c.flops_matvec += 2LL * sig.test_deriv_terms * tile_c;
                            }
                    }

                    ++barriers;  // tile consumed
                }

                // scatter this row tile via emulated atomics, fixed order
                for (auto& cs : cells) {
                    if (!cs.live) continue;
                    for (int jw = 0; jw < tile_r; ++jw) {
                        detail::check_finite(cs.out_tile[jw], cs.cell, "quadrature");
                        trace.output[p.connectivity.test_map(cs.cell, row_begin + jw)] += cs.out_tile[jw];
                    }
                    c.scatter_words += tile_r;
                }
            }

            ++barriers;  // quad-tile boundary
        }

        if (barriers_first_group < 0) barriers_first_group = barriers;
        if (barriers != barriers_first_group)
            throw std::logic_error("simulator: barrier count diverged across work-groups");
    }
    c.barriers_per_workgroup = barriers_first_group < 0 ? 0 : barriers_first_group;
    return trace;
}

/// Dispatch on the plan's schedule kind.
inline SimTrace run_schedule(const ProblemInstance& p, const SchedulePlan& plan) {
    return plan.params.kind == ScheduleKind::SingleCellPerWorkItem ? run_scpt(p) : run_mlt(p, plan);
}

// ---------------------------------------------------------------------------
// Census: counted trace vs closed forms
// ---------------------------------------------------------------------------

struct CensusEntry {
    std::string quantity;
    long long expected = 0;
    long long actual = 0;
    bool pass = false;
};

struct CensusReport {
    std::vector<CensusEntry> entries;
    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return true;
    }
    const CensusEntry* first_failure() const {
        for (const auto& e : entries)
            if (!e.pass) return &e;
        return nullptr;
    }
};

/// Compares every trace counter with its closed-form counterpart, exact
/// integer equality. Expected totals scale per-cell quantities by the cell
/// count and per-work-group quantities by the group count.
inline CensusReport census(const SimTrace& trace, const FormSignature& sig, const TilingParams& p,
                           int n_cells) {
    CensusReport rep;
    auto push = [&rep](std::string name, long long expected, long long actual) {
        rep.entries.push_back({std::move(name), expected, actual, expected == actual});
    };
    const TraceCounters& c = trace.counters;
    const long long cells = n_cells;

    if (p.kind == ScheduleKind::SingleCellPerWorkItem) {
        long long gather = 0;
        for (const auto& s : sig.scalar_spaces) gather += s.dofs;
        for (const auto& v : sig.vector_spaces) gather += static_cast<long long>(v.dofs) * sig.dim;
        push("barriers", 0, c.barriers_per_workgroup);
        push("flops_usable", cells * usable_flops(sig), c.flops_matvec);
        push("flops_performed", cells * usable_flops(sig), c.flops_matvec + c.flops_masked_padding);
        push("local_words", 0, c.local_words_highwater);
        push("gather_words", cells * gather, c.gather_words);
        push("scatter_words", cells * sig.test_dofs, c.scatter_words);
        return rep;
    }

    const auto mem = local_mem_words(sig, p);
    const long long groups = ceil_div(cells, p.cells_per_group);
    const auto global_words = global_access_words(sig, p);
    const auto local_words = local_access_words(sig);
    // reference words amortize per cell over the group; per work-group they
    // are the integral slab size
    const Ratio ref_per_group = global_words.reference * Ratio(p.cells_per_group);

    push("barriers", n_sync(sig, p), c.barriers_per_workgroup);
    push("flops_usable", cells * usable_flops(sig), c.flops_matvec);
    push("flops_performed", cells * ops_performed(sig, p), c.flops_matvec + c.flops_masked_padding);
    push("local_words", mem.total, c.local_words_highwater);
    push("gather_words", cells * global_words.gather, c.gather_words);
    push("scatter_words", cells * global_words.scatter, c.scatter_words);
    push("reference_words", groups * boost::rational_cast<long long>(ref_per_group), c.reference_words);
    push("local_eval_read_words", cells * local_words.eval_read, c.local_eval_read_words);
    push("local_eval_write_words", cells * local_words.eval_write, c.local_eval_write_words);
    push("local_quad_read_words", cells * local_words.quad_read, c.local_quad_read_words);
    return rep;
}

}  // namespace femsched
