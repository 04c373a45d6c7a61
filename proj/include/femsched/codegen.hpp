#pragma once

// Deterministic kernel source emission for both schedules. The emitter
// consumes the same SchedulePlan as the simulator, so tile bounds, buffer
// offsets, and barrier placement agree by construction; emitted text is a
// pure function of (signature, params, dialect). Generated kernels are not
// compiled here; structural statistics and golden files pin them down.

#include <cstdio>
#include <fstream>

#include "femsched/perf_model.hpp"
#include "femsched/simulate.hpp"

namespace femsched {

enum class Dialect { portable, opencl, cuda };

inline const char* dialect_name(Dialect d) {
    switch (d) {
        case Dialect::portable: return "portable";
        case Dialect::opencl: return "opencl";
        case Dialect::cuda: return "cuda";
    }
    return "?";
}

inline Dialect dialect_from_name(const std::string& name) {
    if (name == "portable") return Dialect::portable;
    if (name == "opencl") return Dialect::opencl;
    if (name == "cuda") return Dialect::cuda;
    throw std::invalid_argument("unknown dialect: " + name);
}

struct KernelArg {
    std::string name;
    std::string role;  // trial-dofs | gather-map | coords | coord-map | tabulation | weights | output | scatter-map | cell-count
    int element_bytes = 8;
};

struct KernelSource {
    std::string entry;
    std::string source;
    int workgroup_dim0 = 1;
    int workgroup_dim1 = 1;
    std::string grid_formula;  // work-groups as a function of n_cells
    std::vector<KernelArg> args;
};

namespace detail {

struct DialectSpec {
    std::string kernel_qual;
    std::string global_ptr;       // qualifier for global pointers
    std::string local_decl;       // qualifier for local-memory declarations
    std::string barrier_stmt;
    std::string atomic_fn;        // atomic_fn(&dst, val);
    std::string local_id0, local_id1, group_id0;
    std::string preamble;
};

inline DialectSpec dialect_spec(Dialect d) {
    switch (d) {
        case Dialect::opencl:
            return {"__kernel void",
                    "__global",
                    "__local double",
                    "barrier(CLK_LOCAL_MEM_FENCE);",
                    "global_atomic_add",
                    "get_local_id(0)",
                    "get_local_id(1)",
                    "get_group_id(0)",
                    "#pragma OPENCL EXTENSION cl_khr_int64_base_atomics : enable\n"
                    "static void global_atomic_add(volatile __global double* addr, double value) {\n"
                    "    union { double f; ulong u; } prev, next;\n"
                    "    do {\n"
                    "        prev.f = *addr;\n"
                    "        next.f = prev.f + value;\n"
                    "    } while (atom_cmpxchg((volatile __global ulong*)addr, prev.u, next.u) != prev.u);\n"
                    "}\n"};
        case Dialect::cuda:
            return {"extern \"C\" __global__ void",
                    "",
                    "__shared__ double",
                    "__syncthreads();",
                    "atomicAdd",
                    "threadIdx.x",
                    "threadIdx.y",
                    "blockIdx.x",
                    ""};
        case Dialect::portable:
        default:
            return {"kernel void",
                    "global",
                    "local double",
                    "WorkGroupBarrier();",
                    "GlobalAtomicAdd",
                    "LocalId(0)",
                    "LocalId(1)",
                    "GroupId(0)",
                    ""};
    }
}

class CodeWriter {
public:
    void line(const std::string& s = "") {
        for (int i = 0; i < indent_ && !s.empty(); ++i) out_ += "    ";
        out_ += s;
        out_ += '\n';
    }
    void open(const std::string& s) {
        line(s.empty() ? "{" : s + " {");
        ++indent_;
    }
    void close(const std::string& suffix = "") {
        --indent_;
        line("}" + suffix);
    }
    const std::string& str() const { return out_; }

private:
    std::string out_;
    int indent_ = 0;
};

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s(buf);
    if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
        s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
        s += ".0";
    return s;
}

// Renders a pointwise-map expression against kernel variable names.
// - derivative variables resolve through `deriv_var(space_is_vector, space, term)`
// - weight resolves to `weight_name`
inline std::string render_expr(const PointwiseMap& map, int node,
                               const FormSignature& sig,
                               const std::function<std::string(bool, int, int)>& deriv_var,
                               const std::string& weight_name) {
    using Op = PointwiseMap::Op;
    const auto& n = map.nodes()[node];
    switch (n.op) {
        case Op::constant: return fmt_double(n.value);
        case Op::scalar_deriv: return deriv_var(false, n.a, n.b);
        case Op::vector_deriv: return deriv_var(true, n.a, n.b);
        case Op::jacobian: return "jac[" + std::to_string(n.a * sig.dim + n.b) + "]";
        case Op::determinant: return "det";
        case Op::weight: return weight_name;
        case Op::coord: return "cell_coords[" + std::to_string(n.a * sig.dim + n.b) + "]";
        case Op::add:
            return "(" + render_expr(map, n.a, sig, deriv_var, weight_name) + " + " +
                   render_expr(map, n.b, sig, deriv_var, weight_name) + ")";
        case Op::mul:
            return "(" + render_expr(map, n.a, sig, deriv_var, weight_name) + " * " +
                   render_expr(map, n.b, sig, deriv_var, weight_name) + ")";
    }
    return "0.0";
}

inline std::string det_expr(int dim) {
    switch (dim) {
        case 1: return "jac[0]";
        case 2: return "jac[0] * jac[3] - jac[1] * jac[2]";
        default:
            return "jac[0] * (jac[4] * jac[8] - jac[5] * jac[7]) - jac[1] * (jac[3] * jac[8] - "
                   "jac[5] * jac[6]) + jac[2] * (jac[3] * jac[7] - jac[4] * jac[6])";
    }
}

struct ArgNames {
    std::vector<std::string> scalar_in, scalar_map, vector_in, vector_map;
    std::vector<std::vector<std::string>> scalar_phi, vector_phi;
    std::vector<std::string> psi;
};

inline ArgNames collect_args(const FormSignature& sig, std::vector<KernelArg>& manifest) {
    ArgNames names;
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        names.scalar_in.push_back("u" + std::to_string(i) + "_in");
        names.scalar_map.push_back("u" + std::to_string(i) + "_map");
        manifest.push_back({names.scalar_in[i], "trial-dofs", sig.word_bytes});
        manifest.push_back({names.scalar_map[i], "gather-map", 4});
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        names.vector_in.push_back("v" + std::to_string(i) + "_in");
        names.vector_map.push_back("v" + std::to_string(i) + "_map");
        manifest.push_back({names.vector_in[i], "trial-dofs", sig.word_bytes});
        manifest.push_back({names.vector_map[i], "gather-map", 4});
    }
    if (sig.affine_geometry) {
        manifest.push_back({"coords_in", "coords", sig.word_bytes});
        manifest.push_back({"coords_map", "coord-map", 4});
    }
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        names.scalar_phi.emplace_back();
        for (int k = 0; k < sig.scalar_spaces[i].deriv_terms; ++k) {
            names.scalar_phi[i].push_back("phi_u" + std::to_string(i) + "_d" + std::to_string(k));
            manifest.push_back({names.scalar_phi[i][k], "tabulation", sig.word_bytes});
        }
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        names.vector_phi.emplace_back();
        for (int k = 0; k < sig.vector_spaces[i].deriv_terms; ++k) {
            names.vector_phi[i].push_back("phi_v" + std::to_string(i) + "_d" + std::to_string(k));
            manifest.push_back({names.vector_phi[i][k], "tabulation", sig.word_bytes});
        }
    }
    for (int k = 0; k < sig.test_deriv_terms; ++k) {
        names.psi.push_back("psi_d" + std::to_string(k));
        manifest.push_back({names.psi[k], "tabulation", sig.word_bytes});
    }
    manifest.push_back({"quad_weights", "weights", sig.word_bytes});
    manifest.push_back({"out", "output", sig.word_bytes});
    manifest.push_back({"out_map", "scatter-map", 4});
    manifest.push_back({"n_cells", "cell-count", 4});
    return names;
}

inline void emit_signature_line(CodeWriter& w, const DialectSpec& dl, const std::string& entry,
                                const std::vector<KernelArg>& args) {
    std::string head = dl.kernel_qual + " " + entry + "(";
    w.line(head);
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        std::string decl;
        if (a.role == "cell-count") {
            decl = "const int " + a.name;
        } else if (a.role == "output") {
            decl = (dl.global_ptr.empty() ? "" : dl.global_ptr + " ") + "double* " + a.name;
        } else if (a.role == "gather-map" || a.role == "scatter-map" || a.role == "coord-map") {
            decl = (dl.global_ptr.empty() ? "" : dl.global_ptr + " ") + "const int* " + a.name;
        } else {
            decl = (dl.global_ptr.empty() ? "" : dl.global_ptr + " ") + "const double* " + a.name;
        }
        w.line("    " + decl + (i + 1 < args.size() ? "," : ")"));
    }
}

inline void emit_coords_and_jacobian(CodeWriter& w, const FormSignature& sig) {
    const int d = sig.dim;
    w.line("double cell_coords[" + std::to_string(sig.coord_dofs * d) + "];");
    w.open("for (int j = 0; j < " + std::to_string(sig.coord_dofs) + "; ++j)");
    w.open("for (int id = 0; id < " + std::to_string(d) + "; ++id)");
    w.line("cell_coords[j * " + std::to_string(d) + " + id] = coords_in[coords_map[i_cell * " +
           std::to_string(sig.coord_dofs) + " + j] * " + std::to_string(d) + " + id];");
    w.close();
    w.close();
    w.line("double jac[" + std::to_string(d * d) + "];");
    w.open("for (int c = 0; c < " + std::to_string(d) + "; ++c)");
    w.open("for (int r = 0; r < " + std::to_string(d) + "; ++r)");
    w.line("jac[r * " + std::to_string(d) + " + c] = cell_coords[(c + 1) * " + std::to_string(d) +
           " + r] - cell_coords[r];");
    w.close();
    w.close();
    w.line("const double det = " + det_expr(d) + ";");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Single cell per work-item
// ---------------------------------------------------------------------------

inline KernelSource emit_scpt(const FormSignature& sig, const PointwiseMap& map,
                              Dialect dialect = Dialect::portable) {
    sig.validate();
    map.validate(sig);
    const auto dl = detail::dialect_spec(dialect);
    KernelSource src;
    src.entry = "fem_action_scpt";
    src.workgroup_dim0 = kSubgroupSize;
    src.workgroup_dim1 = 1;
    src.grid_formula = "ceil_div(n_cells, " + std::to_string(kSubgroupSize) + ")";
    const auto names = detail::collect_args(sig, src.args);

    detail::CodeWriter w;
    w.line("// generated by femsched; schedule: single cell per work-item");
    w.line("// dialect: " + std::string(dialect_name(dialect)));
    if (!dl.preamble.empty()) {
        w.line();
        for (std::size_t start = 0; start < dl.preamble.size();) {
            auto end = dl.preamble.find('\n', start);
            if (end == std::string::npos) end = dl.preamble.size();
            w.line(dl.preamble.substr(start, end - start));
            start = end + 1;
        }
    }
    w.line();
    detail::emit_signature_line(w, dl, src.entry, src.args);
    w.open("");
    w.line("const int i_cell = " + std::to_string(kSubgroupSize) + " * " + dl.group_id0 + " + " +
           dl.local_id0 + ";");
    w.open("if (i_cell >= n_cells)");
    w.line("return;");
    w.close();
    w.line();
    if (sig.affine_geometry) detail::emit_coords_and_jacobian(w, sig);
    w.line();

    // gather
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        const int n = sig.scalar_spaces[i].dofs;
        w.line("double l_u" + std::to_string(i) + "[" + std::to_string(n) + "];");
        w.open("for (int j = 0; j < " + std::to_string(n) + "; ++j)");
        w.line("l_u" + std::to_string(i) + "[j] = " + names.scalar_in[i] + "[" +
               names.scalar_map[i] + "[i_cell * " + std::to_string(n) + " + j]];");
        w.close();
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        const int n = sig.vector_spaces[i].dofs;
        const int d = sig.dim;
        w.line("double l_v" + std::to_string(i) + "[" + std::to_string(n * d) + "];");
        w.open("for (int j = 0; j < " + std::to_string(n) + "; ++j)");
        w.open("for (int id = 0; id < " + std::to_string(d) + "; ++id)");
        w.line("l_v" + std::to_string(i) + "[j * " + std::to_string(d) + " + id] = " +
               names.vector_in[i] + "[" + names.vector_map[i] + "[i_cell * " + std::to_string(n) +
               " + j] * " + std::to_string(d) + " + id];");
        w.close();
        w.close();
    }
    w.line();
    w.line("double out_c[" + std::to_string(sig.test_dofs) + "];");
    w.open("for (int j = 0; j < " + std::to_string(sig.test_dofs) + "; ++j)");
    w.line("out_c[j] = 0.0;");
    w.close();
    w.line();

    w.open("for (int i_q = 0; i_q < " + std::to_string(sig.quad_points) + "; ++i_q)");
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        for (int k = 0; k < sig.scalar_spaces[i].deriv_terms; ++k)
            w.line("double d_u" + std::to_string(i) + "_" + std::to_string(k) + " = 0.0;");
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        for (int k = 0; k < sig.vector_spaces[i].deriv_terms; ++k)
            w.line("double d_v" + std::to_string(i) + "_" + std::to_string(k) + " = 0.0;");
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        const int n = sig.scalar_spaces[i].dofs;
        w.open("for (int j = 0; j < " + std::to_string(n) + "; ++j)");
        for (int k = 0; k < sig.scalar_spaces[i].deriv_terms; ++k)
            w.line("d_u" + std::to_string(i) + "_" + std::to_string(k) + " += " +
                   names.scalar_phi[i][k] + "[i_q * " + std::to_string(n) + " + j] * l_u" +
                   std::to_string(i) + "[j];");
        w.close();
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        const int n = sig.vector_spaces[i].dofs;
        const int d = sig.dim;
        w.open("for (int j = 0; j < " + std::to_string(n) + "; ++j)");
        for (int k = 0; k < sig.vector_spaces[i].deriv_terms; ++k)
            w.line("d_v" + std::to_string(i) + "_" + std::to_string(k) + " += " +
                   names.vector_phi[i][k] + "[i_q * " + std::to_string(n) + " + j] * l_v" +
                   std::to_string(i) + "[j * " + std::to_string(d) + " + " +
                   std::to_string(sig.vector_spaces[i].components[k]) + "];");
        w.close();
    }
    w.line("const double qw = quad_weights[i_q];");
    auto deriv_var = [](bool is_vec, int space, int term) {
        return std::string(is_vec ? "d_v" : "d_u") + std::to_string(space) + "_" + std::to_string(term);
    };
    for (int k = 0; k < sig.test_deriv_terms; ++k)
        w.line("const double e_" + std::to_string(k) + " = " +
               detail::render_expr(map, map.outputs()[k], sig, deriv_var, "qw") + ";");
    w.open("for (int j = 0; j < " + std::to_string(sig.test_dofs) + "; ++j)");
    for (int k = 0; k < sig.test_deriv_terms; ++k)
        w.line("out_c[j] += " + names.psi[k] + "[j * " + std::to_string(sig.quad_points) +
               " + i_q] * e_" + std::to_string(k) + ";");
    w.close();
    w.close();
    w.line();
    w.open("for (int j = 0; j < " + std::to_string(sig.test_dofs) + "; ++j)");
    w.line(dl.atomic_fn + "(&out[out_map[i_cell * " + std::to_string(sig.test_dofs) + " + j]], out_c[j]);");
    w.close();
    w.close();
    src.source = w.str();
    return src;
}

// ---------------------------------------------------------------------------
// Multi-level tiling
// ---------------------------------------------------------------------------

inline KernelSource emit_mlt(const FormSignature& sig, const PointwiseMap& map,
                             const TilingParams& params, Dialect dialect = Dialect::portable,
                             const DeviceSpec* device = nullptr) {
    sig.validate();
    map.validate(sig);
    const auto plan = build_plan(sig, params);
    if (device) {
        device->validate();
        if (plan.local_words * sig.word_bytes > device->max_local_bytes)
            throw InfeasibleError("kernel needs " + std::to_string(plan.local_words * sig.word_bytes) +
                                  " local bytes; " + device->name + " allows " +
                                  std::to_string(device->max_local_bytes));
    }
    const auto dl = detail::dialect_spec(dialect);
    const TilingParams& p = params;
    const int nc = p.cells_per_group, wi = p.lanes_per_cell;
    const int d = sig.dim;

    KernelSource src;
    src.entry = "fem_action_mlt";
    src.workgroup_dim0 = nc;
    src.workgroup_dim1 = wi;
    src.grid_formula = "ceil_div(n_cells, " + std::to_string(nc) + ")";
    const auto names = detail::collect_args(sig, src.args);

    const bool quad_rem = sig.quad_points % p.quad_tile != 0;
    const int full_quad_tiles = sig.quad_points / p.quad_tile;
    auto num = [](long long v) { return std::to_string(v); };

    detail::CodeWriter w;
    w.line("// generated by femsched; schedule: multi-level tiling");
    w.line("// dialect: " + std::string(dialect_name(dialect)) + "; work-group " + num(nc) + " x " +
           num(wi));
    w.line("// quad tile " + num(p.quad_tile) + ", eval rows " + num(p.eval_row_tile) +
           ", quad rows " + num(p.quad_row_tile) + ", quad cols " + num(p.quad_col_tile));
    if (!dl.preamble.empty()) {
        w.line();
        for (std::size_t start = 0; start < dl.preamble.size();) {
            auto end = dl.preamble.find('\n', start);
            if (end == std::string::npos) end = dl.preamble.size();
            w.line(dl.preamble.substr(start, end - start));
            start = end + 1;
        }
    }
    w.line();
    detail::emit_signature_line(w, dl, src.entry, src.args);
    w.open("");
    w.line(dl.local_decl + " B[" + num(plan.buffer_words) + "];");
    w.line(dl.local_decl + " e_arr[" + num(plan.eval_result_words) + "];");
    w.line("const int lid0 = (int)" + dl.local_id0 + ";");
    w.line("const int lid1 = (int)" + dl.local_id1 + ";");
    w.line("const int i_cell = " + num(nc) + " * (int)" + dl.group_id0 + " + lid0;");
    w.line("const int cell_live = i_cell < n_cells;");
    w.line();
    if (sig.affine_geometry) {
        w.line("double cell_coords[" + num(sig.coord_dofs * d) + "];");
        w.line("double jac[" + num(d * d) + "];");
        w.line("double det = 0.0;");
        w.open("if (cell_live)");
        w.open("for (int j = 0; j < " + num(sig.coord_dofs) + "; ++j)");
        w.open("for (int id = 0; id < " + num(d) + "; ++id)");
        w.line("cell_coords[j * " + num(d) + " + id] = coords_in[coords_map[i_cell * " +
               num(sig.coord_dofs) + " + j] * " + num(d) + " + id];");
        w.close();
        w.close();
        w.close();
        w.open("if (cell_live)");
        w.open("for (int c = 0; c < " + num(d) + "; ++c)");
        w.open("for (int r = 0; r < " + num(d) + "; ++r)");
        w.line("jac[r * " + num(d) + " + c] = cell_coords[(c + 1) * " + num(d) +
               " + r] - cell_coords[r];");
        w.close();
        w.close();
        w.line("det = " + detail::det_expr(d) + ";");
        w.close();
        w.line();
    }

    const int eval_rounds = static_cast<int>(ceil_div(p.eval_row_tile, wi));
    const int quad_rounds = static_cast<int>(ceil_div(p.quad_row_tile, wi));
    for (const auto& sp : plan.spaces) {
        const std::string base = (sp.is_vector ? "v" : "u") + std::to_string(sp.space_index);
        w.line("double l_" + base + "[" + num(sp.is_vector ? sp.col_tile * d : sp.col_tile) + "];");
        for (int k = 0; k < sp.deriv_terms; ++k)
            w.line("double acc_" + base + "_d" + std::to_string(k) + "[" + num(eval_rounds) + "];");
    }
    w.line("double out_tile[" + num(quad_rounds) + "];");
    w.line();

    w.open("for (int i_quadtile = 0; i_quadtile < " + num(plan.quad_tiles) + "; ++i_quadtile)");
    if (quad_rem)
        w.line("const int tq_len = (i_quadtile < " + num(full_quad_tiles) + ") ? " +
               num(p.quad_tile) + " : " + num(sig.quad_points % p.quad_tile) + ";");
    else
        w.line("const int tq_len = " + num(p.quad_tile) + ";");
    w.line("const int quad_begin = i_quadtile * " + num(p.quad_tile) + ";");
    w.line();

    // ---- evaluation phase ----
    w.open("for (int i_rowtile = 0; i_rowtile < (tq_len + " + num(p.eval_row_tile - 1) + ") / " +
           num(p.eval_row_tile) + "; ++i_rowtile)");
    w.line("const int row_begin = i_rowtile * " + num(p.eval_row_tile) + ";");
    const bool eval_row_rem = quad_rem || (p.quad_tile % p.eval_row_tile != 0);
    if (eval_row_rem)
        w.line("const int ter_len = (" + num(p.eval_row_tile) + " < tq_len - row_begin) ? " +
               num(p.eval_row_tile) + " : (tq_len - row_begin);");
    else
        w.line("const int ter_len = " + num(p.eval_row_tile) + ";");

    // zero the per-term accumulators
    w.open("if (cell_live)");
    w.open("for (int r = 0; r < " + num(eval_rounds) + "; ++r)");
    for (const auto& sp : plan.spaces) {
        const std::string base = (sp.is_vector ? "v" : "u") + std::to_string(sp.space_index);
        for (int k = 0; k < sp.deriv_terms; ++k)
            w.line("acc_" + base + "_d" + std::to_string(k) + "[r] = 0.0;");
    }
    w.close();
    w.close();
    w.line();

    for (const auto& sp : plan.spaces) {
        const std::string base = (sp.is_vector ? "v" : "u") + std::to_string(sp.space_index);
        const auto& in_name = sp.is_vector ? names.vector_in[sp.space_index] : names.scalar_in[sp.space_index];
        const auto& map_name = sp.is_vector ? names.vector_map[sp.space_index] : names.scalar_map[sp.space_index];
        const auto& phis = sp.is_vector ? names.vector_phi[sp.space_index] : names.scalar_phi[sp.space_index];
        const bool col_rem = sp.dofs % sp.col_tile != 0;

        w.line("// trial space " + base + ": gather, prefetch, accumulate");
        w.open("for (int i_coltile = 0; i_coltile < " + num(ceil_div(sp.dofs, sp.col_tile)) +
               "; ++i_coltile)");
        w.line("const int col_begin = i_coltile * " + num(sp.col_tile) + ";");
        if (col_rem)
            w.line("const int tc_len = (" + num(sp.col_tile) + " < " + num(sp.dofs) +
                   " - col_begin) ? " + num(sp.col_tile) + " : (" + num(sp.dofs) + " - col_begin);");
        else
            w.line("const int tc_len = " + num(sp.col_tile) + ";");

        w.open("if (cell_live)");
        if (sp.is_vector) {
            w.open("for (int j = 0; j < tc_len; ++j)");
            w.open("for (int id = 0; id < " + num(d) + "; ++id)");
            w.line("l_" + base + "[j * " + num(d) + " + id] = " + in_name + "[" + map_name +
                   "[i_cell * " + num(sp.dofs) + " + col_begin + j] * " + num(d) + " + id];");
            w.close();
            w.close();
        } else {
            w.open("for (int j = 0; j < tc_len; ++j)");
            w.line("l_" + base + "[j] = " + in_name + "[" + map_name + "[i_cell * " + num(sp.dofs) +
                   " + col_begin + j]];");
            w.close();
        }
        w.close();
        w.line();

        // cooperative prefetch of this space's derivative tiles
        w.line("const int tile_elems_" + base + " = ter_len * tc_len;");
        w.open("for (int i = 0; i < (tile_elems_" + base + " + " + num(nc * wi - 1) + ") / " +
               num(nc * wi) + "; ++i)");
        w.line("const int flat = " + num(nc * wi) + " * i + " + num(wi) + " * lid0 + lid1;");
        w.open("if (flat < tile_elems_" + base + ")");
        w.line("const int tr = flat / tc_len;");
        w.line("const int tcc = flat - tr * tc_len;");
        w.line("const int gq = quad_begin + row_begin + tr;");
        w.line("const int gj = col_begin + tcc;");
        for (int k = 0; k < sp.deriv_terms; ++k)
            w.line("B[" + num(k * sp.term_stride) + " + tr * " + num(sp.col_tile) + " + tcc] = " +
                   phis[k] + "[gq * " + num(sp.dofs) + " + gj];");
        w.close();
        w.close();
        w.line(dl.barrier_stmt);
        w.line();

        w.open("if (cell_live)");
        w.open("for (int r = 0; r < (ter_len + " + num(wi - 1) + ") / " + num(wi) + "; ++r)");
        w.line("const int iq = " + num(wi) + " * r + lid1;");
        w.open("if (iq < ter_len)");
        w.open("for (int j = 0; j < tc_len; ++j)");
        for (int k = 0; k < sp.deriv_terms; ++k) {
            std::string dof = sp.is_vector
                                  ? "l_" + base + "[j * " + num(d) + " + " +
                                        num(sig.vector_spaces[sp.space_index].components[k]) + "]"
                                  : "l_" + base + "[j]";
            w.line("acc_" + base + "_d" + std::to_string(k) + "[r] += B[" + num(k * sp.term_stride) +
                   " + iq * " + num(sp.col_tile) + " + j] * " + dof + ";");
        }
        w.close();
        w.close();
        w.close();
        w.close();
        w.line(dl.barrier_stmt);
        w.close();
        w.line();
    }

    // evaluation wrap-up: pointwise map into the shared results
    w.line("// pointwise map into the array-expanded evaluation results");
    w.open("if (cell_live)");
    w.open("for (int r = 0; r < (ter_len + " + num(wi - 1) + ") / " + num(wi) + "; ++r)");
    w.line("const int iq = " + num(wi) + " * r + lid1;");
    w.open("if (iq < ter_len)");
    w.line("const double qw = quad_weights[quad_begin + row_begin + iq];");
    auto deriv_var = [](bool is_vec, int space, int term) {
        return std::string(is_vec ? "acc_v" : "acc_u") + std::to_string(space) + "_d" +
               std::to_string(term) + "[r]";
    };
    for (int k = 0; k < sig.test_deriv_terms; ++k)
        w.line("e_arr[" + num(static_cast<long long>(k) * nc * p.quad_tile) + " + lid0 * " +
               num(p.quad_tile) + " + row_begin + iq] = " +
               detail::render_expr(map, map.outputs()[k], sig, deriv_var, "qw") + ";");
    w.close();
    w.close();
    w.close();
    w.close();  // eval rowtile loop
    w.line(dl.barrier_stmt);
    w.line();

    // ---- quadrature phase ----
    const bool quad_row_rem = sig.test_dofs % p.quad_row_tile != 0;
    const bool quad_col_rem = quad_rem || (p.quad_tile % p.quad_col_tile != 0);
    const long long psi_stride = static_cast<long long>(p.quad_row_tile) * p.quad_col_tile;
    w.open("for (int i_rowtile = 0; i_rowtile < " + num(ceil_div(sig.test_dofs, p.quad_row_tile)) +
           "; ++i_rowtile)");
    w.line("const int row_begin = i_rowtile * " + num(p.quad_row_tile) + ";");
    if (quad_row_rem)
        w.line("const int tqr_len = (" + num(p.quad_row_tile) + " < " + num(sig.test_dofs) +
               " - row_begin) ? " + num(p.quad_row_tile) + " : (" + num(sig.test_dofs) +
               " - row_begin);");
    else
        w.line("const int tqr_len = " + num(p.quad_row_tile) + ";");
    w.open("if (cell_live)");
    w.open("for (int r = 0; r < " + num(quad_rounds) + "; ++r)");
    w.line("out_tile[r] = 0.0;");
    w.close();
    w.close();
    w.line();
    w.open("for (int i_coltile = 0; i_coltile < (tq_len + " + num(p.quad_col_tile - 1) + ") / " +
           num(p.quad_col_tile) + "; ++i_coltile)");
    w.line("const int col_begin = i_coltile * " + num(p.quad_col_tile) + ";");
    if (quad_col_rem)
        w.line("const int tqc_len = (" + num(p.quad_col_tile) + " < tq_len - col_begin) ? " +
               num(p.quad_col_tile) + " : (tq_len - col_begin);");
    else
        w.line("const int tqc_len = " + num(p.quad_col_tile) + ";");
    w.line("const int tile_elems_q = tqr_len * tqc_len;");
    w.open("for (int i = 0; i < (tile_elems_q + " + num(nc * wi - 1) + ") / " + num(nc * wi) +
           "; ++i)");
    w.line("const int flat = " + num(nc * wi) + " * i + " + num(wi) + " * lid0 + lid1;");
    w.open("if (flat < tile_elems_q)");
    w.line("const int tr = flat / tqc_len;");
    w.line("const int tcc = flat - tr * tqc_len;");
    for (int k = 0; k < sig.test_deriv_terms; ++k)
        w.line("B[" + num(k * psi_stride) + " + tr * " + num(p.quad_col_tile) + " + tcc] = " +
               names.psi[k] + "[(row_begin + tr) * " + num(sig.quad_points) +
               " + quad_begin + col_begin + tcc];");
    w.close();
    w.close();
    w.line(dl.barrier_stmt);
    w.line();
    w.open("if (cell_live)");
    w.open("for (int r = 0; r < (tqr_len + " + num(wi - 1) + ") / " + num(wi) + "; ++r)");
    w.line("const int jw = " + num(wi) + " * r + lid1;");
    w.open("if (jw < tqr_len)");
    w.open("for (int iq = 0; iq < tqc_len; ++iq)");
    for (int k = 0; k < sig.test_deriv_terms; ++k)
        w.line("out_tile[r] += B[" + num(k * psi_stride) + " + jw * " + num(p.quad_col_tile) +
               " + iq] * e_arr[" + num(static_cast<long long>(k) * nc * p.quad_tile) + " + lid0 * " +
               num(p.quad_tile) + " + col_begin + iq];");
    w.close();
    w.close();
    w.close();
    w.close();
    w.line(dl.barrier_stmt);
    w.close();  // quad coltile loop
    w.line();
    w.open("if (cell_live)");
    w.open("for (int r = 0; r < (tqr_len + " + num(wi - 1) + ") / " + num(wi) + "; ++r)");
    w.line("const int jw = " + num(wi) + " * r + lid1;");
    w.open("if (jw < tqr_len)");
    w.line(dl.atomic_fn + "(&out[out_map[i_cell * " + num(sig.test_dofs) +
           " + row_begin + jw]], out_tile[r]);");
    w.close();
    w.close();
    w.close();
    w.close();  // quad rowtile loop
    w.line(dl.barrier_stmt);
    w.close();  // quadtile loop
    w.close();
    src.source = w.str();
    return src;
}

// ---------------------------------------------------------------------------
// Manifests and golden fixtures
// ---------------------------------------------------------------------------

inline std::string manifest_text(const KernelSource& src) {
    std::string out;
    out += "entry: " + src.entry + "\n";
    out += "workgroup: " + std::to_string(src.workgroup_dim0) + " " +
           std::to_string(src.workgroup_dim1) + "\n";
    out += "grid: " + src.grid_formula + "\n";
    for (const auto& a : src.args)
        out += "arg: " + a.name + " " + a.role + " " + std::to_string(a.element_bytes) + "\n";
    return out;
}

inline int count_occurrences(const std::string& text, const std::string& needle) {
    int count = 0;
    for (std::size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + needle.size()))
        ++count;
    return count;
}

/// Static barrier statements in the emitted source.
inline int static_barrier_count(const KernelSource& src, Dialect dialect) {
    return count_occurrences(src.source, detail::dialect_spec(dialect).barrier_stmt);
}

/// Size of the aliased local buffer declaration, parsed back out of the text.
inline long long declared_buffer_words(const KernelSource& src) {
    const auto pos = src.source.find(" B[");
    if (pos == std::string::npos) throw std::runtime_error("no local buffer declaration found");
    return std::stoll(src.source.substr(pos + 3));
}

struct GoldenResult {
    bool pass = false;
    std::string message;
};

/// Byte-exact comparison against a fixture file. Set FEMSCHED_UPDATE_GOLDEN=1
/// to rewrite fixtures after an intentional change.
inline GoldenResult golden_check(const std::string& text, const std::string& fixture_path) {
    const char* update = std::getenv("FEMSCHED_UPDATE_GOLDEN");
    if (update && update[0] == '1') {
        std::ofstream out(fixture_path, std::ios::binary);
        out << text;
        return {true, "fixture rewritten"};
    }
    std::ifstream in(fixture_path, std::ios::binary);
    if (!in) return {false, "missing fixture: " + fixture_path};
    std::string expected((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (expected == text) return {true, "match"};
    // locate the first differing line for the report
    std::size_t line = 1, col = 0;
    for (std::size_t i = 0; i < std::min(expected.size(), text.size()); ++i) {
        if (expected[i] != text[i]) break;
        if (expected[i] == '\n') {
            ++line;
            col = 0;
        } else {
            ++col;
        }
    }
    return {false, "differs from " + fixture_path + " at line " + std::to_string(line) +
                       ", column " + std::to_string(col + 1)};
}

}  // namespace femsched
