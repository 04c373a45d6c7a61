#pragma once

// Versioned structured-text serialization for problem instances and tiling
// candidates. Doubles are written with 17 significant digits so a round trip
// is bit-exact.

#include <fstream>
#include <iomanip>
#include <sstream>

#include "femsched/qoi.hpp"

namespace femsched {

inline constexpr int kFormatVersion = 1;

namespace detail {

inline std::string fmt17(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct LineReader {
    std::istream& is;
    int line_no = 0;

    std::string next() {
        std::string line;
        while (std::getline(is, line)) {
            ++line_no;
            if (!line.empty() && line[0] != '#') return line;
        }
        throw std::runtime_error("instance file: unexpected end of input at line " +
                                 std::to_string(line_no));
    }

    // "key: rest" -> rest; throws when the key differs
    std::string expect(const std::string& key) {
        const std::string line = next();
        const auto colon = line.find(':');
        if (colon == std::string::npos || line.substr(0, colon) != key)
            throw std::runtime_error("instance file: expected '" + key + "' at line " +
                                     std::to_string(line_no) + ", got '" + line + "'");
        auto rest = line.substr(colon + 1);
        const auto start = rest.find_first_not_of(' ');
        return start == std::string::npos ? std::string() : rest.substr(start);
    }

    long long expect_int(const std::string& key) { return std::stoll(expect(key)); }
};

inline std::vector<double> parse_doubles(const std::string& line, std::size_t expected,
                                         int line_no) {
    std::istringstream is(line);
    std::vector<double> out;
    double v;
    while (is >> v) out.push_back(v);
    if (out.size() != expected)
        throw std::runtime_error("instance file: expected " + std::to_string(expected) +
                                 " values at line " + std::to_string(line_no) + ", got " +
                                 std::to_string(out.size()));
    return out;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i)
        os << (i ? " " : "") << fmt17(values[i]);
    os << "\n";
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) os << (c ? " " : "") << fmt17(m(r, c));
        os << "\n";
    }
}

inline Matrix read_matrix(LineReader& r, int rows, int cols) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        auto row = parse_doubles(r.next(), static_cast<std::size_t>(cols), r.line_no);
        for (int j = 0; j < cols; ++j) m(i, j) = row[j];
    }
    return m;
}

inline void write_index_map(std::ostream& os, const std::string& key, const IndexMap& m) {
    os << key << ": " << m.cells << " " << m.entries << " " << m.global_count << "\n";
    for (int cell = 0; cell < m.cells; ++cell) {
        for (int j = 0; j < m.entries; ++j) os << (j ? " " : "") << m(cell, j);
        os << "\n";
    }
}

inline IndexMap read_index_map(LineReader& r, const std::string& key) {
    std::istringstream head(r.expect(key));
    int cells, entries, global;
    head >> cells >> entries >> global;
    if (head.fail()) throw std::runtime_error("instance file: bad index map header for " + key);
    IndexMap m(cells, entries, global);
    for (int cell = 0; cell < cells; ++cell) {
        std::istringstream row(r.next());
        for (int j = 0; j < entries; ++j) {
            row >> m(cell, j);
            if (row.fail())
                throw std::runtime_error("instance file: bad index row at line " +
                                         std::to_string(r.line_no));
        }
    }
    return m;
}

inline const char* map_op_name(PointwiseMap::Op op) {
    using Op = PointwiseMap::Op;
    switch (op) {
        case Op::constant: return "const";
        case Op::scalar_deriv: return "sderiv";
        case Op::vector_deriv: return "vderiv";
        case Op::jacobian: return "jac";
        case Op::determinant: return "det";
        case Op::weight: return "weight";
        case Op::coord: return "coord";
        case Op::add: return "add";
        case Op::mul: return "mul";
    }
    return "?";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Problem instances
// ---------------------------------------------------------------------------

namespace detail {

inline void write_signature_block(std::ostream& os, const FormSignature& sig) {
    os << "signature_begin:\n";
    os << "dim: " << sig.dim << "\n";
    os << "quad_points: " << sig.quad_points << "\n";
    os << "coord_dofs: " << sig.coord_dofs << "\n";
    os << "test_dofs: " << sig.test_dofs << "\n";
    os << "test_deriv_terms: " << sig.test_deriv_terms << "\n";
    os << "word_bytes: " << sig.word_bytes << "\n";
    os << "affine_geometry: " << (sig.affine_geometry ? 1 : 0) << "\n";
    os << "coordinate_space: " << sig.coordinate_space << "\n";
    os << "scalar_spaces: " << sig.scalar_spaces.size() << "\n";
    for (const auto& s : sig.scalar_spaces) os << "scalar_space: " << s.dofs << " " << s.deriv_terms << "\n";
    os << "vector_spaces: " << sig.vector_spaces.size() << "\n";
    for (const auto& v : sig.vector_spaces) {
        os << "vector_space: " << v.dofs << " " << v.deriv_terms;
        for (int c : v.components) os << " " << c;
        os << "\n";
    }
    os << "signature_end:\n";
}

inline FormSignature read_signature_block(LineReader& r) {
    FormSignature sig;
    r.expect("signature_begin");
    sig.dim = static_cast<int>(r.expect_int("dim"));
    sig.quad_points = static_cast<int>(r.expect_int("quad_points"));
    sig.coord_dofs = static_cast<int>(r.expect_int("coord_dofs"));
    sig.test_dofs = static_cast<int>(r.expect_int("test_dofs"));
    sig.test_deriv_terms = static_cast<int>(r.expect_int("test_deriv_terms"));
    sig.word_bytes = static_cast<int>(r.expect_int("word_bytes"));
    sig.affine_geometry = r.expect_int("affine_geometry") != 0;
    sig.coordinate_space = static_cast<int>(r.expect_int("coordinate_space"));
    const int n_scalar = static_cast<int>(r.expect_int("scalar_spaces"));
    for (int i = 0; i < n_scalar; ++i) {
        std::istringstream row(r.expect("scalar_space"));
        ScalarSpace s;
        row >> s.dofs >> s.deriv_terms;
        sig.scalar_spaces.push_back(s);
    }
    const int n_vector = static_cast<int>(r.expect_int("vector_spaces"));
    for (int i = 0; i < n_vector; ++i) {
        std::istringstream row(r.expect("vector_space"));
        VectorSpace v;
        row >> v.dofs >> v.deriv_terms;
        for (int k = 0; k < v.deriv_terms; ++k) {
            int c;
            row >> c;
            v.components.push_back(c);
        }
        if (row.fail()) throw std::runtime_error("instance file: bad vector space line");
        sig.vector_spaces.push_back(v);
    }
    r.expect("signature_end");
    return sig;
}

}  // namespace detail

/// Standalone signature document.
inline void save_signature(std::ostream& os, const FormSignature& sig) {
    sig.validate();
    os << "format_version: " << kFormatVersion << "\n";
    detail::write_signature_block(os, sig);
}

inline FormSignature load_signature(std::istream& is) {
    detail::LineReader r{is};
    if (r.expect_int("format_version") != kFormatVersion)
        throw std::runtime_error("signature file: unsupported format version");
    auto sig = detail::read_signature_block(r);
    sig.validate();
    return sig;
}

inline void save_instance(std::ostream& os, const ProblemInstance& p) {
    p.validate();
    const FormSignature& sig = p.signature;
    os << "format_version: " << kFormatVersion << "\n";
    detail::write_signature_block(os, sig);

    os << "map_begin:\n";
    for (const auto& n : p.map.nodes()) {
        os << "node: " << detail::map_op_name(n.op);
        if (n.op == PointwiseMap::Op::constant)
            os << " " << detail::fmt17(n.value);
        else if (n.op != PointwiseMap::Op::determinant && n.op != PointwiseMap::Op::weight)
            os << " " << n.a << " " << n.b;
        os << "\n";
    }
    for (int out : p.map.outputs()) os << "output: " << out << "\n";
    os << "map_end:\n";

    os << "tabulations_begin:\n";
    os << "weights:\n";
    detail::write_doubles(os, p.tabulations.weights);
    for (std::size_t i = 0; i < p.tabulations.scalar_phi.size(); ++i)
        for (std::size_t k = 0; k < p.tabulations.scalar_phi[i].size(); ++k) {
            os << "phi_scalar: " << i << " " << k << "\n";
            detail::write_matrix(os, p.tabulations.scalar_phi[i][k]);
        }
    for (std::size_t i = 0; i < p.tabulations.vector_phi.size(); ++i)
        for (std::size_t k = 0; k < p.tabulations.vector_phi[i].size(); ++k) {
            os << "phi_vector: " << i << " " << k << "\n";
            detail::write_matrix(os, p.tabulations.vector_phi[i][k]);
        }
    for (std::size_t k = 0; k < p.tabulations.psi.size(); ++k) {
        os << "psi: " << k << "\n";
        detail::write_matrix(os, p.tabulations.psi[k]);
    }
    os << "tabulations_end:\n";

    os << "connectivity_begin:\n";
    os << "cells: " << p.connectivity.cell_count << "\n";
    for (std::size_t i = 0; i < p.connectivity.scalar_maps.size(); ++i)
        detail::write_index_map(os, "scalar_map", p.connectivity.scalar_maps[i]);
    for (std::size_t i = 0; i < p.connectivity.vector_maps.size(); ++i)
        detail::write_index_map(os, "vector_map", p.connectivity.vector_maps[i]);
    detail::write_index_map(os, "test_map", p.connectivity.test_map);
    if (sig.affine_geometry) {
        detail::write_index_map(os, "coord_map", p.connectivity.coord_map);
        os << "coords: " << p.connectivity.coord_global_count << "\n";
        for (int i = 0; i < p.connectivity.coord_global_count; ++i) {
            for (int c = 0; c < sig.dim; ++c)
                os << (c ? " " : "")
                   << detail::fmt17(p.connectivity.coords[static_cast<std::size_t>(i) * sig.dim + c]);
            os << "\n";
        }
    }
    os << "connectivity_end:\n";

    os << "inputs_begin:\n";
    for (const auto& v : p.scalar_inputs) {
        os << "scalar_input:\n";
        detail::write_doubles(os, v);
    }
    for (const auto& v : p.vector_inputs) {
        os << "vector_input:\n";
        detail::write_doubles(os, v);
    }
    os << "inputs_end:\n";
    os << "output_size: " << p.output_size << "\n";
}

inline ProblemInstance load_instance(std::istream& is) {
    detail::LineReader r{is};
    if (r.expect_int("format_version") != kFormatVersion)
        throw std::runtime_error("instance file: unsupported format version");

    ProblemInstance p;
    p.signature = detail::read_signature_block(r);
    const FormSignature& sig = p.signature;

    r.expect("map_begin");
    {
        std::string line;
        while ((line = r.next()).rfind("node:", 0) == 0) {
            std::istringstream row(line.substr(5));
            std::string op;
            row >> op;
            if (op == "const") {
                double v;
                row >> v;
                p.map.constant(v);
            } else if (op == "det") {
                p.map.determinant();
            } else if (op == "weight") {
                p.map.weight();
            } else {
                int a, b;
                row >> a >> b;
                if (row.fail()) throw std::runtime_error("instance file: bad map node");
                if (op == "sderiv") p.map.scalar_deriv(a, b);
                else if (op == "vderiv") p.map.vector_deriv(a, b);
                else if (op == "jac") p.map.jacobian(a, b);
                else if (op == "coord") p.map.coord(a, b);
                else if (op == "add") p.map.add(a, b);
                else if (op == "mul") p.map.mul(a, b);
                else throw std::runtime_error("instance file: unknown map node '" + op + "'");
            }
        }
        // `line` now holds the first output entry
        while (line.rfind("output:", 0) == 0) {
            p.map.add_output(std::stoi(line.substr(7)));
            line = r.next();
        }
        if (line.rfind("map_end", 0) != 0)
            throw std::runtime_error("instance file: expected map_end at line " +
                                     std::to_string(r.line_no));
    }

    r.expect("tabulations_begin");
    r.expect("weights");
    p.tabulations.weights =
        detail::parse_doubles(r.next(), static_cast<std::size_t>(sig.quad_points), r.line_no);
    p.tabulations.scalar_phi.resize(sig.scalar_spaces.size());
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        for (int k = 0; k < sig.scalar_spaces[i].deriv_terms; ++k) {
            r.expect("phi_scalar");
            p.tabulations.scalar_phi[i].push_back(
                detail::read_matrix(r, sig.quad_points, sig.scalar_spaces[i].dofs));
        }
    p.tabulations.vector_phi.resize(sig.vector_spaces.size());
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        for (int k = 0; k < sig.vector_spaces[i].deriv_terms; ++k) {
            r.expect("phi_vector");
            p.tabulations.vector_phi[i].push_back(
                detail::read_matrix(r, sig.quad_points, sig.vector_spaces[i].dofs));
        }
    for (int k = 0; k < sig.test_deriv_terms; ++k) {
        r.expect("psi");
        p.tabulations.psi.push_back(detail::read_matrix(r, sig.test_dofs, sig.quad_points));
    }
    r.expect("tabulations_end");

    r.expect("connectivity_begin");
    p.connectivity.cell_count = static_cast<int>(r.expect_int("cells"));
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
        p.connectivity.scalar_maps.push_back(detail::read_index_map(r, "scalar_map"));
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
        p.connectivity.vector_maps.push_back(detail::read_index_map(r, "vector_map"));
    p.connectivity.test_map = detail::read_index_map(r, "test_map");
    if (sig.affine_geometry) {
        p.connectivity.coord_map = detail::read_index_map(r, "coord_map");
        p.connectivity.coord_global_count = static_cast<int>(r.expect_int("coords"));
        p.connectivity.coords.resize(static_cast<std::size_t>(p.connectivity.coord_global_count) *
                                     sig.dim);
        for (int i = 0; i < p.connectivity.coord_global_count; ++i) {
            auto row = detail::parse_doubles(r.next(), static_cast<std::size_t>(sig.dim), r.line_no);
            for (int c = 0; c < sig.dim; ++c)
                p.connectivity.coords[static_cast<std::size_t>(i) * sig.dim + c] = row[c];
        }
    }
    r.expect("connectivity_end");

    r.expect("inputs_begin");
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        r.expect("scalar_input");
        p.scalar_inputs.push_back(detail::parse_doubles(
            r.next(), static_cast<std::size_t>(p.connectivity.scalar_maps[i].global_count),
            r.line_no));
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        r.expect("vector_input");
        p.vector_inputs.push_back(detail::parse_doubles(
            r.next(),
            static_cast<std::size_t>(p.connectivity.vector_maps[i].global_count) * sig.dim,
            r.line_no));
    }
    r.expect("inputs_end");
    p.output_size = static_cast<int>(r.expect_int("output_size"));
    p.validate();
    return p;
}

inline void save_instance_file(const std::string& path, const ProblemInstance& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    save_instance(os, p);
}

inline ProblemInstance load_instance_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return load_instance(is);
}

// ---------------------------------------------------------------------------
// Tiling candidates
// ---------------------------------------------------------------------------

inline void save_candidate(std::ostream& os, const TilingParams& p) {
    os << "format_version: " << kFormatVersion << "\n";
    if (p.kind == ScheduleKind::SingleCellPerWorkItem) {
        os << "kind: scpt\n";
        return;
    }
    os << "kind: mlt\n";
    os << "quad_tile: " << p.quad_tile << "\n";
    os << "eval_row_tile: " << p.eval_row_tile << "\n";
    os << "eval_col_tiles_scalar:";
    for (int t : p.eval_col_tiles_scalar) os << " " << t;
    os << "\n";
    os << "eval_col_tiles_vector:";
    for (int t : p.eval_col_tiles_vector) os << " " << t;
    os << "\n";
    os << "quad_row_tile: " << p.quad_row_tile << "\n";
    os << "quad_col_tile: " << p.quad_col_tile << "\n";
    os << "cells_per_group: " << p.cells_per_group << "\n";
    os << "lanes_per_cell: " << p.lanes_per_cell << "\n";
}

inline TilingParams load_candidate(std::istream& is) {
    detail::LineReader r{is};
    if (r.expect_int("format_version") != kFormatVersion)
        throw std::runtime_error("candidate file: unsupported format version");
    const std::string kind = r.expect("kind");
    if (kind == "scpt") return TilingParams::scpt();
    if (kind != "mlt") throw std::runtime_error("candidate file: unknown kind '" + kind + "'");
    TilingParams p;
    p.kind = ScheduleKind::MultiLevelTiling;
    p.quad_tile = static_cast<int>(r.expect_int("quad_tile"));
    p.eval_row_tile = static_cast<int>(r.expect_int("eval_row_tile"));
    auto parse_ints = [](const std::string& line) {
        std::istringstream is2(line);
        std::vector<int> out;
        int v;
        while (is2 >> v) out.push_back(v);
        return out;
    };
    p.eval_col_tiles_scalar = parse_ints(r.expect("eval_col_tiles_scalar"));
    p.eval_col_tiles_vector = parse_ints(r.expect("eval_col_tiles_vector"));
    p.quad_row_tile = static_cast<int>(r.expect_int("quad_row_tile"));
    p.quad_col_tile = static_cast<int>(r.expect_int("quad_col_tile"));
    p.cells_per_group = static_cast<int>(r.expect_int("cells_per_group"));
    p.lanes_per_cell = static_cast<int>(r.expect_int("lanes_per_cell"));
    return p;
}

inline TilingParams load_candidate_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return load_candidate(is);
}

}  // namespace femsched
