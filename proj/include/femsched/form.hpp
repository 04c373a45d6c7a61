#pragma once

// Data model for the action kernel of a generalized bilinear form on simplex
// meshes, plus a strictly sequential reference executor. The reference
// executor is the correctness oracle for every scheduled variant: it runs
// gather -> jacobian -> evaluation -> pointwise map -> quadrature -> scatter
// cell by cell in ascending order with plain (non-atomic) accumulation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace femsched {

inline constexpr int kSubgroupSize = 32;

inline long long ceil_div(long long a, long long b) { return (a + b - 1) / b; }

// Thrown when a candidate cannot run on a device (e.g. local memory over cap).
struct InfeasibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a scheduled run disagrees with the reference oracle.
struct VerificationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small dense containers
// ---------------------------------------------------------------------------

struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Cell-local to global index map (one per function space).
struct IndexMap {
    int cells = 0;
    int entries = 0;        // local indices per cell
    int global_count = 0;   // size of the global array it points into
    std::vector<int> indices;

    IndexMap() = default;
    IndexMap(int c, int e, int g)
        : cells(c), entries(e), global_count(g), indices(static_cast<std::size_t>(c) * e) {}

    int operator()(int cell, int j) const {
        return indices[static_cast<std::size_t>(cell) * entries + j];
    }
    int& operator()(int cell, int j) {
        return indices[static_cast<std::size_t>(cell) * entries + j];
    }
};

// ---------------------------------------------------------------------------
// Form signature
// ---------------------------------------------------------------------------

struct ScalarSpace {
    int dofs = 0;         // local DOF count
    int deriv_terms = 0;  // number of tabulated derivative terms
};

struct VectorSpace {
    int dofs = 0;                 // local DOF count per component
    int deriv_terms = 0;
    std::vector<int> components;  // component read by each derivative term, 0-based
};

/// Integer/structural parameters of a generalized bilinear form's action
/// kernel. Everything downstream (QoIs, search space, simulator, codegen) is
/// a function of this signature plus a tiling choice.
struct FormSignature {
    int dim = 2;
    std::vector<ScalarSpace> scalar_spaces;
    std::vector<VectorSpace> vector_spaces;
    int test_dofs = 0;
    int test_deriv_terms = 0;
    int quad_points = 0;
    int coord_dofs = 0;  // coordinate element DOFs; dim+1 for affine simplices
    bool affine_geometry = true;
    int coordinate_space = -1;  // index into vector_spaces when !affine_geometry
    int word_bytes = 8;

    int trial_space_count() const {
        return static_cast<int>(scalar_spaces.size() + vector_spaces.size());
    }

    // Flattened offsets for derivative-term storage, scalar spaces first.
    int scalar_term_offset(int space) const {
        int off = 0;
        for (int i = 0; i < space; ++i) off += scalar_spaces[i].deriv_terms;
        return off;
    }
    int vector_term_offset(int space) const {
        int off = 0;
        for (int i = 0; i < space; ++i) off += vector_spaces[i].deriv_terms;
        return off;
    }
    int total_scalar_terms() const { return scalar_term_offset(static_cast<int>(scalar_spaces.size())); }
    int total_vector_terms() const { return vector_term_offset(static_cast<int>(vector_spaces.size())); }

    void validate() const {
        if (dim < 1 || dim > 3) throw std::invalid_argument("signature: dim must be 1..3");
        if (scalar_spaces.empty() && vector_spaces.empty())
            throw std::invalid_argument("signature: at least one trial space required");
        if (quad_points < 1) throw std::invalid_argument("signature: quad_points must be >= 1");
        if (test_dofs < 1 || test_deriv_terms < 1)
            throw std::invalid_argument("signature: test space counts must be positive");
        if (word_bytes != 4 && word_bytes != 8)
            throw std::invalid_argument("signature: word_bytes must be 4 or 8");
        for (const auto& s : scalar_spaces)
            if (s.dofs < 1 || s.deriv_terms < 1)
                throw std::invalid_argument("signature: scalar space counts must be positive");
        for (const auto& v : vector_spaces) {
            if (v.dofs < 1 || v.deriv_terms < 1)
                throw std::invalid_argument("signature: vector space counts must be positive");
            if (static_cast<int>(v.components.size()) != v.deriv_terms)
                throw std::invalid_argument("signature: one component index per derivative term required");
            for (int c : v.components)
                if (c < 0 || c >= dim)
                    throw std::invalid_argument("signature: component index out of range");
        }
        if (affine_geometry) {
            if (coord_dofs != dim + 1)
                throw std::invalid_argument("signature: affine geometry requires coord_dofs == dim+1");
            if (coordinate_space != -1)
                throw std::invalid_argument("signature: coordinate_space is only meaningful when non-affine");
        } else {
            if (coordinate_space < 0 || coordinate_space >= static_cast<int>(vector_spaces.size()))
                throw std::invalid_argument(
                    "signature: non-affine geometry requires the coordinate space to appear in the "
                    "vector-space list exactly once");
        }
    }
};

/// dim P_degree on a d-simplex: binomial(degree+d, d).
inline int simplex_space_dim(int degree, int d) {
    if (degree < 0 || d < 1 || d > 3)
        throw std::invalid_argument("simplex_space_dim: degree >= 0 and d in 1..3 required");
    long long num = 1, den = 1;
    for (int i = 1; i <= d; ++i) {
        num *= degree + i;
        den *= i;
    }
    return static_cast<int>(num / den);
}

/// Mul+add pairs executed by the untransformed kernel's evaluation and
/// quadrature matvecs for one cell. Pointwise-map arithmetic is excluded.
inline long long usable_flops(const FormSignature& sig) {
    sig.validate();
    long long ops = 0;
    for (const auto& s : sig.scalar_spaces)
        ops += 2LL * s.deriv_terms * sig.quad_points * s.dofs;
    for (const auto& v : sig.vector_spaces)
        ops += 2LL * v.deriv_terms * sig.quad_points * v.dofs;
    ops += 2LL * sig.test_deriv_terms * sig.quad_points * sig.test_dofs;
    return ops;
}

// ---------------------------------------------------------------------------
// Pointwise map: expression trees applied at each quadrature point
// ---------------------------------------------------------------------------

// Inputs visible to the pointwise map at one (cell, quadrature point).
struct EvalInputs {
    const double* scalar_derivs = nullptr;  // flattened by FormSignature term offsets
    const double* vector_derivs = nullptr;
    const double* jacobian = nullptr;       // dim*dim row-major, affine only
    double determinant = 0.0;               // affine only
    double weight = 0.0;
    const double* cell_coords = nullptr;    // coord_dofs*dim row-major, affine only
    int dim = 0;
};

/// One add/multiply/constant expression tree per output e_1..e_{test terms}.
/// Leaves reference evaluated derivative variables and geometry symbols.
class PointwiseMap {
public:
    enum class Op : std::uint8_t {
        constant,
        scalar_deriv,  // a = space, b = term
        vector_deriv,  // a = space, b = term
        jacobian,      // a = row, b = col
        determinant,
        weight,
        coord,         // a = local vertex, b = axis
        add,           // a, b = children
        mul,           // a, b = children
    };
    struct Node {
        Op op;
        double value = 0.0;
        int a = -1, b = -1;
    };

    int constant(double v) { return push({Op::constant, v, -1, -1}); }
    int scalar_deriv(int space, int term) { return push({Op::scalar_deriv, 0.0, space, term}); }
    int vector_deriv(int space, int term) { return push({Op::vector_deriv, 0.0, space, term}); }
    int jacobian(int row, int col) { return push({Op::jacobian, 0.0, row, col}); }
    int determinant() { return push({Op::determinant, 0.0, -1, -1}); }
    int weight() { return push({Op::weight, 0.0, -1, -1}); }
    int coord(int vertex, int axis) { return push({Op::coord, 0.0, vertex, axis}); }
    int add(int x, int y) { return push({Op::add, 0.0, x, y}); }
    int mul(int x, int y) { return push({Op::mul, 0.0, x, y}); }

    int sum(const std::vector<int>& terms) {
        if (terms.empty()) return constant(0.0);
        int acc = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
        return acc;
    }

    void add_output(int node) { outputs_.push_back(node); }

    int output_count() const { return static_cast<int>(outputs_.size()); }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<int>& outputs() const { return outputs_; }

    void validate(const FormSignature& sig) const {
        if (static_cast<int>(outputs_.size()) != sig.test_deriv_terms)
            throw std::invalid_argument("pointwise map: one expression per test derivative term required");
        for (int out : outputs_)
            if (out < 0 || out >= static_cast<int>(nodes_.size()))
                throw std::invalid_argument("pointwise map: output references unknown node");
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            switch (n.op) {
                case Op::constant:
                    break;
                case Op::scalar_deriv:
                    if (n.a < 0 || n.a >= static_cast<int>(sig.scalar_spaces.size()) || n.b < 0 ||
                        n.b >= sig.scalar_spaces[n.a].deriv_terms)
                        throw std::invalid_argument("pointwise map: undeclared scalar derivative input");
                    break;
                case Op::vector_deriv:
                    if (n.a < 0 || n.a >= static_cast<int>(sig.vector_spaces.size()) || n.b < 0 ||
                        n.b >= sig.vector_spaces[n.a].deriv_terms)
                        throw std::invalid_argument("pointwise map: undeclared vector derivative input");
                    break;
                case Op::jacobian:
                    if (!sig.affine_geometry)
                        throw std::invalid_argument("pointwise map: jacobian input requires affine geometry");
                    if (n.a < 0 || n.a >= sig.dim || n.b < 0 || n.b >= sig.dim)
                        throw std::invalid_argument("pointwise map: jacobian index out of range");
                    break;
                case Op::determinant:
                    if (!sig.affine_geometry)
                        throw std::invalid_argument("pointwise map: determinant input requires affine geometry");
                    break;
                case Op::weight:
                    break;
                case Op::coord:
                    if (!sig.affine_geometry)
                        throw std::invalid_argument("pointwise map: coord input requires affine geometry");
                    if (n.a < 0 || n.a >= sig.coord_dofs || n.b < 0 || n.b >= sig.dim)
                        throw std::invalid_argument("pointwise map: coord index out of range");
                    break;
                case Op::add:
                case Op::mul:
                    if (n.a < 0 || n.b < 0 || n.a >= static_cast<int>(id) || n.b >= static_cast<int>(id))
                        throw std::invalid_argument("pointwise map: child must precede its parent");
                    break;
            }
        }
    }

    // Evaluates output `out_idx`; op_count, when given, accumulates the number
    // of add/mul nodes evaluated (kept separate from matvec FLOP accounting).
    double eval(int out_idx, const FormSignature& sig, const EvalInputs& in,
                long long* op_count = nullptr) const {
        return eval_node(outputs_[out_idx], sig, in, op_count);
    }

private:
    int push(Node n) {
        nodes_.push_back(n);
        return static_cast<int>(nodes_.size()) - 1;
    }

    double eval_node(int id, const FormSignature& sig, const EvalInputs& in,
                     long long* op_count) const {
        const Node& n = nodes_[id];
        switch (n.op) {
            case Op::constant: return n.value;
            case Op::scalar_deriv: return in.scalar_derivs[sig.scalar_term_offset(n.a) + n.b];
            case Op::vector_deriv: return in.vector_derivs[sig.vector_term_offset(n.a) + n.b];
            case Op::jacobian: return in.jacobian[n.a * in.dim + n.b];
            case Op::determinant: return in.determinant;
            case Op::weight: return in.weight;
            case Op::coord: return in.cell_coords[n.a * in.dim + n.b];
            case Op::add:
                if (op_count) ++*op_count;
                return eval_node(n.a, sig, in, op_count) + eval_node(n.b, sig, in, op_count);
            case Op::mul:
                if (op_count) ++*op_count;
                return eval_node(n.a, sig, in, op_count) * eval_node(n.b, sig, in, op_count);
        }
        return 0.0;  // unreachable
    }

    std::vector<Node> nodes_;
    std::vector<int> outputs_;
};

// ---------------------------------------------------------------------------
// Tabulations, connectivity, instances
// ---------------------------------------------------------------------------

struct Tabulations {
    // phi matrices are quad_points x dofs (row = quadrature point);
    // psi matrices are test_dofs x quad_points.
    std::vector<std::vector<Matrix>> scalar_phi;  // [space][term]
    std::vector<std::vector<Matrix>> vector_phi;  // [space][term]
    std::vector<Matrix> psi;                      // [term]
    std::vector<double> weights;                  // length quad_points

    void validate(const FormSignature& sig) const {
        auto check_finite = [](const Matrix& m, const char* what) {
            for (double v : m.data)
                if (!std::isfinite(v)) throw std::invalid_argument(std::string("tabulations: non-finite entry in ") + what);
        };
        if (scalar_phi.size() != sig.scalar_spaces.size() || vector_phi.size() != sig.vector_spaces.size())
            throw std::invalid_argument("tabulations: one phi set per trial space required");
        for (std::size_t i = 0; i < scalar_phi.size(); ++i) {
            if (static_cast<int>(scalar_phi[i].size()) != sig.scalar_spaces[i].deriv_terms)
                throw std::invalid_argument("tabulations: scalar phi term count mismatch");
            for (const auto& m : scalar_phi[i]) {
                if (m.rows != sig.quad_points || m.cols != sig.scalar_spaces[i].dofs)
                    throw std::invalid_argument("tabulations: scalar phi shape mismatch");
                check_finite(m, "scalar phi");
            }
        }
        for (std::size_t i = 0; i < vector_phi.size(); ++i) {
            if (static_cast<int>(vector_phi[i].size()) != sig.vector_spaces[i].deriv_terms)
                throw std::invalid_argument("tabulations: vector phi term count mismatch");
            for (const auto& m : vector_phi[i]) {
                if (m.rows != sig.quad_points || m.cols != sig.vector_spaces[i].dofs)
                    throw std::invalid_argument("tabulations: vector phi shape mismatch");
                check_finite(m, "vector phi");
            }
        }
        if (static_cast<int>(psi.size()) != sig.test_deriv_terms)
            throw std::invalid_argument("tabulations: psi term count mismatch");
        for (const auto& m : psi) {
            if (m.rows != sig.test_dofs || m.cols != sig.quad_points)
                throw std::invalid_argument("tabulations: psi shape mismatch");
            check_finite(m, "psi");
        }
        if (static_cast<int>(weights.size()) != sig.quad_points)
            throw std::invalid_argument("tabulations: weight count mismatch");
        for (double w : weights)
            if (!std::isfinite(w)) throw std::invalid_argument("tabulations: non-finite weight");
    }
};

struct MeshConnectivity {
    int cell_count = 0;
    std::vector<IndexMap> scalar_maps;  // [space]
    std::vector<IndexMap> vector_maps;  // [space]
    IndexMap test_map;
    IndexMap coord_map;                 // affine geometry only
    std::vector<double> coords;         // coord_global_count x dim, row-major
    int coord_global_count = 0;

    void validate(const FormSignature& sig) const {
        if (cell_count < 1) throw std::invalid_argument("connectivity: at least one cell required");
        auto check_map = [this](const IndexMap& m, int entries, const char* what) {
            if (m.cells != cell_count || m.entries != entries)
                throw std::invalid_argument(std::string("connectivity: bad shape for ") + what);
            for (int idx : m.indices)
                if (idx < 0 || idx >= m.global_count)
                    throw std::invalid_argument(std::string("connectivity: index out of bounds in ") + what);
        };
        if (scalar_maps.size() != sig.scalar_spaces.size() || vector_maps.size() != sig.vector_spaces.size())
            throw std::invalid_argument("connectivity: one index map per trial space required");
        for (std::size_t i = 0; i < scalar_maps.size(); ++i)
            check_map(scalar_maps[i], sig.scalar_spaces[i].dofs, "scalar space map");
        for (std::size_t i = 0; i < vector_maps.size(); ++i)
            check_map(vector_maps[i], sig.vector_spaces[i].dofs, "vector space map");
        check_map(test_map, sig.test_dofs, "test space map");
        if (sig.affine_geometry) {
            check_map(coord_map, sig.coord_dofs, "coordinate map");
            if (coord_global_count < 1 ||
                coords.size() != static_cast<std::size_t>(coord_global_count) * sig.dim)
                throw std::invalid_argument("connectivity: coordinate array shape mismatch");
            if (coord_map.global_count != coord_global_count)
                throw std::invalid_argument("connectivity: coordinate map bound mismatch");
        }
    }
};

struct ProblemInstance {
    FormSignature signature;
    PointwiseMap map;
    Tabulations tabulations;
    MeshConnectivity connectivity;
    std::vector<std::vector<double>> scalar_inputs;  // [space][global dofs]
    std::vector<std::vector<double>> vector_inputs;  // [space][global dofs * dim]
    int output_size = 0;

    void validate() const {
        signature.validate();
        map.validate(signature);
        tabulations.validate(signature);
        connectivity.validate(signature);
        if (scalar_inputs.size() != signature.scalar_spaces.size() ||
            vector_inputs.size() != signature.vector_spaces.size())
            throw std::invalid_argument("instance: one input vector per trial space required");
        for (std::size_t i = 0; i < scalar_inputs.size(); ++i)
            if (scalar_inputs[i].size() !=
                static_cast<std::size_t>(connectivity.scalar_maps[i].global_count))
                throw std::invalid_argument("instance: scalar input length mismatch");
        for (std::size_t i = 0; i < vector_inputs.size(); ++i)
            if (vector_inputs[i].size() !=
                static_cast<std::size_t>(connectivity.vector_maps[i].global_count) * signature.dim)
                throw std::invalid_argument("instance: vector input length mismatch");
        if (output_size != connectivity.test_map.global_count)
            throw std::invalid_argument("instance: output length mismatch");
    }
};

// ---------------------------------------------------------------------------
// Geometry helper (affine): jacobian column c = vertex[c+1] - vertex[0]
// ---------------------------------------------------------------------------

inline void affine_jacobian(const double* cell_coords, int dim, double* jac_out, double* det_out) {
    for (int c = 0; c < dim; ++c)
        for (int r = 0; r < dim; ++r)
            jac_out[r * dim + c] = cell_coords[(c + 1) * dim + r] - cell_coords[r];
    double det = 0.0;
    const double* J = jac_out;
    switch (dim) {
        case 1: det = J[0]; break;
        case 2: det = J[0] * J[3] - J[1] * J[2]; break;
        case 3:
            det = J[0] * (J[4] * J[8] - J[5] * J[7]) - J[1] * (J[3] * J[8] - J[5] * J[6]) +
                  J[2] * (J[3] * J[7] - J[4] * J[6]);
            break;
        default: break;
    }
    *det_out = det;
}

// ---------------------------------------------------------------------------
// Reference executor
// ---------------------------------------------------------------------------

struct ReferenceCounters {
    long long matvec_mults = 0;
    long long matvec_adds = 0;
    long long map_ops = 0;  // add/mul nodes inside the pointwise map
};

/// Sequential ground-truth action. Deterministic by construction: cells in
/// ascending order, plain additions into the output vector.
inline std::vector<double> reference_action(const ProblemInstance& p,
                                            ReferenceCounters* counters = nullptr) {
    p.validate();
    const FormSignature& sig = p.signature;
    const int dim = sig.dim;
    std::vector<double> out(static_cast<std::size_t>(p.output_size), 0.0);

    const int n_scalar = static_cast<int>(sig.scalar_spaces.size());
    const int n_vector = static_cast<int>(sig.vector_spaces.size());

    std::vector<std::vector<double>> local_scalar(n_scalar), local_vector(n_vector);
    for (int i = 0; i < n_scalar; ++i) local_scalar[i].resize(sig.scalar_spaces[i].dofs);
    for (int i = 0; i < n_vector; ++i)
        local_vector[i].resize(static_cast<std::size_t>(sig.vector_spaces[i].dofs) * dim);
    std::vector<double> cell_coords(sig.affine_geometry ? sig.coord_dofs * dim : 0);
    std::vector<double> jac(sig.affine_geometry ? dim * dim : 0);
    std::vector<double> scalar_derivs(sig.total_scalar_terms());
    std::vector<double> vector_derivs(sig.total_vector_terms());
    std::vector<double> e_values(sig.test_deriv_terms);
    std::vector<double> cell_out(sig.test_dofs);

    auto fail = [](int cell, const char* stage) {
        throw std::runtime_error("reference_action: non-finite value at cell " +
                                 std::to_string(cell) + " during " + stage);
    };

    for (int cell = 0; cell < p.connectivity.cell_count; ++cell) {
        // gather
        for (int i = 0; i < n_scalar; ++i) {
            const IndexMap& m = p.connectivity.scalar_maps[i];
            for (int j = 0; j < m.entries; ++j) local_scalar[i][j] = p.scalar_inputs[i][m(cell, j)];
        }
        for (int i = 0; i < n_vector; ++i) {
            const IndexMap& m = p.connectivity.vector_maps[i];
            for (int j = 0; j < m.entries; ++j)
                for (int c = 0; c < dim; ++c)
                    local_vector[i][static_cast<std::size_t>(j) * dim + c] =
                        p.vector_inputs[i][static_cast<std::size_t>(m(cell, j)) * dim + c];
        }

        double det = 0.0;
        if (sig.affine_geometry) {
            const IndexMap& m = p.connectivity.coord_map;
            for (int j = 0; j < m.entries; ++j)
                for (int c = 0; c < dim; ++c)
                    cell_coords[static_cast<std::size_t>(j) * dim + c] =
                        p.connectivity.coords[static_cast<std::size_t>(m(cell, j)) * dim + c];
            affine_jacobian(cell_coords.data(), dim, jac.data(), &det);
            if (!std::isfinite(det)) fail(cell, "jacobian");
        }

        std::fill(cell_out.begin(), cell_out.end(), 0.0);

        for (int iq = 0; iq < sig.quad_points; ++iq) {
            // evaluation
            for (int i = 0; i < n_scalar; ++i) {
                const int off = sig.scalar_term_offset(i);
                const auto& space = sig.scalar_spaces[i];
                for (int k = 0; k < space.deriv_terms; ++k) {
                    const Matrix& phi = p.tabulations.scalar_phi[i][k];
                    double acc = 0.0;
                    for (int j = 0; j < space.dofs; ++j) acc += phi(iq, j) * local_scalar[i][j];
                    scalar_derivs[off + k] = acc;
                    if (counters) {
                        counters->matvec_mults += space.dofs;
                        counters->matvec_adds += space.dofs;
                    }
                }
            }
            for (int i = 0; i < n_vector; ++i) {
                const int off = sig.vector_term_offset(i);
                const auto& space = sig.vector_spaces[i];
                for (int k = 0; k < space.deriv_terms; ++k) {
                    const Matrix& phi = p.tabulations.vector_phi[i][k];
                    const int comp = space.components[k];
                    double acc = 0.0;
                    for (int j = 0; j < space.dofs; ++j)
                        acc += phi(iq, j) * local_vector[i][static_cast<std::size_t>(j) * dim + comp];
                    vector_derivs[off + k] = acc;
                    if (counters) {
                        counters->matvec_mults += space.dofs;
                        counters->matvec_adds += space.dofs;
                    }
                }
            }
            for (double v : scalar_derivs)
                if (!std::isfinite(v)) fail(cell, "evaluation");
            for (double v : vector_derivs)
                if (!std::isfinite(v)) fail(cell, "evaluation");

            // pointwise map
            EvalInputs in;
            in.scalar_derivs = scalar_derivs.data();
            in.vector_derivs = vector_derivs.data();
            in.jacobian = sig.affine_geometry ? jac.data() : nullptr;
            in.determinant = det;
            in.weight = p.tabulations.weights[iq];
            in.cell_coords = sig.affine_geometry ? cell_coords.data() : nullptr;
            in.dim = dim;
            for (int k = 0; k < sig.test_deriv_terms; ++k) {
                e_values[k] = p.map.eval(k, sig, in, counters ? &counters->map_ops : nullptr);
                if (!std::isfinite(e_values[k])) fail(cell, "pointwise map");
            }

            // quadrature
            for (int jw = 0; jw < sig.test_dofs; ++jw) {
                double acc = cell_out[jw];
                for (int k = 0; k < sig.test_deriv_terms; ++k)
                    acc += p.tabulations.psi[k](jw, iq) * e_values[k];
                cell_out[jw] = acc;
            }
            if (counters) {
                counters->matvec_mults += static_cast<long long>(sig.test_dofs) * sig.test_deriv_terms;
                counters->matvec_adds += static_cast<long long>(sig.test_dofs) * sig.test_deriv_terms;
            }
        }
        for (double v : cell_out)
            if (!std::isfinite(v)) fail(cell, "quadrature");

        // scatter
        for (int jw = 0; jw < sig.test_dofs; ++jw)
            out[p.connectivity.test_map(cell, jw)] += cell_out[jw];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Operator presets
// ---------------------------------------------------------------------------

enum class Operator { mass, laplace, helmholtz, elasticity, hyperelasticity };

inline const char* operator_name(Operator op) {
    switch (op) {
        case Operator::mass: return "mass";
        case Operator::laplace: return "laplace";
        case Operator::helmholtz: return "helmholtz";
        case Operator::elasticity: return "elasticity";
        case Operator::hyperelasticity: return "hyperelasticity";
    }
    return "?";
}

inline Operator operator_from_name(const std::string& name) {
    if (name == "mass") return Operator::mass;
    if (name == "laplace" || name == "poisson") return Operator::laplace;
    if (name == "helmholtz") return Operator::helmholtz;
    if (name == "elasticity") return Operator::elasticity;
    if (name == "hyperelasticity") return Operator::hyperelasticity;
    throw std::invalid_argument("unknown operator preset: " + name);
}

/// Signature preset for a named operator on P_degree simplex elements.
/// Quadrature point counts are always caller-supplied.
inline FormSignature preset_signature(Operator op, int dim, int degree, int quad_points) {
    const bool vector_valued = (op == Operator::elasticity || op == Operator::hyperelasticity);
    if (dim < 1 || dim > 3 || (vector_valued && dim < 2))
        throw std::invalid_argument("preset_signature: unsupported operator/dimension combination");
    if (degree < 1) throw std::invalid_argument("preset_signature: degree >= 1 required");
    if (quad_points < 1) throw std::invalid_argument("preset_signature: quad_points >= 1 required");

    const int n = simplex_space_dim(degree, dim);
    FormSignature sig;
    sig.dim = dim;
    sig.quad_points = quad_points;
    sig.coord_dofs = dim + 1;
    sig.affine_geometry = true;
    sig.word_bytes = 8;

    switch (op) {
        case Operator::mass:
            sig.scalar_spaces = {{n, 1}};
            sig.test_dofs = n;
            sig.test_deriv_terms = 1;
            break;
        case Operator::laplace:
            sig.scalar_spaces = {{n, dim}};
            sig.test_dofs = n;
            sig.test_deriv_terms = dim;
            break;
        case Operator::helmholtz:
            sig.scalar_spaces = {{n, dim + 1}};
            sig.test_dofs = n;
            sig.test_deriv_terms = dim + 1;
            break;
        case Operator::elasticity:
        case Operator::hyperelasticity: {
            VectorSpace v;
            v.dofs = n;
            v.deriv_terms = dim * dim;
            for (int a = 0; a < dim; ++a)
                for (int c = 0; c < dim; ++c) v.components.push_back(a);
            sig.vector_spaces = {v};
            sig.test_dofs = n * dim;
            sig.test_deriv_terms = dim * dim;
            break;
        }
    }
    sig.validate();
    return sig;
}

/// Pointwise maps matching preset_signature. Scalar operators contract the
/// reference-gradient terms with J^T J; vector operators use symmetrized
/// gradient combinations. Quadrature weight and determinant are folded in.
inline PointwiseMap preset_map(Operator op, const FormSignature& sig) {
    PointwiseMap m;
    const int d = sig.dim;
    const int wd = m.mul(m.weight(), m.determinant());

    auto metric_entry = [&](int r, int c) {  // (J^T J)[r][c]
        std::vector<int> terms;
        for (int k = 0; k < d; ++k) terms.push_back(m.mul(m.jacobian(k, r), m.jacobian(k, c)));
        return m.sum(terms);
    };

    switch (op) {
        case Operator::mass:
            m.add_output(m.mul(wd, m.scalar_deriv(0, 0)));
            break;
        case Operator::laplace:
            for (int r = 0; r < d; ++r) {
                std::vector<int> terms;
                for (int c = 0; c < d; ++c)
                    terms.push_back(m.mul(metric_entry(r, c), m.scalar_deriv(0, c)));
                m.add_output(m.mul(wd, m.sum(terms)));
            }
            break;
        case Operator::helmholtz:
            for (int r = 0; r < d; ++r) {
                std::vector<int> terms;
                for (int c = 0; c < d; ++c)
                    terms.push_back(m.mul(metric_entry(r, c), m.scalar_deriv(0, c)));
                m.add_output(m.mul(wd, m.sum(terms)));
            }
            m.add_output(m.mul(wd, m.scalar_deriv(0, d)));
            break;
        case Operator::elasticity:
            for (int a = 0; a < d; ++a)
                for (int c = 0; c < d; ++c) {
                    const int sym =
                        m.add(m.vector_deriv(0, a * d + c), m.vector_deriv(0, c * d + a));
                    m.add_output(m.mul(wd, m.mul(m.constant(0.5), sym)));
                }
            break;
        case Operator::hyperelasticity: {
            const double lambda = 1.25, mu = 0.75;
            std::vector<int> diag;
            for (int k = 0; k < d; ++k) diag.push_back(m.vector_deriv(0, k * d + k));
            const int trace = m.sum(diag);
            for (int a = 0; a < d; ++a)
                for (int c = 0; c < d; ++c) {
                    const int sym =
                        m.add(m.vector_deriv(0, a * d + c), m.vector_deriv(0, c * d + a));
                    int term = m.mul(m.constant(mu), sym);
                    if (a == c) term = m.add(term, m.mul(m.constant(lambda), trace));
                    m.add_output(m.mul(wd, term));
                }
            break;
        }
    }
    m.validate(sig);
    return m;
}

// ---------------------------------------------------------------------------
// Deterministic synthesis
// ---------------------------------------------------------------------------

// splitmix64: portable across platforms, unlike <random> distributions.
class SynthRng {
public:
    explicit SynthRng(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    // uniform in [lo, lo+span)
    double uniform(double lo, double span) {
        return lo + span * static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

private:
    std::uint64_t state_;
};

// Chain connectivity: cell k shares its trailing ceil(n/4) entries with cell
// k+1, which guarantees a non-injective map for two or more cells.
inline IndexMap chain_index_map(int cells, int entries) {
    const int overlap = static_cast<int>(ceil_div(entries, 4));
    const int stride = entries - overlap;
    IndexMap m(cells, entries, (cells - 1) * stride + entries);
    for (int cell = 0; cell < cells; ++cell)
        for (int j = 0; j < entries; ++j) m(cell, j) = cell * stride + j;
    return m;
}

/// Deterministic pseudo-random instance for a signature with a caller-chosen
/// pointwise map. All generated data is strictly positive and per-cell
/// jacobians are kept near identity, so scheduled re-associations stay within
/// tight relative error of the reference result.
inline ProblemInstance make_problem(const FormSignature& sig, PointwiseMap map, int n_cells,
                                    std::uint64_t seed) {
    sig.validate();
    if (n_cells < 1) throw std::invalid_argument("make_problem: n_cells >= 1 required");
    SynthRng rng(seed * 0x100000001b3ULL + 0xcbf29ce484222325ULL);

    ProblemInstance p;
    p.signature = sig;
    p.map = std::move(map);

    auto fill_matrix = [&](Matrix& m) {
        for (double& v : m.data) v = rng.uniform(0.1, 1.0);
    };

    p.tabulations.scalar_phi.resize(sig.scalar_spaces.size());
    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        for (int k = 0; k < sig.scalar_spaces[i].deriv_terms; ++k) {
            Matrix m(sig.quad_points, sig.scalar_spaces[i].dofs);
            fill_matrix(m);
            p.tabulations.scalar_phi[i].push_back(std::move(m));
        }
    }
    p.tabulations.vector_phi.resize(sig.vector_spaces.size());
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        for (int k = 0; k < sig.vector_spaces[i].deriv_terms; ++k) {
            Matrix m(sig.quad_points, sig.vector_spaces[i].dofs);
            fill_matrix(m);
            p.tabulations.vector_phi[i].push_back(std::move(m));
        }
    }
    for (int k = 0; k < sig.test_deriv_terms; ++k) {
        Matrix m(sig.test_dofs, sig.quad_points);
        fill_matrix(m);
        p.tabulations.psi.push_back(std::move(m));
    }
    p.tabulations.weights.resize(sig.quad_points);
    for (double& w : p.tabulations.weights) w = rng.uniform(0.5, 0.5);

    auto& conn = p.connectivity;
    conn.cell_count = n_cells;
    for (const auto& s : sig.scalar_spaces) conn.scalar_maps.push_back(chain_index_map(n_cells, s.dofs));
    for (const auto& v : sig.vector_spaces) conn.vector_maps.push_back(chain_index_map(n_cells, v.dofs));
    conn.test_map = chain_index_map(n_cells, sig.test_dofs);

    if (sig.affine_geometry) {
        // Injective vertex map; vertex c+1 = vertex 0 + e_c + jitter keeps the
        // jacobian diagonally dominant and its determinant positive.
        conn.coord_map = IndexMap(n_cells, sig.coord_dofs, n_cells * sig.coord_dofs);
        for (int cell = 0; cell < n_cells; ++cell)
            for (int j = 0; j < sig.coord_dofs; ++j) conn.coord_map(cell, j) = cell * sig.coord_dofs + j;
        conn.coord_global_count = n_cells * sig.coord_dofs;
        conn.coords.resize(static_cast<std::size_t>(conn.coord_global_count) * sig.dim);
        for (int cell = 0; cell < n_cells; ++cell) {
            double base[3] = {0, 0, 0};
            for (int c = 0; c < sig.dim; ++c) base[c] = rng.uniform(0.0, 1.0);
            for (int j = 0; j < sig.coord_dofs; ++j)
                for (int c = 0; c < sig.dim; ++c) {
                    double v = base[c];
                    if (j > 0) v += rng.uniform(0.0, 0.2);
                    if (j > 0 && c == j - 1) v += 1.0;
                    conn.coords[(static_cast<std::size_t>(cell) * sig.coord_dofs + j) * sig.dim + c] = v;
                }
        }
    }

    for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i) {
        std::vector<double> data(conn.scalar_maps[i].global_count);
        for (double& v : data) v = rng.uniform(0.25, 1.0);
        p.scalar_inputs.push_back(std::move(data));
    }
    for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i) {
        std::vector<double> data(static_cast<std::size_t>(conn.vector_maps[i].global_count) * sig.dim);
        for (double& v : data) v = rng.uniform(0.25, 1.0);
        p.vector_inputs.push_back(std::move(data));
    }
    p.output_size = conn.test_map.global_count;
    p.validate();
    return p;
}

/// Generic positive-coefficient map used when no operator preset applies:
/// e_k = weight * [det *] sum over every declared derivative variable with a
/// small deterministic coefficient pattern.
inline PointwiseMap generic_map(const FormSignature& sig) {
    PointwiseMap m;
    int scale = m.weight();
    if (sig.affine_geometry) scale = m.mul(scale, m.determinant());
    for (int k = 0; k < sig.test_deriv_terms; ++k) {
        std::vector<int> terms;
        int v = 0;
        for (std::size_t i = 0; i < sig.scalar_spaces.size(); ++i)
            for (int t = 0; t < sig.scalar_spaces[i].deriv_terms; ++t, ++v)
                terms.push_back(m.mul(m.constant(1.0 + ((k * 7 + v * 3) % 5) * 0.25),
                                      m.scalar_deriv(static_cast<int>(i), t)));
        for (std::size_t i = 0; i < sig.vector_spaces.size(); ++i)
            for (int t = 0; t < sig.vector_spaces[i].deriv_terms; ++t, ++v)
                terms.push_back(m.mul(m.constant(1.0 + ((k * 7 + v * 3) % 5) * 0.25),
                                      m.vector_deriv(static_cast<int>(i), t)));
        m.add_output(m.mul(scale, m.sum(terms)));
    }
    m.validate(sig);
    return m;
}

/// make_problem with the generic map.
inline ProblemInstance synthesize_problem(const FormSignature& sig, int n_cells, std::uint64_t seed) {
    return make_problem(sig, generic_map(sig), n_cells, seed);
}

}  // namespace femsched
