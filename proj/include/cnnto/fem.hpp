#pragma once

// Plane-stress finite elements on a regular grid of unit square Q4 elements,
// with SIMP stiffness interpolation E(x) = x^p * E0.

#include "cnnto/error.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <sstream>
#include <vector>

namespace cnnto {

using Matrix8 = Eigen::Matrix<double, 8, 8>;
using Vector8 = Eigen::Matrix<double, 8, 1>;
using SparseMatrix = Eigen::SparseMatrix<double>;

/**
 * Regular grid of nelx x nely unit square elements.
 *
 * Numbering (fixed across the toolkit, BC files depend on it):
 *  - element (elx, ely) is column elx, row ely; row 0 is the top row.
 *    Its linear index is elx * nely + ely (column-major).
 *  - node (ix, iy), 0 <= ix <= nelx, 0 <= iy <= nely, has index
 *    ix * (nely + 1) + iy (column-major from the top-left corner).
 *  - node n owns DOFs 2n (horizontal, +right) and 2n+1 (vertical, +down).
 */
struct GridMesh {
    int nelx = 0;
    int nely = 0;

    GridMesh() = default;
    GridMesh(int nelx_, int nely_) : nelx(nelx_), nely(nely_) {
        require(nelx >= 1 && nely >= 1, "GridMesh: nelx and nely must be >= 1");
    }

    int element_count() const { return nelx * nely; }
    int node_count() const { return (nelx + 1) * (nely + 1); }
    int dof_count() const { return 2 * node_count(); }

    int node(int ix, int iy) const { return ix * (nely + 1) + iy; }
    int element(int elx, int ely) const { return elx * nely + ely; }

    /// DOFs of element (elx, ely) in local node order
    /// top-left, top-right, bottom-right, bottom-left.
    std::array<int, 8> element_dofs(int elx, int ely) const {
        const int tl = node(elx, ely);
        const int tr = node(elx + 1, ely);
        return {2 * tl,     2 * tl + 1, 2 * tr,     2 * tr + 1,
                2 * tr + 2, 2 * tr + 3, 2 * tl + 2, 2 * tl + 3};
    }

    bool operator==(const GridMesh&) const = default;
};

struct MaterialParams {
    double e0 = 1.0;
    double nu = 0.3;
    double penal = 3.0;
    double x_min = 1e-3;

    void validate() const {
        require(e0 > 0.0, "MaterialParams: e0 must be > 0");
        require(x_min > 0.0 && x_min < 1.0, "MaterialParams: x_min must be in (0, 1)");
        require(penal >= 1.0, "MaterialParams: penal must be >= 1");
        require(nu >= 0.0 && nu < 0.5, "MaterialParams: nu must be in [0, 0.5)");
    }
};

struct BoundaryConditions {
    std::vector<int> fixed_dofs;  // sorted, unique
    std::map<int, double> loads;  // DOF -> force

    void normalize() {
        std::sort(fixed_dofs.begin(), fixed_dofs.end());
        fixed_dofs.erase(std::unique(fixed_dofs.begin(), fixed_dofs.end()), fixed_dofs.end());
    }

    bool is_fixed(int dof) const {
        return std::binary_search(fixed_dofs.begin(), fixed_dofs.end(), dof);
    }

    void validate(const GridMesh& mesh) const {
        require(!fixed_dofs.empty(), "BoundaryConditions: fixed_dofs is empty");
        require(!loads.empty(), "BoundaryConditions: loads is empty");
        require(std::is_sorted(fixed_dofs.begin(), fixed_dofs.end()),
                "BoundaryConditions: fixed_dofs not normalized");
        for (int d : fixed_dofs)
            require(d >= 0 && d < mesh.dof_count(), "BoundaryConditions: fixed DOF out of range");
        for (const auto& [d, v] : loads) {
            require(d >= 0 && d < mesh.dof_count(), "BoundaryConditions: loaded DOF out of range");
            require(std::isfinite(v), "BoundaryConditions: non-finite load");
            require(!is_fixed(d), "BoundaryConditions: load applied on a fixed DOF");
        }
    }

    Eigen::VectorXd load_vector(int ndof) const {
        Eigen::VectorXd f = Eigen::VectorXd::Zero(ndof);
        for (const auto& [d, v] : loads) f[d] = v;
        return f;
    }

    bool operator==(const BoundaryConditions&) const = default;
};

/// Per-element densities, stored nely x nelx (row = ely, col = elx), so the
/// column-major storage index equals GridMesh::element().
struct DensityField {
    Eigen::MatrixXd values;
    bool binary = false;

    DensityField() = default;
    explicit DensityField(const GridMesh& mesh, double fill = 0.0, bool is_binary = false)
        : values(Eigen::MatrixXd::Constant(mesh.nely, mesh.nelx, fill)), binary(is_binary) {}
    DensityField(Eigen::MatrixXd v, bool is_binary) : values(std::move(v)), binary(is_binary) {}

    int nely() const { return static_cast<int>(values.rows()); }
    int nelx() const { return static_cast<int>(values.cols()); }
    int size() const { return static_cast<int>(values.size()); }
    GridMesh mesh() const { return GridMesh(nelx(), nely()); }
    bool matches(const GridMesh& mesh) const { return nelx() == mesh.nelx && nely() == mesh.nely; }

    double operator()(int ely, int elx) const { return values(ely, elx); }
    double& operator()(int ely, int elx) { return values(ely, elx); }
    double operator[](int element) const { return values.data()[element]; }
    double& operator[](int element) { return values.data()[element]; }

    double volume() const { return values.sum(); }

    bool is_exactly_binary() const {
        return std::all_of(values.data(), values.data() + values.size(),
                           [](double v) { return v == 0.0 || v == 1.0; });
    }

    bool operator==(const DensityField& o) const {
        return binary == o.binary && values.rows() == o.values.rows() &&
               values.cols() == o.values.cols() && values == o.values;
    }
};

struct DisplacementField {
    Eigen::VectorXd values;
};

struct SensitivityField {
    Eigen::MatrixXd values;  // same layout as DensityField

    int size() const { return static_cast<int>(values.size()); }
    double operator[](int element) const { return values.data()[element]; }
};

/// Unit-modulus stiffness of a unit square Q4 element in plane stress,
/// integrated with 2x2 Gauss points. Multiply by E to get the element matrix.
inline Matrix8 element_stiffness(const MaterialParams& material) {
    if (!(material.nu < 0.5)) throw InputError("element_stiffness: nu must be < 0.5");
    material.validate();
    const double nu = material.nu;
    Eigen::Matrix3d d;
    d << 1.0, nu, 0.0,
         nu, 1.0, 0.0,
         0.0, 0.0, (1.0 - nu) / 2.0;
    d /= (1.0 - nu * nu);

    // local nodes at (0,0), (1,0), (1,1), (0,1)
    constexpr std::array<double, 4> xi = {0.0, 1.0, 1.0, 0.0};
    constexpr std::array<double, 4> eta = {0.0, 0.0, 1.0, 1.0};
    const double g = 0.5 / std::sqrt(3.0);
    const std::array<double, 2> gp = {0.5 - g, 0.5 + g};

    Matrix8 k = Matrix8::Zero();
    for (double px : gp) {
        for (double py : gp) {
            Eigen::Matrix<double, 3, 8> b = Eigen::Matrix<double, 3, 8>::Zero();
            for (int a = 0; a < 4; ++a) {
                // N_a = (1 - |x - xi_a|)(1 - |y - eta_a|) on the unit square
                const double sx = xi[a] == 0.0 ? -1.0 : 1.0;
                const double sy = eta[a] == 0.0 ? -1.0 : 1.0;
                const double nx = xi[a] == 0.0 ? 1.0 - px : px;
                const double ny = eta[a] == 0.0 ? 1.0 - py : py;
                const double dndx = sx * ny;
                const double dndy = sy * nx;
                b(0, 2 * a) = dndx;
                b(1, 2 * a + 1) = dndy;
                b(2, 2 * a) = dndy;
                b(2, 2 * a + 1) = dndx;
            }
            k.noalias() += 0.25 * b.transpose() * d * b;
        }
    }
    Matrix8 sym = 0.5 * (k + k.transpose());
    return sym;
}

namespace detail {
inline void check_density(const DensityField& density, const GridMesh& mesh, const char* who) {
    if (!density.matches(mesh))
        throw InputError(std::string(who) + ": density shape does not match mesh");
}
}  // namespace detail

/// K = sum_e x_e^p e0 k0 scattered onto the global DOFs.
inline SparseMatrix assemble_stiffness(const DensityField& density, const GridMesh& mesh,
                                       const MaterialParams& material) {
    detail::check_density(density, mesh, "assemble_stiffness");
    const Matrix8 k0 = element_stiffness(material);
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(static_cast<std::size_t>(mesh.element_count()) * 64);
    for (int elx = 0; elx < mesh.nelx; ++elx) {
        for (int ely = 0; ely < mesh.nely; ++ely) {
            const double x = density(ely, elx);
            if (!std::isfinite(x) || x < 0.0)
                throw InputError("assemble_stiffness: density must be finite and >= 0");
            const double e = std::pow(x, material.penal) * material.e0;
            const auto dofs = mesh.element_dofs(elx, ely);
            for (int a = 0; a < 8; ++a)
                for (int b = 0; b < 8; ++b)
                    triplets.emplace_back(dofs[a], dofs[b], e * k0(a, b));
        }
    }
    SparseMatrix k(mesh.dof_count(), mesh.dof_count());
    k.setFromTriplets(triplets.begin(), triplets.end());
    return k;
}

/// Solves K u = f on the free DOFs with a sparse LDL^T factorization.
inline DisplacementField solve_displacement(const SparseMatrix& k, const BoundaryConditions& bc) {
    const int ndof = static_cast<int>(k.rows());
    if (k.rows() != k.cols()) throw InputError("solve_displacement: K is not square");
    for (int d : bc.fixed_dofs)
        if (d < 0 || d >= ndof) throw InputError("solve_displacement: fixed DOF out of range");
    for (const auto& [d, v] : bc.loads)
        if (d < 0 || d >= ndof) throw InputError("solve_displacement: loaded DOF out of range");

    std::vector<int> free_index(ndof, -1);
    std::vector<int> free_dofs;
    free_dofs.reserve(ndof);
    for (int d = 0; d < ndof; ++d) {
        if (!bc.is_fixed(d)) {
            free_index[d] = static_cast<int>(free_dofs.size());
            free_dofs.push_back(d);
        }
    }
    const int nfree = static_cast<int>(free_dofs.size());

    DisplacementField u{Eigen::VectorXd::Zero(ndof)};
    if (nfree == 0) return u;

    Eigen::VectorXd f(nfree);
    for (int i = 0; i < nfree; ++i) {
        auto it = bc.loads.find(free_dofs[i]);
        f[i] = it == bc.loads.end() ? 0.0 : it->second;
    }
    const double fnorm = f.norm();
    if (fnorm == 0.0) return u;

    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(k.nonZeros());
    for (int col = 0; col < k.outerSize(); ++col) {
        const int jc = free_index[col];
        if (jc < 0) continue;
        for (SparseMatrix::InnerIterator it(k, col); it; ++it) {
            const int ir = free_index[it.row()];
            if (ir >= 0) triplets.emplace_back(ir, jc, it.value());
        }
    }
    SparseMatrix kff(nfree, nfree);
    kff.setFromTriplets(triplets.begin(), triplets.end());

    Eigen::SimplicialLDLT<SparseMatrix> ldlt;
    ldlt.compute(kff);
    if (ldlt.info() != Eigen::Success)
        throw SingularSystemError("solve_displacement: factorization failed (singular reduced system)");
    const Eigen::VectorXd diag = ldlt.vectorD();
    const double dmax = diag.cwiseAbs().maxCoeff();
    // K_ff is SPD when the structure is properly supported.
    if (!(dmax > 0.0) || diag.minCoeff() <= 1e-13 * dmax)
        throw SingularSystemError("solve_displacement: reduced stiffness matrix is singular "
                                  "(insufficient constraints)");

    Eigen::VectorXd uf = ldlt.solve(f);
    Eigen::VectorXd r = f - kff * uf;
    double res = r.norm() / fnorm;
    // stiffness contrast up to 1/x_min^p; a few refinement steps recover the residual
    for (int step = 0; step < 5 && std::isfinite(res) && res > 1e-10; ++step) {
        const Eigen::VectorXd next = uf + ldlt.solve(r);
        const Eigen::VectorXd rn = f - kff * next;
        if (!(rn.norm() < r.norm())) break;
        uf = next;
        r = rn;
        res = r.norm() / fnorm;
    }
    // Past cond(K) ~ 1e8 no double-precision u has residual <= 1e-8 * |f|. Such a
    // solve is still accepted when its normwise backward error is at roundoff level.
    double kinf = 0.0;
    {
        Eigen::VectorXd rows = Eigen::VectorXd::Zero(nfree);
        for (int col = 0; col < kff.outerSize(); ++col)
            for (SparseMatrix::InnerIterator it(kff, col); it; ++it) rows[it.row()] += std::abs(it.value());
        kinf = rows.maxCoeff();
    }
    const double backward = r.lpNorm<Eigen::Infinity>() /
                            (kinf * uf.lpNorm<Eigen::Infinity>() + f.lpNorm<Eigen::Infinity>());
    if (!std::isfinite(res) || (res > 1e-8 && !(backward <= 1e-12))) {
        std::ostringstream msg;
        msg << "solve_displacement: relative residual " << res << " exceeds 1e-8 (backward error " << backward << ")";
        throw SolverError(msg.str());
    }
    for (int i = 0; i < nfree; ++i) u.values[free_dofs[i]] = uf[i];
    return u;
}

/// c = f^T u, summed over the loaded DOFs.
inline double compliance(const DisplacementField& u, const BoundaryConditions& bc) {
    double c = 0.0;
    for (const auto& [d, v] : bc.loads) {
        if (d < 0 || d >= u.values.size()) throw InputError("compliance: loaded DOF out of range");
        c += v * u.values[d];
    }
    return c;
}

/// dc/dx_e = -p x_e^(p-1) e0 u_e^T k0 u_e.
inline SensitivityField compliance_sensitivity(const DensityField& density, const DisplacementField& u,
                                               const GridMesh& mesh, const MaterialParams& material) {
    detail::check_density(density, mesh, "compliance_sensitivity");
    if (u.values.size() != mesh.dof_count())
        throw InputError("compliance_sensitivity: displacement size does not match mesh");
    const Matrix8 k0 = element_stiffness(material);
    SensitivityField s{Eigen::MatrixXd::Zero(mesh.nely, mesh.nelx)};
    for (int elx = 0; elx < mesh.nelx; ++elx) {
        for (int ely = 0; ely < mesh.nely; ++ely) {
            const auto dofs = mesh.element_dofs(elx, ely);
            Vector8 ue;
            for (int a = 0; a < 8; ++a) ue[a] = u.values[dofs[a]];
            // k0 is PSD; near-rigid motion of soft elements can round slightly below 0
            const double energy = std::max(0.0, ue.dot(k0 * ue));
            const double x = density(ely, elx);
            s.values(ely, elx) = -material.penal * std::pow(x, material.penal - 1.0) * material.e0 * energy;
        }
    }
    return s;
}

/// A mesh, a material and one load case.
struct FemProblem {
    GridMesh mesh;
    MaterialParams material;
    BoundaryConditions bc;

    struct Analysis {
        DisplacementField u;
        double compliance = 0.0;
        SensitivityField sensitivity;
    };

    void validate() const {
        material.validate();
        bc.validate(mesh);
    }

    DisplacementField solve(const DensityField& density) const {
        return solve_displacement(assemble_stiffness(density, mesh, material), bc);
    }

    double compliance_of(const DensityField& density) const {
        return compliance(solve(density), bc);
    }

    Analysis analyze(const DensityField& density) const {
        Analysis a;
        a.u = solve(density);
        a.compliance = compliance(a.u, bc);
        a.sensitivity = compliance_sensitivity(density, a.u, mesh, material);
        return a;
    }

    /// Copy of a (possibly binary) field with every entry raised to x_min,
    /// i.e. the field the FEM actually sees.
    DensityField lifted(const DensityField& density) const {
        DensityField d(density.values.cwiseMax(material.x_min), false);
        return d;
    }
};

inline constexpr const char* kCantileverPreset = "cantilever-left-clamp-tip-load";

/// Left edge fully clamped, unit downward point load at the bottom-right node.
inline BoundaryConditions cantilever_left_clamp_tip_load(const GridMesh& mesh, double load = 1.0) {
    BoundaryConditions bc;
    for (int iy = 0; iy <= mesh.nely; ++iy) {
        bc.fixed_dofs.push_back(2 * mesh.node(0, iy));
        bc.fixed_dofs.push_back(2 * mesh.node(0, iy) + 1);
    }
    bc.normalize();
    bc.loads[2 * mesh.node(mesh.nelx, mesh.nely) + 1] = load;
    return bc;
}

inline BoundaryConditions bc_preset(const std::string& name, const GridMesh& mesh) {
    if (name == kCantileverPreset) return cantilever_left_clamp_tip_load(mesh);
    throw InputError("unknown boundary-condition preset '" + name + "'");
}

/// Linear indices of elements that own at least one node carrying one of the
/// given DOFs, ascending.
inline std::vector<int> elements_touching_dofs(const GridMesh& mesh, const std::vector<int>& dofs) {
    std::vector<bool> node_hit(mesh.node_count(), false);
    for (int d : dofs)
        if (d >= 0 && d < mesh.dof_count()) node_hit[d / 2] = true;
    std::vector<int> out;
    for (int elx = 0; elx < mesh.nelx; ++elx) {
        for (int ely = 0; ely < mesh.nely; ++ely) {
            const int nodes[4] = {mesh.node(elx, ely), mesh.node(elx + 1, ely),
                                  mesh.node(elx + 1, ely + 1), mesh.node(elx, ely + 1)};
            if (std::any_of(std::begin(nodes), std::end(nodes), [&](int n) { return node_hit[n]; }))
                out.push_back(mesh.element(elx, ely));
        }
    }
    return out;
}

inline std::vector<int> support_elements(const GridMesh& mesh, const BoundaryConditions& bc) {
    return elements_touching_dofs(mesh, bc.fixed_dofs);
}

inline std::vector<int> load_elements(const GridMesh& mesh, const BoundaryConditions& bc) {
    std::vector<int> dofs;
    for (const auto& [d, v] : bc.loads) dofs.push_back(d);
    return elements_touching_dofs(mesh, dofs);
}

/// Support and load elements merged; these anchor the post-filters.
inline std::vector<int> anchor_elements(const GridMesh& mesh, const BoundaryConditions& bc) {
    auto a = support_elements(mesh, bc);
    auto b = load_elements(mesh, bc);
    a.insert(a.end(), b.begin(), b.end());
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    return a;
}

} // namespace cnnto
