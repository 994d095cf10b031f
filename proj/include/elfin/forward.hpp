#pragma once

#include <vector>

#include "elfin/elasticity.hpp"
#include "elfin/mesh.hpp"
#include "elfin/types.hpp"

namespace elfin {

struct SolverConfig {
    double residual_tol = -1.0;     // force units; must be set > 0 before solving
    int max_newton_iters = 100;
    double inversion_threshold = 0.2;
};

// One accepted backtracking step. Sufficient-decrease holds by construction:
//   f_after <= f_before + wolfe_gamma * step * directional
struct LineSearchRecord {
    double step;
    double f_before;
    double f_after;
    double directional;  // d(objective)/d(step) at step 0, negative for descent
};

struct EquilibriumState {
    VecX positions;
    double residual_norm = 0.0;
    int iterations = 0;
    double tikhonov_shift = 0.0;    // largest diagonal regularization applied
    bool converged = false;
    std::vector<double> objective_history;   // total potential per iteration
    std::vector<LineSearchRecord> line_searches;
};

// Lumped gravity load: each element sends rho * V_rest * g / 4 to its corners.
VecX gravity_force(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                   const Vec3& gravity, double density);

// Residual tolerance scaled to the problem: 1e-8 * n * |g| * rho * mean rest
// element volume. A zero gravity vector falls back to standard 9.81.
double default_residual_tol(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                            const Vec3& gravity, double density);

// Smallest root of c0 + c1 t + c2 t^2 + c3 t^3 in (0, inf), or +inf if none.
double smallest_positive_cubic_root(double c0, double c1, double c2, double c3);

// Largest step beta <= beta_init such that every element of x + beta * dx keeps
// at least epsilon of its rest volume, scaled back by the safety factor.
double max_noninversion_step(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                             const VecX& x, const VecX& dx, double beta_init,
                             double epsilon = 0.01, double safety = 0.9);

// Index map between full 3n coordinates and the free (non-fixed) subset.
struct FreeDofMap {
    std::vector<int> free_of_dof;  // -1 for coordinates of fixed vertices
    int num_free = 0;
};
FreeDofMap build_free_map(const TetMesh& mesh);
SpMat reduce_to_free(const SpMat& K, const FreeDofMap& map);
VecX gather_free(const VecX& full, const FreeDofMap& map);
VecX scatter_free(const VecX& reduced, const FreeDofMap& map);  // zeros at fixed

// Minimizes W(x) - f_ext . x over the free vertices with projected-Hessian
// Newton, keeping fixed vertices pinned to their rest positions throughout.
// Steps are capped by max_noninversion_step, so no iterate ever inverts an
// element. Throws on invalid configuration; a non-converged result is
// reported through the returned state, not an exception.
EquilibriumState solve_quasistatic(const TetMesh& mesh,
                                   const std::vector<ElementReference>& refs,
                                   const VecX& rest, const MaterialModel& material,
                                   const VecX& f_ext, const VecX& x_init,
                                   const SolverConfig& config);

// Convenience form: rest shape taken from mesh.nodes, lumped gravity load,
// residual_tol filled in from default_residual_tol when unset.
EquilibriumState solve_quasistatic(const TetMesh& mesh, const MaterialModel& material,
                                   const Vec3& gravity, double density,
                                   const VecX& x_init, SolverConfig config);

} // namespace elfin
