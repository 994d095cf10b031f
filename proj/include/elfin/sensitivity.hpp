#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "elfin/elasticity.hpp"
#include "elfin/forward.hpp"
#include "elfin/mesh.hpp"
#include "elfin/types.hpp"

namespace elfin {

// Raised when a pose's equilibrium solve does not converge; carries the pose
// index so callers can report or retry per pose.
struct ForwardFailure : std::runtime_error {
    int pose;
    ForwardFailure(int pose_index, const std::string& what)
        : std::runtime_error(what), pose(pose_index) {}
};

// Everything the multi-pose objective needs besides (X, materials, poses).
// X0/material0 define the rest-shape regularizer R(X) = W(X0, X, material0).
struct ObjectiveSetup {
    double alpha = 0.0;
    VecX X0;
    MaterialModel material0;
    double density = 1000.0;
    SolverConfig solver;
    int threads = 1;
};

struct ObjectiveReport {
    double value = 0.0;      // data_term + alpha * reg_term, exactly
    double data_term = 0.0;  // sum over poses of 0.5 |S x - targets|^2
    double reg_term = 0.0;   // W(X0, X, material0)
    VecX grad_clusters;
    VecX grad_rest;          // zero at fixed vertices
    std::vector<double> per_pose_rms;
    std::vector<EquilibriumState> equilibria;  // per pose, in pose order
};

// Solves (d2W/dx2) lambda = S^T (S x - targets) on the free DOF with the
// unprojected Hessian at equilibrium; lambda = 0 at fixed vertices. A
// power-of-ten Tikhonov shift is escalated on factorization failure and
// reported through shift_out when non-null.
VecX adjoint_solve(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                   const EquilibriumState& eq, const MaterialModel& material,
                   const PoseObservation& pose, double inversion_threshold,
                   double* shift_out = nullptr);

// d(data term)/dE per cluster. Per element, the energy is linear in the
// element's Young's modulus, so dW/dE_e is the element force at unit Young;
// dg/dE_e = -lambda_e . f_unit_e, aggregated through the cluster weights.
VecX gradient_wrt_clusters(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                           const VecX& lambda, const EquilibriumState& eq,
                           const MaterialModel& material, double inversion_threshold);

// alpha * dR/dX + lambda^T (df_ext/dX - d2W/dX dx), where X are the rest
// positions refs were built from. The mixed partial is contracted against
// lambda element by element and never materialized.
VecX gradient_wrt_rest(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                       const VecX& X, const VecX& lambda, const EquilibriumState& eq,
                       const MaterialModel& material, const PoseObservation& pose,
                       double density, double alpha, const VecX& X0,
                       const MaterialModel& material0, double inversion_threshold);

// Multi-pose objective. Poses are solved independently (optionally in
// parallel) and merged in pose order, so results do not depend on the thread
// count. warm_starts, when given, supplies per-pose initial guesses and is
// updated in place with the converged positions. Throws ForwardFailure when a
// pose fails to converge.
ObjectiveReport evaluate_objective(const TetMesh& mesh, const VecX& X,
                                   const MaterialModel& material,
                                   const std::vector<PoseObservation>& poses,
                                   const ObjectiveSetup& setup,
                                   std::vector<VecX>* warm_starts = nullptr,
                                   bool with_gradients = true);

} // namespace elfin
