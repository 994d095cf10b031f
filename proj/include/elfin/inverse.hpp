#pragma once

#include <string>
#include <vector>

#include "elfin/mesh.hpp"
#include "elfin/sensitivity.hpp"
#include "elfin/types.hpp"

namespace elfin {

struct InverseConfig {
    double alpha = -1.0;   // < 0: calibrate as 1e-3 / W(X0, observed_neutral, P0)
    double p_lower = 1e3;  // Pa
    double p_upper = 1e6;  // Pa
    double e_init = 1e6;   // Pa
    double wolfe_gamma = 1e-4;
    int material_max_iters = 50;
    int restshape_max_iters = 30;
    int bcd_max_outer = 10;
    double bcd_rel_tol = 1e-4;
    double grad_tol_material = 1e-12;  // inf-norm of projected log10-space gradient
    double grad_tol_rest = 1e-12;      // 2-norm of the rest-shape gradient

    void validate() const;  // throws std::invalid_argument on violated invariants
};

// One row per accepted iterate (iter 0 is the phase entry). `objective` is the
// value the line search certified, so the sufficient-decrease inequality can
// be re-checked from consecutive rows: for rest rows,
//   row[k].objective <= row[k-1].objective
//                       - wolfe_gamma * row[k].step * row[k-1].grad_norm^2.
struct HistoryRow {
    std::string phase;
    int iter = 0;
    double objective = 0.0;
    double data_term = 0.0;
    double reg_term = 0.0;
    double grad_norm = 0.0;
    double step = 0.0;
    VecX cluster_E;
};

struct InversionResult {
    VecX rest_shape;
    VecX cluster_E;
    std::vector<HistoryRow> history;
    bool converged = false;
    std::string reason;
    double alpha_used = 0.0;
    std::vector<VecX> rest_iterates;  // every accepted rest shape, in order
};

// Rest-shape seed: equilibrium of the observed neutral shape under the
// opposite of the neutral gravity. Also serves as the regularizer reference.
VecX initial_rest_guess(const TetMesh& mesh, const VecX& observed_neutral,
                        const MaterialModel& material0, const Vec3& g_neutral,
                        double density, SolverConfig config);

struct MaterialPhaseResult {
    VecX cluster_E;
    ObjectiveReport report;  // at the returned moduli
    bool hit_grad_tol = false;
    bool stalled = false;  // no step accepted before the line search collapsed
    int iterations = 0;    // accepted steps
};

// Bound-constrained minimization of the multi-pose objective over the cluster
// moduli: projected-gradient active set with a BFGS model, iterating in
// log10(E). Every evaluated iterate lies in [p_lower, p_upper] exactly.
// seed_report, when non-null, must be the objective report at cluster_E_init
// under the current warm-start state; it saves the entry evaluation.
// Forward-solve failures propagate as ForwardFailure.
MaterialPhaseResult optimize_materials(const TetMesh& mesh, const VecX& X,
                                       const std::vector<PoseObservation>& poses,
                                       const VecX& cluster_E_init,
                                       const ClusterMap& clusters, double poisson,
                                       const ObjectiveSetup& setup,
                                       const InverseConfig& cfg,
                                       const std::string& phase_label,
                                       std::vector<HistoryRow>* history,
                                       std::vector<VecX>* warm_starts,
                                       const ObjectiveReport* seed_report);

struct RestPhaseResult {
    VecX X;
    ObjectiveReport report;  // at the returned rest shape
    bool hit_grad_tol = false;
    bool stalled = false;
    int iterations = 0;
};

// Gradient descent X <- X - beta * dg/dX with the step capped by
// max_noninversion_step and backtracked under the sufficient-decrease rule.
// A forward failure during a trial step rejects the step and backtracks.
RestPhaseResult optimize_rest_shape(const TetMesh& mesh, const VecX& cluster_E,
                                    const ClusterMap& clusters, double poisson,
                                    const std::vector<PoseObservation>& poses,
                                    const VecX& X_init, const ObjectiveSetup& setup,
                                    const InverseConfig& cfg,
                                    const std::string& phase_label,
                                    std::vector<HistoryRow>* history,
                                    std::vector<VecX>* warm_starts,
                                    std::vector<VecX>* iterates,
                                    const ObjectiveReport* seed_report);

// Full pipeline: inverse-gravity rest guess, single-pose material warm start,
// then alternating material/rest phases on all poses until the outer relative
// decrease drops below bcd_rel_tol or the round cap. Forward failures abort
// cleanly: the partial history is kept and converged = false.
InversionResult block_coordinate_descent(const TetMesh& mesh,
                                         const std::vector<PoseObservation>& poses,
                                         const VecX& observed_neutral,
                                         const std::vector<int>& labels,
                                         int num_clusters, const InverseConfig& cfg,
                                         const SolverConfig& solver, double density,
                                         double poisson, int threads);

} // namespace elfin
