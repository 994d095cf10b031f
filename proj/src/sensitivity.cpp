#include "elfin/sensitivity.hpp"

#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <thread>

namespace elfin {

namespace {

// Shifted LDLT with power-of-ten escalation; records the shift that succeeded.
VecX solve_spd_with_escalation(const SpMat& A, const VecX& b, double* shift_out,
                               const char* context) {
    const double diag_scale = std::max(A.diagonal().cwiseAbs().mean(), 1e-300);
    double shift = 0.0;
    for (int attempt = 0; attempt < 16; ++attempt) {
        SpMat As = A;
        if (shift > 0.0) {
            SpMat I(A.rows(), A.cols());
            I.setIdentity();
            As = A + shift * I;
        }
        Eigen::SimplicialLDLT<SpMat> solver(As);
        if (solver.info() == Eigen::Success) {
            VecX x = solver.solve(b);
            if (x.allFinite()) {
                if (shift_out) *shift_out = shift;
                return x;
            }
        }
        shift = (shift == 0.0) ? 1e-10 * diag_scale : shift * 10.0;
    }
    throw std::runtime_error(std::string(context) +
                             ": factorization failed even after Tikhonov escalation");
}

double frobenius_dot(const Mat3& A, const Mat3& B) { return (A.array() * B.array()).sum(); }

} // namespace

VecX adjoint_solve(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                   const EquilibriumState& eq, const MaterialModel& material,
                   const PoseObservation& pose, double inversion_threshold,
                   double* shift_out) {
    const int dof = 3 * mesh.num_nodes();
    VecX rhs = VecX::Zero(dof);
    for (size_t i = 0; i < pose.observed_ids.size(); ++i) {
        const int v = pose.observed_ids[i];
        rhs.segment<3>(3 * v) += eq.positions.segment<3>(3 * v) - pose.targets[i];
    }

    const FreeDofMap map = build_free_map(mesh);
    if (map.num_free == 0) return VecX::Zero(dof);

    const SpMat K = total_hessian(mesh, refs, eq.positions, material, inversion_threshold,
                                  /*project_spd=*/false);
    const SpMat Kff = reduce_to_free(K, map);
    const VecX lf =
        solve_spd_with_escalation(Kff, gather_free(rhs, map), shift_out, "adjoint_solve");
    return scatter_free(lf, map);
}

VecX gradient_wrt_clusters(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                           const VecX& lambda, const EquilibriumState& eq,
                           const MaterialModel& material, double inversion_threshold) {
    const auto [mu1, lambda1] = lame_from_young_poisson(1.0, material.poisson);
    VecX out = VecX::Zero(material.clusters.num_clusters);
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const Mat3 F = deformation_gradient(mesh, refs, eq.positions, e);
        const Vec12 unit_force =
            element_energy_gradient(F, refs[e], mu1, lambda1, inversion_threshold);
        const auto& t = mesh.tets[e];
        double dg_dE = 0.0;
        for (int j = 0; j < 4; ++j)
            dg_dE -= lambda.segment<3>(3 * t[j]).dot(unit_force.segment<3>(3 * j));
        for (const auto& [c, w] : material.clusters.weights[e]) out[c] += w * dg_dE;
    }
    return out;
}

VecX gradient_wrt_rest(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                       const VecX& X, const VecX& lambda, const EquilibriumState& eq,
                       const MaterialModel& material, const PoseObservation& pose,
                       double density, double alpha, const VecX& X0,
                       const MaterialModel& material0, double inversion_threshold) {
    VecX out = VecX::Zero(X.size());

    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto& t = mesh.tets[e];
        const auto [mu, lam] =
            lame_from_young_poisson(material.element_young(e), material.poisson);
        const Mat3& Dm = refs[e].rest_shape;
        const Mat3& Dmi = refs[e].inv_rest_shape;
        const double V = refs[e].rest_volume;

        const Vec3 p0 = node_of(eq.positions, t[0]);
        Mat3 Ds;
        Ds.col(0) = node_of(eq.positions, t[1]) - p0;
        Ds.col(1) = node_of(eq.positions, t[2]) - p0;
        Ds.col(2) = node_of(eq.positions, t[3]) - p0;

        const Mat3 F = Mat3::Identity() + (Ds - Dm) * Dmi;
        const auto cg = clamp_deformation_gradient(F, inversion_threshold);
        const Mat3 P = piola_stress(cg.F_hat, mu, lam);

        Mat3 L;  // adjoint edge differences, mirrors the shape-matrix layout
        const Vec3 l0 = lambda.segment<3>(3 * t[0]);
        L.col(0) = lambda.segment<3>(3 * t[1]) - l0;
        L.col(1) = lambda.segment<3>(3 * t[2]) - l0;
        L.col(2) = lambda.segment<3>(3 * t[3]) - l0;
        const Mat3 LDmi = L * Dmi;
        const double P_dot_LDmi = frobenius_dot(P, LDmi);

        Vec3 lambda_sum = lambda.segment<3>(3 * t[0]);
        for (int j = 1; j < 4; ++j) lambda_sum += lambda.segment<3>(3 * t[j]);
        const double grav_factor = 0.25 * density * pose.gravity.dot(lambda_sum);

        for (int a = 0; a < 4; ++a) {
            for (int d = 0; d < 3; ++d) {
                Mat3 dDm = Mat3::Zero();
                if (a == 0) {
                    dDm.row(d) = -Eigen::RowVector3d::Ones();
                } else {
                    dDm(d, a - 1) = 1.0;
                }
                const Mat3 M = Dmi * dDm;
                const double dV = V * M.trace();
                const Mat3 dDmi = -M * Dmi;
                const Mat3 dF = -dDm * Dmi + (Ds - Dm) * dDmi;
                const Mat3 dP = piola_differential(cg.F_hat, dF, mu, lam);
                // d/dX of lambda . (elastic force of element e)
                const double dh = dV * P_dot_LDmi + V * frobenius_dot(dP, LDmi) +
                                  V * frobenius_dot(P, L * dDmi);
                out[3 * t[a] + d] += grav_factor * dV - dh;
            }
        }
    }

    if (alpha != 0.0) {
        const auto refs0 = build_element_refs(mesh, X0);
        out += alpha * total_gradient(mesh, refs0, X, material0, inversion_threshold);
    }

    for (int v : mesh.fixed_vertices) out.segment<3>(3 * v).setZero();
    return out;
}

namespace {

struct PoseWork {
    EquilibriumState eq;
    double data = 0.0;
    double rms = 0.0;
    VecX grad_clusters;
    VecX grad_rest;
    bool failed = false;
    std::string message;
    std::exception_ptr error;
};

} // namespace

ObjectiveReport evaluate_objective(const TetMesh& mesh, const VecX& X,
                                   const MaterialModel& material,
                                   const std::vector<PoseObservation>& poses,
                                   const ObjectiveSetup& setup,
                                   std::vector<VecX>* warm_starts, bool with_gradients) {
    if (poses.empty()) throw std::invalid_argument("evaluate_objective: no poses");
    const int dof = 3 * mesh.num_nodes();
    const auto refs = build_element_refs(mesh, X);
    const int np = static_cast<int>(poses.size());

    std::vector<PoseWork> work(np);
    const auto run_pose = [&](int p) {
        PoseWork& w = work[p];
        try {
            const PoseObservation& pose = poses[p];
            SolverConfig cfg = setup.solver;
            if (!(cfg.residual_tol > 0.0))
                cfg.residual_tol =
                    default_residual_tol(mesh, refs, pose.gravity, setup.density);
            const VecX f_ext = gravity_force(mesh, refs, pose.gravity, setup.density);
            const bool has_warm = warm_starts &&
                                  p < static_cast<int>(warm_starts->size()) &&
                                  (*warm_starts)[p].size() == dof;
            const VecX& x0 = has_warm ? (*warm_starts)[p] : X;
            w.eq = solve_quasistatic(mesh, refs, X, material, f_ext, x0, cfg);
            if (!w.eq.converged) {
                w.failed = true;
                w.message = "forward solve did not converge (residual " +
                            std::to_string(w.eq.residual_norm) + " after " +
                            std::to_string(w.eq.iterations) + " iterations)";
                return;
            }
            double data = 0.0;
            for (size_t i = 0; i < pose.observed_ids.size(); ++i) {
                const Vec3 diff = w.eq.positions.segment<3>(3 * pose.observed_ids[i]) -
                                  pose.targets[i];
                data += 0.5 * diff.squaredNorm();
            }
            w.data = data;
            w.rms = pose.observed_ids.empty()
                        ? 0.0
                        : std::sqrt(2.0 * data / static_cast<double>(pose.observed_ids.size()));
            if (with_gradients) {
                const VecX lambda = adjoint_solve(mesh, refs, w.eq, material, pose,
                                                  setup.solver.inversion_threshold);
                w.grad_clusters = gradient_wrt_clusters(mesh, refs, lambda, w.eq, material,
                                                        setup.solver.inversion_threshold);
                w.grad_rest = gradient_wrt_rest(mesh, refs, X, lambda, w.eq, material, pose,
                                                setup.density, 0.0, X, material,
                                                setup.solver.inversion_threshold);
            }
        } catch (...) {
            w.error = std::current_exception();
        }
    };

    const int nthreads = std::max(1, std::min(setup.threads, np));
    if (nthreads == 1) {
        for (int p = 0; p < np; ++p) run_pose(p);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(nthreads);
        for (int tid = 0; tid < nthreads; ++tid)
            pool.emplace_back([&, tid] {
                for (int p = tid; p < np; p += nthreads) run_pose(p);
            });
        for (auto& th : pool) th.join();
    }

    for (int p = 0; p < np; ++p) {
        if (work[p].error) std::rethrow_exception(work[p].error);
        if (work[p].failed) throw ForwardFailure(p, "pose " + std::to_string(p) + ": " +
                                                        work[p].message);
    }

    ObjectiveReport rep;
    rep.grad_clusters = VecX::Zero(material.clusters.num_clusters);
    rep.grad_rest = VecX::Zero(dof);
    rep.per_pose_rms.reserve(np);
    rep.equilibria.reserve(np);
    for (int p = 0; p < np; ++p) {
        rep.data_term += work[p].data;
        rep.per_pose_rms.push_back(work[p].rms);
        if (with_gradients) {
            rep.grad_clusters += work[p].grad_clusters;
            rep.grad_rest += work[p].grad_rest;
        }
        rep.equilibria.push_back(std::move(work[p].eq));
    }

    const auto refs0 = build_element_refs(mesh, setup.X0);
    rep.reg_term =
        total_energy(mesh, refs0, X, setup.material0, setup.solver.inversion_threshold);
    rep.value = rep.data_term + setup.alpha * rep.reg_term;
    if (with_gradients && setup.alpha != 0.0) {
        rep.grad_rest += setup.alpha * total_gradient(mesh, refs0, X, setup.material0,
                                                      setup.solver.inversion_threshold);
        for (int v : mesh.fixed_vertices) rep.grad_rest.segment<3>(3 * v).setZero();
    }

    if (warm_starts) {
        warm_starts->resize(np);
        for (int p = 0; p < np; ++p) (*warm_starts)[p] = rep.equilibria[p].positions;
    }
    return rep;
}

} // namespace elfin
