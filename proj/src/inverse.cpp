#include "elfin/inverse.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace elfin {

void InverseConfig::validate() const {
    if (!(0.0 < p_lower && p_lower < p_upper))
        throw std::invalid_argument("inverse: require 0 < p_lower < p_upper");
    if (!(p_lower <= e_init && e_init <= p_upper))
        throw std::invalid_argument("inverse: e_init outside [p_lower, p_upper]");
    if (!(0.0 < wolfe_gamma && wolfe_gamma < 1.0))
        throw std::invalid_argument("inverse: wolfe_gamma outside (0, 1)");
    if (material_max_iters < 0 || restshape_max_iters < 0 || bcd_max_outer < 1)
        throw std::invalid_argument("inverse: iteration caps must be positive");
    if (!(bcd_rel_tol > 0.0))
        throw std::invalid_argument("inverse: bcd_rel_tol must be positive");
}

VecX initial_rest_guess(const TetMesh& mesh, const VecX& observed_neutral,
                        const MaterialModel& material0, const Vec3& g_neutral,
                        double density, SolverConfig config) {
    const auto refs = build_element_refs(mesh, observed_neutral);
    if (!(config.residual_tol > 0.0))
        config.residual_tol = default_residual_tol(mesh, refs, g_neutral, density);
    const VecX f_ext = gravity_force(mesh, refs, -g_neutral, density);
    const EquilibriumState eq = solve_quasistatic(mesh, refs, observed_neutral, material0,
                                                  f_ext, observed_neutral, config);
    if (!eq.converged)
        throw ForwardFailure(-1, "initial_rest_guess: inverse-gravity solve did not "
                                 "converge (residual " +
                                     std::to_string(eq.residual_norm) + ")");
    return eq.positions;
}

namespace {

void push_row(std::vector<HistoryRow>* history, const std::string& phase, int iter,
              const ObjectiveReport& rep, double objective, double grad_norm, double step,
              const VecX& cluster_E) {
    if (!history) return;
    HistoryRow row;
    row.phase = phase;
    row.iter = iter;
    row.objective = objective;
    row.data_term = rep.data_term;
    row.reg_term = rep.reg_term;
    row.grad_norm = grad_norm;
    row.step = step;
    row.cluster_E = cluster_E;
    history->push_back(std::move(row));
}

} // namespace

MaterialPhaseResult optimize_materials(const TetMesh& mesh, const VecX& X,
                                       const std::vector<PoseObservation>& poses,
                                       const VecX& cluster_E_init,
                                       const ClusterMap& clusters, double poisson,
                                       const ObjectiveSetup& setup,
                                       const InverseConfig& cfg,
                                       const std::string& phase_label,
                                       std::vector<HistoryRow>* history,
                                       std::vector<VecX>* warm_starts,
                                       const ObjectiveReport* seed_report) {
    const int c = clusters.num_clusters;
    const double ul = std::log10(cfg.p_lower);
    const double uu = std::log10(cfg.p_upper);
    constexpr double ln10 = std::numbers::ln10;

    const auto E_from_u = [&](const VecX& u) {
        VecX E(c);
        for (int i = 0; i < c; ++i) {
            if (u[i] <= ul)
                E[i] = cfg.p_lower;  // exact bound value, not pow(10, log10(P))
            else if (u[i] >= uu)
                E[i] = cfg.p_upper;
            else
                E[i] = std::clamp(std::pow(10.0, u[i]), cfg.p_lower, cfg.p_upper);
        }
        return E;
    };
    const auto material_of = [&](const VecX& E) {
        MaterialModel m;
        m.cluster_E = E;
        m.clusters = clusters;
        m.poisson = poisson;
        return m;
    };
    const auto grad_u_of = [&](const ObjectiveReport& rep, const VecX& E) {
        VecX g(c);
        for (int i = 0; i < c; ++i) g[i] = rep.grad_clusters[i] * E[i] * ln10;
        return g;
    };

    VecX u(c);
    for (int i = 0; i < c; ++i)
        u[i] = std::clamp(std::log10(cluster_E_init[i]), ul, uu);
    VecX E = E_from_u(u);

    MaterialPhaseResult out;
    ObjectiveReport rep =
        seed_report ? *seed_report
                    : evaluate_objective(mesh, X, material_of(E), poses, setup, warm_starts);
    double f = rep.value;
    VecX g = grad_u_of(rep, E);

    const auto projected = [&](const VecX& grad) {
        VecX pg = grad;
        for (int i = 0; i < c; ++i) {
            if ((u[i] <= ul && grad[i] > 0.0) || (u[i] >= uu && grad[i] < 0.0)) pg[i] = 0.0;
        }
        return pg;
    };

    VecX pg = projected(g);
    push_row(history, phase_label, 0, rep, f, pg.norm(), 0.0, E);

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(c, c);  // inverse Hessian model
    bool first_update = true;

    for (int k = 1; k <= cfg.material_max_iters; ++k) {
        pg = projected(g);
        if (pg.lpNorm<Eigen::Infinity>() <= cfg.grad_tol_material) {
            out.hit_grad_tol = true;
            break;
        }

        std::vector<int> free_idx;
        for (int i = 0; i < c; ++i) {
            const bool blocked = (u[i] <= ul && g[i] > 0.0) || (u[i] >= uu && g[i] < 0.0);
            if (!blocked) free_idx.push_back(i);
        }
        VecX d = VecX::Zero(c);
        if (!free_idx.empty()) {
            const int nf = static_cast<int>(free_idx.size());
            Eigen::MatrixXd Hf(nf, nf);
            VecX gf(nf);
            for (int a = 0; a < nf; ++a) {
                gf[a] = g[free_idx[a]];
                for (int b = 0; b < nf; ++b) Hf(a, b) = H(free_idx[a], free_idx[b]);
            }
            const VecX df = -Hf * gf;
            for (int a = 0; a < nf; ++a) d[free_idx[a]] = df[a];
        }
        if (d.dot(g) >= 0.0) {
            d = -pg;  // model failed to give descent; restart from steepest
            H.setIdentity();
            first_update = true;
        }
        if (d.isZero(0.0)) break;
        // One decade per iterate keeps every trial modulus physically solvable.
        const double dmax = d.lpNorm<Eigen::Infinity>();
        if (dmax > 1.0) d *= 1.0 / dmax;

        double t = 1.0;
        bool accepted = false;
        VecX u_new, E_new, g_new;
        ObjectiveReport rep_new;
        while (t >= 1e-12) {
            u_new = (u + t * d).cwiseMax(ul).cwiseMin(uu);
            if ((u_new - u).isZero(0.0)) break;
            E_new = E_from_u(u_new);
            try {
                rep_new = evaluate_objective(mesh, X, material_of(E_new), poses, setup,
                                             warm_starts);
            } catch (const ForwardFailure&) {
                t *= 0.5;  // unreachable equilibrium at this trial, shorten the step
                continue;
            }
            if (rep_new.value <= f + cfg.wolfe_gamma * g.dot(u_new - u)) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            out.stalled = (out.iterations == 0);
            break;
        }
        // A unit step certifying on the first trial means the direction is
        // timid for the local slope (identity or stale curvature model).
        // Forward-track while the certificate holds and the value still
        // drops, keeping the total move within one decade of the iterate.
        if (t == 1.0) {
            const double t_cap = 1.0 / d.lpNorm<Eigen::Infinity>();
            while (2.0 * t <= t_cap) {
                const VecX u_try = (u + 2.0 * t * d).cwiseMax(ul).cwiseMin(uu);
                if ((u_try - u_new).isZero(0.0)) break;
                const VecX E_try = E_from_u(u_try);
                ObjectiveReport rep_try;
                try {
                    rep_try = evaluate_objective(mesh, X, material_of(E_try), poses,
                                                 setup, warm_starts);
                } catch (const ForwardFailure&) {
                    break;
                }
                if (rep_try.value > f + cfg.wolfe_gamma * g.dot(u_try - u) ||
                    rep_try.value >= rep_new.value)
                    break;
                t *= 2.0;
                u_new = u_try;
                E_new = E_try;
                rep_new = rep_try;
            }
        }

        g_new = grad_u_of(rep_new, E_new);
        const VecX s = u_new - u;
        const VecX y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (first_update) {
                H = (sy / y.dot(y)) * Eigen::MatrixXd::Identity(c, c);
                first_update = false;
            }
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd A =
                Eigen::MatrixXd::Identity(c, c) - rho * (s * y.transpose());
            H = A * H * A.transpose() + rho * (s * s.transpose());
        }

        u = u_new;
        E = E_new;
        rep = rep_new;
        f = rep.value;
        g = g_new;
        ++out.iterations;
        push_row(history, phase_label, k, rep, f, projected(g).norm(), t, E);
    }

    out.cluster_E = E;
    out.report = std::move(rep);
    return out;
}

RestPhaseResult optimize_rest_shape(const TetMesh& mesh, const VecX& cluster_E,
                                    const ClusterMap& clusters, double poisson,
                                    const std::vector<PoseObservation>& poses,
                                    const VecX& X_init, const ObjectiveSetup& setup,
                                    const InverseConfig& cfg,
                                    const std::string& phase_label,
                                    std::vector<HistoryRow>* history,
                                    std::vector<VecX>* warm_starts,
                                    std::vector<VecX>* iterates,
                                    const ObjectiveReport* seed_report) {
    MaterialModel material;
    material.cluster_E = cluster_E;
    material.clusters = clusters;
    material.poisson = poisson;

    VecX X = X_init;
    RestPhaseResult out;
    ObjectiveReport rep = seed_report
                              ? *seed_report
                              : evaluate_objective(mesh, X, material, poses, setup,
                                                   warm_starts);
    double f = rep.value;
    push_row(history, phase_label, 0, rep, f, rep.grad_rest.norm(), 0.0, cluster_E);
    if (iterates) iterates->push_back(X);

    // Accepted step lengths persist across iterations (doubled, capped at 1)
    // so the backtracking does not re-pay the same halvings every time.
    double beta_carry = 1.0;

    for (int k = 1; k <= cfg.restshape_max_iters; ++k) {
        const VecX G = rep.grad_rest;
        const double gn2 = G.squaredNorm();
        const double gn = std::sqrt(gn2);
        if (gn <= cfg.grad_tol_rest) {
            out.hit_grad_tol = true;
            break;
        }

        const auto refs = build_element_refs(mesh, X);
        const double cap = max_noninversion_step(mesh, refs, X, -G, beta_carry);
        if (!(cap > 0.0)) {
            out.stalled = (out.iterations == 0);
            break;
        }

        double beta = cap;
        bool accepted = false;
        VecX X_new;
        ObjectiveReport rep_new;
        while (beta >= 1e-12) {
            X_new = X - beta * G;
            try {
                rep_new = evaluate_objective(mesh, X_new, material, poses, setup,
                                             warm_starts);
            } catch (const ForwardFailure&) {
                beta *= 0.5;  // rejected step, keep backtracking
                continue;
            }
            if (rep_new.value <= f - cfg.wolfe_gamma * beta * gn2) {
                accepted = true;
                break;
            }
            beta *= 0.5;
        }
        if (!accepted) {
            out.stalled = (out.iterations == 0);
            break;
        }

        beta_carry = std::min(1.0, 4.0 * beta);
        X = X_new;
        rep = std::move(rep_new);
        f = rep.value;
        ++out.iterations;
        push_row(history, phase_label, k, rep, f, rep.grad_rest.norm(), beta, cluster_E);
        if (iterates) iterates->push_back(X);
    }

    out.X = std::move(X);
    out.report = std::move(rep);
    return out;
}

InversionResult block_coordinate_descent(const TetMesh& mesh,
                                         const std::vector<PoseObservation>& poses,
                                         const VecX& observed_neutral,
                                         const std::vector<int>& labels,
                                         int num_clusters, const InverseConfig& cfg,
                                         const SolverConfig& solver, double density,
                                         double poisson, int threads) {
    cfg.validate();
    if (poses.empty()) throw std::invalid_argument("block_coordinate_descent: no poses");
    for (const auto& pose : poses) pose.validate(mesh);

    const ClusterMap clusters = build_cluster_weights(mesh, labels, num_clusters);
    MaterialModel material0;
    material0.cluster_E = VecX::Constant(num_clusters, cfg.e_init);
    material0.clusters = clusters;
    material0.poisson = poisson;

    InversionResult result;
    VecX E = VecX::Constant(num_clusters, cfg.e_init);

    try {
        const VecX X0 = initial_rest_guess(mesh, observed_neutral, material0,
                                           poses[0].gravity, density, solver);

        ObjectiveSetup setup;
        setup.X0 = X0;
        setup.material0 = material0;
        setup.density = density;
        setup.solver = solver;
        setup.threads = threads;
        {
            const auto refs0 = build_element_refs(mesh, X0);
            const double w_scale = total_energy(mesh, refs0, observed_neutral, material0,
                                                solver.inversion_threshold);
            setup.alpha = cfg.alpha >= 0.0 ? cfg.alpha
                                           : (w_scale > 0.0 ? 1e-3 / w_scale : 1e-3);
        }
        result.alpha_used = setup.alpha;

        VecX X = X0;
        result.rest_shape = X;
        result.cluster_E = E;
        result.rest_iterates.push_back(X0);

        std::vector<VecX> warm;
        MaterialModel mat = material0;
        ObjectiveReport rep = evaluate_objective(mesh, X, mat, poses, setup, &warm);
        push_row(&result.history, "init", 0, rep, rep.value, rep.grad_rest.norm(), 0.0, E);
        const double init_value = rep.value;

        // Single-pose warm start for the material variables.
        {
            const std::vector<PoseObservation> first(poses.begin(), poses.begin() + 1);
            std::vector<VecX> warm_single;
            auto mres = optimize_materials(mesh, X, first, E, clusters, poisson, setup, cfg,
                                           "warm", &result.history, &warm_single, nullptr);
            E = mres.cluster_E;
        }

        double best_value = init_value;
        VecX best_X = X;
        VecX best_E = result.cluster_E;  // moduli before the warm phase, at init_value
        double prev_value = init_value;
        bool have_seed = false;
        ObjectiveReport chained;

        for (int round = 1; round <= cfg.bcd_max_outer; ++round) {
            auto mres = optimize_materials(mesh, X, poses, E, clusters, poisson, setup, cfg,
                                           "material", &result.history, &warm,
                                           have_seed ? &chained : nullptr);
            E = mres.cluster_E;
            chained = std::move(mres.report);

            auto rres = optimize_rest_shape(mesh, E, clusters, poisson, poses, X, setup,
                                            cfg, "rest", &result.history, &warm,
                                            &result.rest_iterates, &chained);
            X = rres.X;
            chained = std::move(rres.report);
            have_seed = true;

            const double round_value = chained.value;
            if (round_value < best_value) {
                best_value = round_value;
                best_X = X;
                best_E = E;
            }

            const bool no_progress = mres.iterations == 0 && rres.iterations == 0;
            const double rel =
                (prev_value - round_value) / std::max(std::abs(prev_value), 1e-300);
            prev_value = round_value;
            if (no_progress && (mres.stalled || mres.hit_grad_tol) &&
                (rres.stalled || rres.hit_grad_tol)) {
                result.converged = true;
                result.reason = "stalled";
                break;
            }
            if (rel < cfg.bcd_rel_tol) {
                result.converged = true;
                result.reason = "bcd_rel_tol";
                break;
            }
            if (round == cfg.bcd_max_outer) {
                result.converged = true;
                result.reason = "bcd_max_outer";
            }
        }

        result.rest_shape = best_X;
        result.cluster_E = best_E;
    } catch (const std::exception& e) {
        result.converged = false;
        result.reason = e.what();
    }
    return result;
}

} // namespace elfin
