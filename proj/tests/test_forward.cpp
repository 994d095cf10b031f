#include <cmath>
#include <random>

#include "doctest.h"
#include "elfin/forward.hpp"
#include "elfin/synth.hpp"
#include "oracles.hpp"

using namespace elfin;

namespace {

MaterialModel homogeneous(const TetMesh& mesh, double E, double poisson = 0.43) {
    MaterialModel m;
    m.cluster_E = VecX::Constant(1, E);
    m.clusters.num_clusters = 1;
    m.clusters.weights.assign(mesh.num_elements(), {{0, 1.0}});
    m.poisson = poisson;
    return m;
}

} // namespace

TEST_CASE("smallest positive cubic root") {
    constexpr double inf = std::numeric_limits<double>::infinity();
    // (t-2)(t-5)(t-7) = t^3 - 14 t^2 + 59 t - 70
    CHECK(smallest_positive_cubic_root(-70, 59, -14, 1) ==
          doctest::Approx(2.0).epsilon(1e-10));
    // (t+1)(t+2)(t+3): no positive root
    CHECK(smallest_positive_cubic_root(6, 11, 6, 1) == inf);
    // 1 - t^3
    CHECK(smallest_positive_cubic_root(1, 0, 0, -1) ==
          doctest::Approx(1.0).epsilon(1e-10));
    // quadratic (t-1)(t-4)
    CHECK(smallest_positive_cubic_root(4, -5, 1, 0) ==
          doctest::Approx(1.0).epsilon(1e-10));
    // linear 3 - 1.5 t
    CHECK(smallest_positive_cubic_root(3, -1.5, 0, 0) ==
          doctest::Approx(2.0).epsilon(1e-10));
    // constants never cross zero
    CHECK(smallest_positive_cubic_root(5, 0, 0, 0) == inf);
    // tangent double root at t = 3: (t-3)^2 (t+1) = t^3 - 5 t^2 + 3 t + 9
    CHECK(smallest_positive_cubic_root(9, 3, -5, 1) ==
          doctest::Approx(3.0).epsilon(1e-5));
}

TEST_CASE("no-inversion step cap keeps all volumes above the floor") {
    TetMesh mesh = make_block_mesh(3, 2, 2, 0.01);
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    VecX x = mesh.rest_positions();

    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> u(-1.0, 1.0);

    SUBCASE("zero direction returns the requested step") {
        VecX dx = VecX::Zero(x.size());
        CHECK(max_noninversion_step(mesh, refs, x, dx, 0.37) == 0.37);
    }

    SUBCASE("gentle directions pass through uncapped") {
        VecX dx(x.size());
        for (int i = 0; i < dx.size(); ++i) dx[i] = 1e-5 * u(rng);
        CHECK(max_noninversion_step(mesh, refs, x, dx, 1.0) == 1.0);
    }

    SUBCASE("crushing directions are capped before the volume floor") {
        const double eps = 0.01;
        for (int trial = 0; trial < 5; ++trial) {
            VecX dx(x.size());
            for (int i = 0; i < dx.size(); ++i) dx[i] = 0.02 * u(rng);
            const double beta = max_noninversion_step(mesh, refs, x, dx, 1.0);
            REQUIRE(beta > 0.0);
            if (beta == 1.0) continue;

            VecX xb = x + beta * dx;
            for (int e = 0; e < mesh.num_elements(); ++e)
                CHECK(element_volume(mesh, xb, e) >=
                      eps * refs[e].rest_volume * (1.0 - 1e-9));

            // Past the unsafetied crossing some element dips under the floor.
            VecX xc = x + (beta / 0.9) * 1.05 * dx;
            double worst = std::numeric_limits<double>::infinity();
            for (int e = 0; e < mesh.num_elements(); ++e)
                worst = std::min(worst, element_volume(mesh, xc, e) -
                                            eps * refs[e].rest_volume);
            CHECK(worst < 0.0);
        }
    }
}

TEST_CASE("gravity load lumps element mass to the corners") {
    TetMesh mesh = make_block_mesh(4, 2, 1, 0.01);
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    const Vec3 g(1.3, -2.0, -9.5);
    const double rho = 1200.0;
    VecX f = gravity_force(mesh, refs, g, rho);

    // Momentum: total load equals total mass times g; the block volume is
    // exact because the five-tet split tiles each cell.
    Vec3 total = Vec3::Zero();
    for (int v = 0; v < mesh.num_nodes(); ++v) total += f.segment<3>(3 * v);
    const double mass = rho * 4 * 2 * 1 * 1e-6;
    CHECK((total - mass * g).norm() <= 1e-12 * mass * g.norm());

    // Per-node: a quarter of each incident element's mass.
    for (int v : {0, 7, mesh.num_nodes() - 1}) {
        double vol = 0.0;
        for (int e = 0; e < mesh.num_elements(); ++e)
            for (int k = 0; k < 4; ++k)
                if (mesh.tets[e][k] == v) vol += refs[e].rest_volume;
        Vec3 want = rho * vol / 4.0 * g;
        CHECK((f.segment<3>(3 * v) - want).norm() <= 1e-12 * (want.norm() + 1e-12));
    }
}

TEST_CASE("default residual tolerance follows the documented scaling") {
    TetMesh mesh = make_block_mesh(2, 2, 10, 0.01);
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    double total = 0.0;
    for (int e = 0; e < mesh.num_elements(); ++e) total += element_volume(mesh, e);
    const double want =
        1e-8 * mesh.num_nodes() * 9.81 * 1000.0 * (total / mesh.num_elements());
    CHECK(default_residual_tol(mesh, refs, Vec3(0, 0, -9.81), 1000.0) ==
          doctest::Approx(want).epsilon(1e-12));
    // A zero gravity vector falls back to standard gravity.
    CHECK(default_residual_tol(mesh, refs, Vec3::Zero(), 1000.0) ==
          doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("free dof maps round trip and reduce consistently") {
    TetMesh mesh = make_block_mesh(2, 1, 1, 0.01);
    mesh.fixed_vertices = {0, 3, 7};
    FreeDofMap map = build_free_map(mesh);
    CHECK(map.num_free == 3 * (mesh.num_nodes() - 3));

    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    VecX full(3 * mesh.num_nodes());
    for (int i = 0; i < full.size(); ++i) full[i] = u(rng);

    VecX red = gather_free(full, map);
    REQUIRE(red.size() == map.num_free);
    VecX back = scatter_free(red, map);
    for (int v = 0; v < mesh.num_nodes(); ++v) {
        const bool fixed = (v == 0 || v == 3 || v == 7);
        for (int d = 0; d < 3; ++d) {
            if (fixed)
                CHECK(back[3 * v + d] == 0.0);
            else
                CHECK(back[3 * v + d] == full[3 * v + d]);
        }
    }

    // reduce_to_free picks exactly the free rows and columns.
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    MaterialModel mat = homogeneous(mesh, 1e5);
    SpMat K = total_hessian(mesh, refs, mesh.rest_positions(), mat, 0.2, false);
    SpMat Kff = reduce_to_free(K, map);
    Eigen::MatrixXd Kd(K), Kfd(Kff);
    for (int i = 0; i < full.size(); ++i) {
        for (int j = 0; j < full.size(); ++j) {
            int fi = map.free_of_dof[i], fj = map.free_of_dof[j];
            if (fi >= 0 && fj >= 0) CHECK(Kfd(fi, fj) == Kd(i, j));
        }
    }
}

TEST_CASE("zero gravity returns the rest shape") {
    TetMesh mesh = make_block_mesh(2, 2, 4, 0.01);
    MaterialModel mat = homogeneous(mesh, 1e5);
    SolverConfig cfg;
    EquilibriumState eq =
        solve_quasistatic(mesh, mat, Vec3::Zero(), 1000.0, mesh.rest_positions(), cfg);
    CHECK(eq.converged);
    CHECK((eq.positions - mesh.rest_positions()).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("equilibrium certificate holds independently re-evaluated") {
    TetMesh mesh = make_block_mesh(6, 2, 2, 0.01);
    MaterialModel mat = homogeneous(mesh, 8e4);
    const Vec3 g(0, 0, -9.81);
    const double rho = 1000.0;
    SolverConfig cfg;
    EquilibriumState eq = solve_quasistatic(mesh, mat, g, rho, mesh.rest_positions(), cfg);
    REQUIRE(eq.converged);

    auto refs = build_element_refs(mesh, mesh.rest_positions());
    const double tol = default_residual_tol(mesh, refs, g, rho);
    VecX r = total_gradient(mesh, refs, eq.positions, mat, cfg.inversion_threshold) -
             gravity_force(mesh, refs, g, rho);
    FreeDofMap map = build_free_map(mesh);
    CHECK(gather_free(r, map).lpNorm<Eigen::Infinity>() <= tol);
    CHECK(eq.residual_norm <= tol);

    // Fixed vertices never move.
    for (int v : mesh.fixed_vertices)
        CHECK(eq.positions.segment<3>(3 * v) ==
              mesh.rest_positions().segment<3>(3 * v));

    // No element inverts at equilibrium.
    CHECK(oracle::min_volume(mesh, eq.positions) > 0.0);

    // The potential is monotone along the iteration up to evaluation noise.
    const double W = total_energy(mesh, refs, eq.positions, mat, cfg.inversion_threshold);
    const double fx = gravity_force(mesh, refs, g, rho).dot(eq.positions);
    const double slack = 1e-10 * (std::abs(W) + std::abs(fx));
    for (size_t i = 1; i < eq.objective_history.size(); ++i)
        CHECK(eq.objective_history[i] <= eq.objective_history[i - 1] + slack);

    // Accepted line-search steps carry their sufficient-decrease certificate.
    for (const auto& ls : eq.line_searches) {
        CHECK(ls.directional < 0.0);
        CHECK(ls.f_after <= ls.f_before + 1e-4 * ls.step * ls.directional + slack);
    }

    // Warm restart from the solution converges immediately.
    EquilibriumState again = solve_quasistatic(mesh, mat, g, rho, eq.positions, cfg);
    CHECK(again.converged);
    CHECK(again.iterations <= 1);
    CHECK((again.positions - eq.positions).lpNorm<Eigen::Infinity>() <= 1e-9);
}

TEST_CASE("solves are deterministic") {
    TetMesh mesh = make_block_mesh(3, 2, 2, 0.01);
    MaterialModel mat = homogeneous(mesh, 5e4);
    SolverConfig cfg;
    EquilibriumState a =
        solve_quasistatic(mesh, mat, Vec3(2, 0, -9.6), 1000.0, mesh.rest_positions(), cfg);
    EquilibriumState b =
        solve_quasistatic(mesh, mat, Vec3(2, 0, -9.6), 1000.0, mesh.rest_positions(), cfg);
    REQUIRE(a.converged);
    CHECK(a.positions == b.positions);
    CHECK(a.iterations == b.iterations);
}

TEST_CASE("iteration cap reports non-convergence without throwing") {
    TetMesh mesh = make_block_mesh(6, 2, 2, 0.01);
    MaterialModel mat = homogeneous(mesh, 2e4);
    SolverConfig cfg;
    cfg.max_newton_iters = 1;
    EquilibriumState eq =
        solve_quasistatic(mesh, mat, Vec3(0, 0, -9.81), 1000.0, mesh.rest_positions(), cfg);
    CHECK_FALSE(eq.converged);
    CHECK(eq.iterations == 1);
    CHECK(eq.residual_norm > 0.0);
}

TEST_CASE("low-level entry point rejects an unset tolerance") {
    TetMesh mesh = make_block_mesh(2, 1, 1, 0.01);
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    MaterialModel mat = homogeneous(mesh, 1e5);
    VecX f = VecX::Zero(3 * mesh.num_nodes());
    SolverConfig cfg;  // residual_tol left negative
    CHECK_THROWS_AS(solve_quasistatic(mesh, refs, mesh.rest_positions(), mat, f,
                                      mesh.rest_positions(), cfg),
                    std::invalid_argument);
}

TEST_CASE("severe loading stays inversion-free through the clamp") {
    // Forty times standard gravity on soft material: intermediate states pass
    // through the clamped regime, the converged one must not invert.
    TetMesh mesh = make_block_mesh(4, 2, 2, 0.01);
    MaterialModel mat = homogeneous(mesh, 2e4);
    SolverConfig cfg;
    cfg.max_newton_iters = 400;
    EquilibriumState eq = solve_quasistatic(mesh, mat, Vec3(0, 0, -392.4), 1000.0,
                                            mesh.rest_positions(), cfg);
    CHECK(eq.converged);
    CHECK(oracle::min_volume(mesh, eq.positions) > 0.0);
}
