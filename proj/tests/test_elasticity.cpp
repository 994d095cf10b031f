#include <algorithm>
#include <functional>
#include <random>

#include "doctest.h"
#include "elfin/elasticity.hpp"
#include "elfin/synth.hpp"
#include "oracles.hpp"

using namespace elfin;

namespace {

// Small two-cluster block with a mildly deformed state, shared by the
// mesh-level derivative tests.
struct BlockFixture {
    TetMesh mesh;
    std::vector<ElementReference> refs;
    MaterialModel material;
    VecX x;

    BlockFixture() {
        mesh = make_block_mesh(2, 1, 1, 0.01);
        refs = build_element_refs(mesh, mesh.rest_positions());
        auto labels = band_labels(mesh, 2);
        material.clusters = build_cluster_weights(mesh, labels, 2);
        material.cluster_E = VecX(2);
        material.cluster_E << 5e4, 2e5;
        material.poisson = 0.43;

        x = mesh.rest_positions();
        std::mt19937_64 rng(71);
        std::uniform_real_distribution<double> u(-5e-4, 5e-4);
        for (int i = 0; i < x.size(); ++i) x[i] += u(rng);
    }
};

} // namespace

TEST_CASE("lame parameters from E and nu") {
    auto [mu, lambda] = lame_from_young_poisson(1e5, 0.43);
    // mu = E / (2 (1 + nu)), lambda = E nu / ((1 + nu)(1 - 2 nu)).
    CHECK(mu == doctest::Approx(34965.034965034965).epsilon(1e-14));
    CHECK(lambda == doctest::Approx(214785.21478521478).epsilon(1e-14));
}

TEST_CASE("deformation gradient is exactly the identity at rest") {
    TetMesh mesh = make_block_mesh(2, 2, 2, 0.017);
    auto refs = build_element_refs(mesh, mesh.rest_positions());
    VecX x = mesh.rest_positions();
    for (int e = 0; e < mesh.num_elements(); ++e) {
        Mat3 F = deformation_gradient(mesh, refs, x, e);
        CHECK((F - Mat3::Identity()).lpNorm<Eigen::Infinity>() == 0.0);
    }
}

TEST_CASE("energy density vanishes at identity and matches the invariant form") {
    const double mu = 3.5e4, lambda = 2.1e5;
    CHECK(energy_density(Mat3::Identity(), mu, lambda) == 0.0);
    CHECK(piola_stress(Mat3::Identity(), mu, lambda).lpNorm<Eigen::Infinity>() ==
          doctest::Approx(0.0).epsilon(1e-12));

    // Cross-check against the closed form on singular values.
    std::mt19937_64 rng(3);
    for (int k = 0; k < 20; ++k) {
        Mat3 F = oracle::random_gradient(rng, 0.3, 0.2);
        const double got = energy_density(F, mu, lambda);
        const double want =
            oracle::neo_hookean_from_sigma(oracle::singular_values(F), mu, lambda);
        CHECK(oracle::rel_err(got, want, 1e-12) < 1e-10);
    }
}

TEST_CASE("piola stress is the derivative of the energy density") {
    const double mu = 3.5e4, lambda = 2.1e5;
    std::mt19937_64 rng(11);
    for (int k = 0; k < 10; ++k) {
        Mat3 F = oracle::random_gradient(rng, 0.3, 0.3);
        Mat3 P = piola_stress(F, mu, lambda);
        const double floor = 1e-8 * P.norm();
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                Mat3 Fp = F, Fm = F;
                const double h = 1e-6;
                Fp(i, j) += h;
                Fm(i, j) -= h;
                const double fd =
                    (energy_density(Fp, mu, lambda) - energy_density(Fm, mu, lambda)) /
                    (2.0 * h);
                CHECK(oracle::rel_err(P(i, j), fd, floor) < 1e-5);
            }
        }
    }
}

TEST_CASE("piola differential matches directional finite differences") {
    const double mu = 3.5e4, lambda = 2.1e5;
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 10; ++k) {
        Mat3 F = oracle::random_gradient(rng, 0.3, 0.3);
        Mat3 dF;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) dF(i, j) = u(rng);
        const double h = 1e-6;
        Mat3 fd = (piola_stress(F + h * dF, mu, lambda) -
                   piola_stress(F - h * dF, mu, lambda)) /
                  (2.0 * h);
        Mat3 got = piola_differential(F, dF, mu, lambda);
        CHECK((got - fd).norm() <= 1e-5 * (fd.norm() + 1e-8));
    }
}

TEST_CASE("signed svd produces rotations and ordered signed spectra") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 40; ++k) {
        Mat3 F;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) F(i, j) = u(rng);
        if (k % 3 == 0) F.col(0) *= -1.0;  // force negative determinants regularly
        if (k % 5 == 0) F.col(2) = F.col(1) * 1e-7;  // near-singular

        Mat3 U, V;
        Vec3 sigma;
        signed_svd(F, U, sigma, V);

        CHECK((U.transpose() * U - Mat3::Identity()).norm() < 1e-13);
        CHECK((V.transpose() * V - Mat3::Identity()).norm() < 1e-13);
        CHECK(U.determinant() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(V.determinant() == doctest::Approx(1.0).epsilon(1e-12));

        CHECK((U * sigma.asDiagonal() * V.transpose() - F).norm() <=
              1e-13 * (F.norm() + 1.0));

        CHECK(sigma[0] >= sigma[1]);
        CHECK(sigma[1] >= std::abs(sigma[2]));
        // At det(F) ~ 0 both factors are rounding noise and the product's
        // sign is meaningless; require agreement only away from singularity.
        if (std::abs(sigma[2]) > 1e-13 * sigma[0])
            CHECK(sigma[2] * F.determinant() >= 0.0);

        // Magnitudes agree with an independent SVD.
        Vec3 ref = oracle::singular_values(F);
        for (int i = 0; i < 3; ++i)
            CHECK(std::abs(sigma[i]) == doctest::Approx(ref[i]).epsilon(1e-10));
    }
}

TEST_CASE("clamping is a bitwise no-op for well-conditioned gradients") {
    std::mt19937_64 rng(19);
    for (int k = 0; k < 20; ++k) {
        Mat3 F = oracle::random_gradient(rng, 0.2, 0.5);
        if (oracle::singular_values(F).minCoeff() < 0.45) continue;
        auto cg = clamp_deformation_gradient(F, 0.2);
        CHECK_FALSE(cg.clamped);
        CHECK((cg.F_hat - F).lpNorm<Eigen::Infinity>() == 0.0);
    }
}

TEST_CASE("clamping floors signed singular values at the threshold") {
    const double thr = 0.2;
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 20; ++k) {
        // Squashed and possibly inverted gradients.
        Vec3 s(1.0 + 0.2 * u(rng), 0.8, ((k % 2) ? -0.1 : 0.05) * (1.0 + u(rng)));
        Mat3 A;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) A(i, j) = u(rng);
        Eigen::HouseholderQR<Mat3> qr(A);
        Mat3 Q = qr.householderQ();
        Mat3 F = Q * s.asDiagonal() * Q.transpose();

        auto cg = clamp_deformation_gradient(F, thr);
        CHECK(cg.clamped);
        CHECK(cg.F_hat.determinant() > 0.0);

        // The clamped gradient's spectrum is the signed spectrum, floored.
        Mat3 U, V;
        Vec3 sig, sig_hat;
        signed_svd(F, U, sig, V);
        sig_hat = oracle::singular_values(cg.F_hat);
        Vec3 want = sig.cwiseMax(thr);
        std::sort(want.data(), want.data() + 3, std::greater<double>());
        for (int i = 0; i < 3; ++i)
            CHECK(sig_hat[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("element energy uses the clamped density") {
    const double mu = 3.5e4, lambda = 2.1e5, thr = 0.2, vol = 1.7e-7;
    Mat3 F = Vec3(1.1, 0.9, 0.03).asDiagonal();  // one direction under threshold
    const double got = element_energy(F, mu, lambda, vol, thr);
    const double want =
        vol * oracle::neo_hookean_from_sigma(Vec3(1.1, 0.9, thr), mu, lambda);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("clamped element gradient is the stress at the clamped gradient") {
    // Below the threshold the restoring force comes from the stress evaluated
    // at the floored spectrum; verify the full construction against an
    // independently clamped F.
    TetMesh mesh;
    mesh.nodes = {Vec3(0, 0, 0), Vec3(0.01, 0, 0), Vec3(0, 0.01, 0),
                  Vec3(0, 0, 0.01)};
    mesh.tets = {{0, 1, 2, 3}};
    auto refs = build_element_refs(mesh, mesh.rest_positions());

    VecX x = mesh.rest_positions();
    x[11] = 0.0005;  // squash the apex: sigma_min well below 0.2

    const double mu = 3.5e4, lambda = 2.1e5, thr = 0.2;
    Mat3 F = deformation_gradient(mesh, refs, x, 0);
    REQUIRE(oracle::singular_values(F).minCoeff() < thr);

    Vec12 got = element_energy_gradient(F, refs[0], mu, lambda, thr);

    Mat3 U, V;
    Vec3 sig;
    signed_svd(F, U, sig, V);
    Mat3 F_hat = U * sig.cwiseMax(thr).asDiagonal() * V.transpose();
    Mat3 H = refs[0].rest_volume * piola_stress(F_hat, mu, lambda) *
             refs[0].inv_rest_shape.transpose();
    Vec12 want;
    want.segment<3>(3) = H.col(0);
    want.segment<3>(6) = H.col(1);
    want.segment<3>(9) = H.col(2);
    want.segment<3>(0) = -(H.col(0) + H.col(1) + H.col(2));

    CHECK((got - want).norm() <= 1e-10 * want.norm());
}

TEST_CASE("total gradient matches finite differences of the total energy") {
    BlockFixture fx;
    const double thr = 0.2;
    auto f = [&](const VecX& y) {
        return total_energy(fx.mesh, fx.refs, y, fx.material, thr);
    };
    VecX g = total_gradient(fx.mesh, fx.refs, fx.x, fx.material, thr);
    VecX fd = oracle::fd_gradient(f, fx.x, 1e-7);
    const double floor = 1e-7 * g.lpNorm<Eigen::Infinity>();
    for (int i = 0; i < g.size(); ++i)
        CHECK(oracle::rel_err(g[i], fd[i], floor) < 2e-5);
}

TEST_CASE("total hessian matches finite differences of the total gradient") {
    BlockFixture fx;
    const double thr = 0.2;
    SpMat K = total_hessian(fx.mesh, fx.refs, fx.x, fx.material, thr, false);
    Eigen::MatrixXd Kd = Eigen::MatrixXd(K);
    CHECK((Kd - Kd.transpose()).lpNorm<Eigen::Infinity>() <=
          1e-12 * Kd.lpNorm<Eigen::Infinity>());

    const double h = 1e-7;
    const double floor = 1e-7 * Kd.lpNorm<Eigen::Infinity>();
    for (int i = 0; i < fx.x.size(); ++i) {
        VecX xp = fx.x, xm = fx.x;
        xp[i] += h;
        xm[i] -= h;
        VecX col = (total_gradient(fx.mesh, fx.refs, xp, fx.material, thr) -
                    total_gradient(fx.mesh, fx.refs, xm, fx.material, thr)) /
                   (2.0 * h);
        for (int j = 0; j < fx.x.size(); ++j)
            CHECK(oracle::rel_err(Kd(j, i), col[j], floor) < 5e-5);
    }
}

TEST_CASE("spd projection is inactive where blocks are already convex") {
    // At the rest state the neo-Hookean Hessian is the linear elasticity
    // tensor, which is positive semidefinite, so projection changes nothing.
    BlockFixture fx;
    VecX rest = fx.mesh.rest_positions();
    SpMat K0 = total_hessian(fx.mesh, fx.refs, rest, fx.material, 0.2, false);
    SpMat K1 = total_hessian(fx.mesh, fx.refs, rest, fx.material, 0.2, true);
    Eigen::MatrixXd d = Eigen::MatrixXd(K1) - Eigen::MatrixXd(K0);
    CHECK(d.lpNorm<Eigen::Infinity>() <=
          1e-9 * Eigen::MatrixXd(K0).lpNorm<Eigen::Infinity>());
}

TEST_CASE("projected hessian is positive semidefinite under heavy compression") {
    BlockFixture fx;
    VecX x = fx.mesh.rest_positions();
    for (int v = 0; v < fx.mesh.num_nodes(); ++v) x[3 * v + 2] *= 0.05;
    SpMat K = total_hessian(fx.mesh, fx.refs, x, fx.material, 0.2, true);
    const Eigen::MatrixXd Kd(K);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Kd);
    const double scale = eig.eigenvalues().cwiseAbs().maxCoeff();
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10 * scale);

    // The unprojected counterpart is indefinite here, so the projection is
    // doing real work in this state.
    SpMat Ku = total_hessian(fx.mesh, fx.refs, x, fx.material, 0.2, false);
    const Eigen::MatrixXd Kud(Ku);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigu(Kud);
    CHECK(eigu.eigenvalues().minCoeff() < -1e-6 * scale);
}

TEST_CASE("total energy is linear in the cluster moduli") {
    BlockFixture fx;
    const double thr = 0.2;
    const double w1 = total_energy(fx.mesh, fx.refs, fx.x, fx.material, thr);
    MaterialModel scaled = fx.material;
    scaled.cluster_E *= 3.7;
    const double w2 = total_energy(fx.mesh, fx.refs, fx.x, scaled, thr);
    CHECK(w2 == doctest::Approx(3.7 * w1).epsilon(1e-13));
}

TEST_CASE("element young blends cluster moduli through the weights") {
    BlockFixture fx;
    for (int e = 0; e < fx.mesh.num_elements(); ++e) {
        double want = 0.0;
        for (auto [c, w] : fx.material.clusters.weights[e])
            want += w * fx.material.cluster_E[c];
        CHECK(fx.material.element_young(e) == want);
    }
}
