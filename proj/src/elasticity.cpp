#include "elfin/elasticity.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace elfin {

std::vector<ElementReference> build_element_refs(const TetMesh& mesh, const VecX& rest) {
    std::vector<ElementReference> refs(mesh.num_elements());
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto& t = mesh.tets[e];
        const Vec3 p0 = node_of(rest, t[0]);
        Mat3 Dm;
        Dm.col(0) = node_of(rest, t[1]) - p0;
        Dm.col(1) = node_of(rest, t[2]) - p0;
        Dm.col(2) = node_of(rest, t[3]) - p0;
        const double det = Dm.determinant();
        if (!(det > 0.0))
            throw std::runtime_error("element " + std::to_string(e) +
                                     " has non-positive rest volume " +
                                     std::to_string(det / 6.0));
        refs[e].rest_shape = Dm;
        refs[e].inv_rest_shape = Dm.inverse();
        refs[e].rest_volume = det / 6.0;
    }
    return refs;
}

std::pair<double, double> lame_from_young_poisson(double young, double poisson) {
    const double mu = young / (2.0 * (1.0 + poisson));
    const double lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
    return {mu, lambda};
}

Mat3 deformation_gradient(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                          const VecX& x, int e) {
    const auto& t = mesh.tets[e];
    const Vec3 p0 = node_of(x, t[0]);
    Mat3 Ds;
    Ds.col(0) = node_of(x, t[1]) - p0;
    Ds.col(1) = node_of(x, t[2]) - p0;
    Ds.col(2) = node_of(x, t[3]) - p0;
    // I + (Ds - Dm) Dm^{-1} equals Ds Dm^{-1} but returns the identity exactly
    // when x coincides with the rest positions.
    return Mat3::Identity() + (Ds - refs[e].rest_shape) * refs[e].inv_rest_shape;
}

double energy_density(const Mat3& F, double mu, double lambda) {
    const double I_C = F.squaredNorm();
    const double logJ = std::log(F.determinant());
    return 0.5 * mu * (I_C - 3.0) - mu * logJ + 0.5 * lambda * logJ * logJ;
}

Mat3 piola_stress(const Mat3& F, double mu, double lambda) {
    const Mat3 F_inv_T = F.inverse().transpose();
    const double logJ = std::log(F.determinant());
    return mu * (F - F_inv_T) + lambda * logJ * F_inv_T;
}

Mat3 piola_differential(const Mat3& F, const Mat3& dF, double mu, double lambda) {
    const Mat3 F_inv = F.inverse();
    const Mat3 F_inv_T = F_inv.transpose();
    const double logJ = std::log(F.determinant());
    return mu * dF + (mu - lambda * logJ) * F_inv_T * dF.transpose() * F_inv_T +
           lambda * (F_inv * dF).trace() * F_inv_T;
}

void signed_svd(const Mat3& F, Mat3& U, Vec3& sigma, Mat3& V) {
    Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    U = svd.matrixU();
    V = svd.matrixV();
    sigma = svd.singularValues();
    // Push any reflection into the smallest singular value so U, V are proper
    // rotations and sigma[2] carries the sign of det F.
    if (U.determinant() < 0.0) {
        U.col(2) *= -1.0;
        sigma[2] = -sigma[2];
    }
    if (V.determinant() < 0.0) {
        V.col(2) *= -1.0;
        sigma[2] = -sigma[2];
    }
}

ClampedGradient clamp_deformation_gradient(const Mat3& F, double threshold) {
    const double det = F.determinant();
    // sigma_min >= 2 det F / |F|_F^2 when det F > 0, so this test certifies
    // that clamping would be a no-op without paying for the SVD.
    if (det > 0.0 && 2.0 * det > threshold * F.squaredNorm()) return {F, false};

    Mat3 U, V;
    Vec3 sigma;
    signed_svd(F, U, sigma, V);
    if (sigma.minCoeff() >= threshold) return {F, false};
    const Vec3 clamped = sigma.cwiseMax(threshold);
    return {U * clamped.asDiagonal() * V.transpose(), true};
}

namespace {

// dW/dDs -> 12-vector in (vertex, axis) layout; vertex 0 balances the rest.
Vec12 scatter_shape_gradient(const Mat3& H) {
    Vec12 g;
    g.segment<3>(3) = H.col(0);
    g.segment<3>(6) = H.col(1);
    g.segment<3>(9) = H.col(2);
    g.segment<3>(0) = -(H.col(0) + H.col(1) + H.col(2));
    return g;
}

} // namespace

double element_energy(const Mat3& F, double mu, double lambda, double rest_volume,
                      double threshold) {
    const auto cg = clamp_deformation_gradient(F, threshold);
    return rest_volume * energy_density(cg.F_hat, mu, lambda);
}

Vec12 element_energy_gradient(const Mat3& F, const ElementReference& ref, double mu,
                              double lambda, double threshold) {
    const auto cg = clamp_deformation_gradient(F, threshold);
    const Mat3 P = piola_stress(cg.F_hat, mu, lambda);
    const Mat3 H = ref.rest_volume * P * ref.inv_rest_shape.transpose();
    return scatter_shape_gradient(H);
}

Mat12 element_energy_hessian(const Mat3& F, const ElementReference& ref, double mu,
                             double lambda, double threshold, bool project_spd) {
    const auto cg = clamp_deformation_gradient(F, threshold);
    Mat12 K;
    for (int j = 0; j < 4; ++j) {
        for (int d = 0; d < 3; ++d) {
            Mat3 dDs = Mat3::Zero();
            if (j == 0) {
                dDs.row(d) = -Eigen::RowVector3d::Ones();
            } else {
                dDs(d, j - 1) = 1.0;
            }
            const Mat3 dF = dDs * ref.inv_rest_shape;
            const Mat3 dP = piola_differential(cg.F_hat, dF, mu, lambda);
            const Mat3 dH = ref.rest_volume * dP * ref.inv_rest_shape.transpose();
            K.col(3 * j + d) = scatter_shape_gradient(dH);
        }
    }
    if (project_spd) {
        Eigen::SelfAdjointEigenSolver<Mat12> eig(0.5 * (K + K.transpose()));
        const Eigen::Matrix<double, 12, 1> ev = eig.eigenvalues().cwiseMax(0.0);
        K = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
    }
    return K;
}

double total_energy(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold) {
    double W = 0.0;
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto [mu, lambda] =
            lame_from_young_poisson(material.element_young(e), material.poisson);
        const Mat3 F = deformation_gradient(mesh, refs, x, e);
        W += element_energy(F, mu, lambda, refs[e].rest_volume, threshold);
    }
    return W;
}

VecX total_gradient(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold) {
    VecX g = VecX::Zero(x.size());
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto [mu, lambda] =
            lame_from_young_poisson(material.element_young(e), material.poisson);
        const Mat3 F = deformation_gradient(mesh, refs, x, e);
        const Vec12 ge = element_energy_gradient(F, refs[e], mu, lambda, threshold);
        const auto& t = mesh.tets[e];
        for (int j = 0; j < 4; ++j) g.segment<3>(3 * t[j]) += ge.segment<3>(3 * j);
    }
    return g;
}

SpMat total_hessian(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold,
                    bool project_spd) {
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<size_t>(mesh.num_elements()) * 144);
    for (int e = 0; e < mesh.num_elements(); ++e) {
        const auto [mu, lambda] =
            lame_from_young_poisson(material.element_young(e), material.poisson);
        const Mat3 F = deformation_gradient(mesh, refs, x, e);
        const Mat12 Ke =
            element_energy_hessian(F, refs[e], mu, lambda, threshold, project_spd);
        const auto& t = mesh.tets[e];
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c)
                        trips.emplace_back(3 * t[a] + r, 3 * t[b] + c,
                                           Ke(3 * a + r, 3 * b + c));
    }
    SpMat K(x.size(), x.size());
    K.setFromTriplets(trips.begin(), trips.end());
    return K;
}

} // namespace elfin
