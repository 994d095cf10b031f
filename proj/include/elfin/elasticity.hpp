#pragma once

#include <utility>
#include <vector>

#include "elfin/mesh.hpp"
#include "elfin/types.hpp"

namespace elfin {

// Precomputed per-element rest-shape data. Rebuilt whenever the rest shape
// changes; all energy/force/stiffness kernels take these by reference.
struct ElementReference {
    Mat3 rest_shape;      // Dm: rest edge matrix [X1-X0 | X2-X0 | X3-X0]
    Mat3 inv_rest_shape;  // Dm^{-1}
    double rest_volume;   // det(Dm)/6, positive for a valid mesh
};

std::vector<ElementReference> build_element_refs(const TetMesh& mesh, const VecX& rest);

// Per-cluster Young's moduli blended onto elements through ClusterMap rows.
struct MaterialModel {
    VecX cluster_E;
    ClusterMap clusters;
    double poisson = 0.43;

    double element_young(int e) const {
        double E = 0.0;
        for (const auto& [c, w] : clusters.weights[e]) E += w * cluster_E[c];
        return E;
    }
};

// Lame parameters (mu, lambda) from Young's modulus and Poisson ratio.
std::pair<double, double> lame_from_young_poisson(double young, double poisson);

// Deformation gradient of element e at positions x. Computed as
// I + (Ds - Dm) Dm^{-1} so that x == rest gives exactly the identity.
Mat3 deformation_gradient(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                          const VecX& x, int e);

// Compressible neo-Hookean kernels. All require det(F) > 0.
double energy_density(const Mat3& F, double mu, double lambda);
Mat3 piola_stress(const Mat3& F, double mu, double lambda);
Mat3 piola_differential(const Mat3& F, const Mat3& dF, double mu, double lambda);

// Signed SVD: F = U diag(sigma) V^T with U, V in SO(3); sigma[0] >= sigma[1]
// >= |sigma[2]| and sigma[2] carries the sign of det(F).
void signed_svd(const Mat3& F, Mat3& U, Vec3& sigma, Mat3& V);

// Inversion handling: when an element is degenerate or inverted, evaluate the
// kernels at the clamped gradient F_hat = U diag(max(sigma, threshold)) V^T.
// A cheap bound on the smallest singular value (2 det F / |F|_F^2) lets the
// common well-conditioned case skip the SVD and reuse the closed forms on F
// directly, so results there are bit-identical to the unclamped kernels.
struct ClampedGradient {
    Mat3 F_hat;
    bool clamped = false;
};
ClampedGradient clamp_deformation_gradient(const Mat3& F, double threshold);

// Element quantities at positions x. Forces follow the convention
// f = -dW/dx; the gradient returned here is dW/dx.
double element_energy(const Mat3& F, double mu, double lambda, double rest_volume,
                      double threshold);
Vec12 element_energy_gradient(const Mat3& F, const ElementReference& ref, double mu,
                              double lambda, double threshold);
// project_spd: eigenvalue-clamp the 12x12 block to positive semidefinite.
Mat12 element_energy_hessian(const Mat3& F, const ElementReference& ref, double mu,
                             double lambda, double threshold, bool project_spd);

// Mesh-level sums. Assembly iterates elements in index order so results are
// bitwise reproducible.
double total_energy(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold);
VecX total_gradient(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold);
SpMat total_hessian(const TetMesh& mesh, const std::vector<ElementReference>& refs,
                    const VecX& x, const MaterialModel& material, double threshold,
                    bool project_spd);

} // namespace elfin
