#pragma once

#include <cstdint>
#include <vector>

#include "elfin/elasticity.hpp"
#include "elfin/forward.hpp"
#include "elfin/mesh.hpp"

namespace elfin {

// Axis-aligned block of nx * ny * nz cells, each split into five tets with a
// parity-alternating diagonal pattern so neighboring cells share face
// diagonals. Cell edge length `cell` meters; the face x = 0 is fixed, making
// the block a cantilever along x. All tets are generated with positive volume.
TetMesh make_block_mesh(int nx, int ny, int nz, double cell);

// Per-element cluster labels: num_bands equal-width bands along x by element
// centroid.
std::vector<int> band_labels(const TetMesh& mesh, int num_bands);

// Vertices incident to boundary faces (faces used by exactly one tet), sorted.
std::vector<int> surface_vertices(const TetMesh& mesh);

// Surface vertices that are not fixed: the observed set for synthetic poses.
std::vector<int> observed_surface_vertices(const TetMesh& mesh);

// Gravity tilt angles in degrees for n poses: evenly spaced over [-60, 60]
// (just {0} for n = 1), reordered so the most-neutral angle comes first.
std::vector<double> default_pose_angles(int n);

struct SynthOptions {
    std::vector<double> angles_deg;  // tilt within the rotation plane
    double gravity_magnitude = 9.81;
    int plane = 0;  // 0: xz, 1: yz, 2: xy; gravity = |g| (sin t * e_a - cos t * e_b)
    double noise_std = 0.0;
    std::uint64_t seed = 0;
};

Vec3 tilted_gravity(double angle_deg, double magnitude, int plane);

struct SynthResult {
    std::vector<PoseObservation> poses;  // targets carry the additive noise
    std::vector<VecX> equilibria;        // noise-free equilibrium per pose
};

// Forward-simulates the rest shape under each tilted gravity and records the
// observed surface positions. Noise is drawn serially (pose-major, then
// vertex, then axis) from mt19937_64(seed) so output is reproducible.
SynthResult synthesize_poses(const TetMesh& mesh, const VecX& rest,
                             const MaterialModel& material, double density,
                             const SolverConfig& config, const SynthOptions& opts);

} // namespace elfin
