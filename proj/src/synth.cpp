#include "elfin/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

namespace elfin {

TetMesh make_block_mesh(int nx, int ny, int nz, double cell) {
    if (nx < 1 || ny < 1 || nz < 1 || !(cell > 0.0))
        throw std::invalid_argument("make_block_mesh: need positive cell counts and size");
    TetMesh mesh;
    const auto node_id = [&](int i, int j, int k) {
        return (k * (ny + 1) + j) * (nx + 1) + i;
    };
    mesh.nodes.reserve((nx + 1) * (ny + 1) * (nz + 1));
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i <= nx; ++i)
                mesh.nodes.emplace_back(i * cell, j * cell, k * cell);

    const auto add_tet = [&](int p, int q, int r, int s) {
        Mat3 edges;
        edges.col(0) = mesh.nodes[q] - mesh.nodes[p];
        edges.col(1) = mesh.nodes[r] - mesh.nodes[p];
        edges.col(2) = mesh.nodes[s] - mesh.nodes[p];
        if (edges.determinant() < 0.0) std::swap(r, s);
        mesh.tets.push_back({p, q, r, s});
    };

    for (int k = 0; k < nz; ++k) {
        for (int j = 0; j < ny; ++j) {
            for (int i = 0; i < nx; ++i) {
                const int a = node_id(i, j, k), b = node_id(i + 1, j, k);
                const int c = node_id(i, j + 1, k), d = node_id(i + 1, j + 1, k);
                const int e = node_id(i, j, k + 1), f = node_id(i + 1, j, k + 1);
                const int g = node_id(i, j + 1, k + 1), h = node_id(i + 1, j + 1, k + 1);
                if ((i + j + k) % 2 == 0) {
                    add_tet(b, c, e, h);  // central
                    add_tet(a, b, c, e);
                    add_tet(d, b, c, h);
                    add_tet(f, b, e, h);
                    add_tet(g, c, e, h);
                } else {
                    add_tet(a, d, f, g);  // central, mirrored diagonals
                    add_tet(b, a, d, f);
                    add_tet(c, a, d, g);
                    add_tet(e, a, f, g);
                    add_tet(h, d, f, g);
                }
            }
        }
    }

    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j) mesh.fixed_vertices.push_back(node_id(0, j, k));
    std::sort(mesh.fixed_vertices.begin(), mesh.fixed_vertices.end());
    mesh.validate();
    return mesh;
}

std::vector<int> band_labels(const TetMesh& mesh, int num_bands) {
    if (num_bands < 1) throw std::invalid_argument("band_labels: need at least one band");
    double x_min = mesh.nodes.front().x(), x_max = x_min;
    for (const auto& p : mesh.nodes) {
        x_min = std::min(x_min, p.x());
        x_max = std::max(x_max, p.x());
    }
    const double span = std::max(x_max - x_min, 1e-300);
    std::vector<int> labels(mesh.num_elements());
    for (int e = 0; e < mesh.num_elements(); ++e) {
        Vec3 centroid = Vec3::Zero();
        for (int v : mesh.tets[e]) centroid += mesh.nodes[v];
        centroid /= 4.0;
        const double frac = (centroid.x() - x_min) / span;
        labels[e] = std::min(num_bands - 1, static_cast<int>(frac * num_bands));
    }
    return labels;
}

std::vector<int> surface_vertices(const TetMesh& mesh) {
    std::map<std::array<int, 3>, int> face_count;
    static const int face_verts[4][3] = {{1, 2, 3}, {0, 2, 3}, {0, 1, 3}, {0, 1, 2}};
    for (const auto& t : mesh.tets) {
        for (const auto& fv : face_verts) {
            std::array<int, 3> key = {t[fv[0]], t[fv[1]], t[fv[2]]};
            std::sort(key.begin(), key.end());
            ++face_count[key];
        }
    }
    std::set<int> verts;
    for (const auto& [key, count] : face_count) {
        if (count == 1) verts.insert(key.begin(), key.end());
    }
    return {verts.begin(), verts.end()};
}

std::vector<int> observed_surface_vertices(const TetMesh& mesh) {
    const auto fixed = mesh.fixed_mask();
    std::vector<int> out;
    for (int v : surface_vertices(mesh))
        if (!fixed[v]) out.push_back(v);
    return out;
}

std::vector<double> default_pose_angles(int n) {
    if (n < 1) throw std::invalid_argument("default_pose_angles: need at least one pose");
    if (n == 1) return {0.0};
    std::vector<double> angles(n);
    for (int i = 0; i < n; ++i) angles[i] = -60.0 + 120.0 * i / (n - 1);
    // Most-neutral pose first; the rest keep their order.
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (std::abs(angles[i]) < std::abs(angles[best])) best = i;
    std::vector<double> out;
    out.reserve(n);
    out.push_back(angles[best]);
    for (int i = 0; i < n; ++i)
        if (i != best) out.push_back(angles[i]);
    return out;
}

Vec3 tilted_gravity(double angle_deg, double magnitude, int plane) {
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double s = std::sin(t), c = std::cos(t);
    switch (plane) {
        case 0: return magnitude * Vec3(s, 0.0, -c);
        case 1: return magnitude * Vec3(0.0, s, -c);
        case 2: return magnitude * Vec3(s, -c, 0.0);
        default: throw std::invalid_argument("tilted_gravity: plane must be 0, 1, or 2");
    }
}

SynthResult synthesize_poses(const TetMesh& mesh, const VecX& rest,
                             const MaterialModel& material, double density,
                             const SolverConfig& config, const SynthOptions& opts) {
    if (opts.angles_deg.empty())
        throw std::invalid_argument("synthesize_poses: no angles given");
    const auto refs = build_element_refs(mesh, rest);
    const std::vector<int> observed = observed_surface_vertices(mesh);

    SynthResult result;
    for (size_t a = 0; a < opts.angles_deg.size(); ++a) {
        const Vec3 g = tilted_gravity(opts.angles_deg[a], opts.gravity_magnitude,
                                      opts.plane);
        SolverConfig cfg = config;
        if (!(cfg.residual_tol > 0.0))
            cfg.residual_tol = default_residual_tol(mesh, refs, g, density);
        const VecX f_ext = gravity_force(mesh, refs, g, density);
        // Warm-start each pose from the previous equilibrium.
        const VecX& x0 = result.equilibria.empty() ? rest : result.equilibria.back();
        EquilibriumState eq =
            solve_quasistatic(mesh, refs, rest, material, f_ext, x0, cfg);
        if (!eq.converged)
            throw std::runtime_error("synthesize_poses: pose " + std::to_string(a) +
                                     " (angle " + std::to_string(opts.angles_deg[a]) +
                                     " deg) did not converge");
        PoseObservation pose;
        pose.gravity = g;
        pose.observed_ids = observed;
        pose.targets.reserve(observed.size());
        for (int v : observed) pose.targets.push_back(eq.positions.segment<3>(3 * v));
        result.poses.push_back(std::move(pose));
        result.equilibria.push_back(std::move(eq.positions));
    }

    if (opts.noise_std > 0.0) {
        std::mt19937_64 rng(opts.seed);
        std::normal_distribution<double> gauss(0.0, opts.noise_std);
        for (auto& pose : result.poses)
            for (auto& target : pose.targets)
                for (int d = 0; d < 3; ++d) target[d] += gauss(rng);
    }
    return result;
}

} // namespace elfin
