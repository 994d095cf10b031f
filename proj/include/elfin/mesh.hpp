#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "elfin/types.hpp"

namespace elfin {

/// Tetrahedral simulation mesh: rest-state nodes, connectivity and the set of
/// hard-constrained (fixed) vertices. Immutable after construction; safe to
/// share read-only across worker threads.
struct TetMesh {
    std::vector<Vec3> nodes;
    std::vector<std::array<int, 4>> tets;
    std::vector<int> fixed_vertices; // sorted, unique, 0-based

    int num_nodes() const { return static_cast<int>(nodes.size()); }
    int num_elements() const { return static_cast<int>(tets.size()); }

    /// Rest positions flattened to a 3n vector.
    VecX rest_positions() const;

    /// Per-node mask, true at fixed vertices.
    std::vector<bool> fixed_mask() const;

    /// Checks index ranges, positive rest volumes and the fixed set.
    /// Throws std::runtime_error on violation.
    void validate() const;
};

/// Signed volume of element e evaluated at the mesh rest positions.
double element_volume(const TetMesh& mesh, int e);

/// Signed volume of element e at arbitrary nodal positions (3n vector).
double element_volume(const TetMesh& mesh, const VecX& positions, int e);

/// Per-element material cluster weights. Rows are sparse (cluster id, weight)
/// pairs summing to one.
struct ClusterMap {
    int num_clusters = 0;
    std::vector<std::vector<std::pair<int, double>>> weights;
};

/// Interior elements keep their own label with weight 1; elements whose
/// vertex-adjacent neighborhood mixes labels get a uniform blend over the
/// distinct labels seen there (themselves included).
ClusterMap build_cluster_weights(const TetMesh& mesh,
                                 const std::vector<int>& labels,
                                 int num_clusters);

/// One observed static deformation: the gravity vector that produced it
/// (canonical frame, m/s^2) and target positions for a subset of surface
/// vertices.
struct PoseObservation {
    Vec3 gravity = Vec3::Zero();
    std::vector<int> observed_ids;
    std::vector<Vec3> targets;

    void validate(const TetMesh& mesh) const;
};

// --- file I/O ---------------------------------------------------------------

/// Loads a Tetgen ASCII .node/.ele pair (1-indexed). Indices are converted to
/// 0-based; fixed_vertices is left empty. Throws with the offending line
/// number on malformed input and rejects non-positive rest volumes.
TetMesh load_mesh(const std::string& node_path, const std::string& ele_path);

/// Writes the mesh back in Tetgen format. Coordinates use full precision so a
/// save/load round trip is bit-exact.
void save_mesh(const TetMesh& mesh, const std::string& node_path,
               const std::string& ele_path);

/// Writes node positions only (used for deformed states).
void save_node_file(const std::vector<Vec3>& nodes, const std::string& path);
void save_node_file(const VecX& positions, const std::string& path);
std::vector<Vec3> load_node_file(const std::string& path);

/// Flattens node positions to a 3n state vector.
VecX pack_nodes(const std::vector<Vec3>& nodes);

/// One 0-based node index per line; '#' starts a comment.
std::vector<int> load_fixed_vertices(const std::string& path, int num_nodes);

/// One cluster label per element per line, element order.
std::vector<int> load_labels(const std::string& path, int num_elements);

} // namespace elfin
