#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elfin/mesh.hpp"
#include "elfin/run_config.hpp"

namespace elfin {

/// Pose-set serialization: a single JSON document, top-level list, one entry
/// per pose with keys "gravity" [gx,gy,gz], "observed" [vertex ids...] and
/// "targets" [[x,y,z]...]. Gravity is already expressed in the canonical
/// frame; no rigid alignment happens here.
std::vector<PoseObservation> load_poses(const std::string& path);
void save_poses(const std::string& path, const std::vector<PoseObservation>& poses);

/// Cluster moduli JSON: {"format_version": 1, "cluster_E": [...]} in Pa.
std::vector<double> load_cluster_E_json(const std::string& path);
void save_cluster_E_json(const std::string& path, const std::vector<double>& cluster_E);

/// Writes content through a temp file and a rename, so a killed run never
/// leaves a truncated file under the final name.
void atomic_write_text(const std::string& path, const std::string& content);

struct ForwardArgs {
    Vec3 gravity_direction = Vec3(0, 0, -1);  // scaled to physics.gravity
    std::string moduli_path;                  // optional cluster-moduli JSON
};

struct SynthArgs {
    int cells_x = 10;  // long (cantilever) axis
    int cells_y = 2;
    int cells_z = 2;
    double cell_size = 0.01;  // meters
    int bands = 3;
    std::vector<double> true_E;      // per band, Pa; empty selects defaults
    int n_poses = 5;
    int plane = 0;                   // 0: xz, 1: yz, 2: xy
    double noise_std = 0.0;          // meters
    std::vector<double> angles_deg;  // explicit tilt angles override n_poses
    std::uint64_t seed = 0;
};

struct GradcheckArgs {
    int n_probes = 10;
    std::uint64_t seed = 0;
    bool corrupt_gradient = false;  // self-test hook: scales analytic by 1.02
};

int cmd_forward(const RunConfig& cfg, const ForwardArgs& args);
int cmd_synth(const RunConfig& cfg, const SynthArgs& args);
int cmd_invert(const RunConfig& cfg);
int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args);
int cmd_validate(const RunConfig& cfg, const std::string& heldout_poses_path);

} // namespace elfin
