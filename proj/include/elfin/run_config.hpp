#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "elfin/forward.hpp"
#include "elfin/inverse.hpp"

namespace elfin {

// Configuration or input-file problems; the CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat "section.key = value" configuration with # comments. Every non-path
// field has a default; paths default to empty and are required per command.
struct RunConfig {
    std::string node_path;
    std::string ele_path;
    std::string fixed_path;
    std::string labels_path;
    std::string poses_path;
    std::string observed_node_path;
    std::string output_dir;

    double density = 1000.0;           // kg/m^3
    double gravity_magnitude = 9.81;   // m/s^2
    double poisson = 0.43;

    SolverConfig solver;    // residual_tol < 0 means force-scale default
    InverseConfig inverse;  // alpha < 0 means calibrated default

    double naive_E = 2e4;  // homogeneous soft baseline for validation

    int threads = 1;  // 0 means hardware concurrency

    static RunConfig from_file(const std::string& path);
    static RunConfig from_string(const std::string& text, const std::string& origin);
    static RunConfig from_key_values(const std::map<std::string, std::string>& kv);

    // Canonical echo: parsing it back yields an identical RunConfig.
    std::map<std::string, std::string> to_key_values() const;
    std::string to_config_text() const;
};

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.to_key_values() == b.to_key_values();
}

int resolve_threads(int threads_field);

} // namespace elfin
