#include "elfin/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "elfin/elasticity.hpp"
#include "elfin/forward.hpp"
#include "elfin/inverse.hpp"
#include "elfin/sensitivity.hpp"
#include "elfin/synth.hpp"

namespace elfin {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void require_path_set(const std::string& value, const char* key) {
    if (value.empty())
        throw ConfigError(std::string("config: ") + key + " is required for this command");
}

void require_file(const std::string& value, const char* key) {
    require_path_set(value, key);
    if (!fs::exists(value))
        throw ConfigError(std::string(key) + ": file not found: '" + value + "'");
}

void ensure_output_dir(const std::string& dir) {
    require_path_set(dir, "paths.output");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// Rename-into-place for writers that produced "<path>.tmp" on their own.
void commit_tmp(const std::string& final_path) {
    std::error_code ec;
    fs::rename(final_path + ".tmp", final_path, ec);
    if (ec)
        throw std::runtime_error("cannot move temp file into '" + final_path +
                                 "': " + ec.message());
}

TetMesh load_configured_mesh(const RunConfig& cfg) {
    require_file(cfg.node_path, "paths.node");
    require_file(cfg.ele_path, "paths.ele");
    require_file(cfg.fixed_path, "paths.fixed");
    TetMesh mesh = load_mesh(cfg.node_path, cfg.ele_path);
    mesh.fixed_vertices = load_fixed_vertices(cfg.fixed_path, mesh.num_nodes());
    mesh.validate();
    return mesh;
}

int count_clusters(const std::vector<int>& labels) {
    int n = 0;
    for (int l : labels) n = std::max(n, l + 1);
    return n;
}

MaterialModel homogeneous_material(const TetMesh& mesh, double young, double poisson) {
    MaterialModel m;
    m.cluster_E = VecX::Constant(1, young);
    m.clusters.num_clusters = 1;
    m.clusters.weights.assign(mesh.num_elements(), {{0, 1.0}});
    m.poisson = poisson;
    return m;
}

VecX to_vecx(const std::vector<double>& v) {
    VecX out(static_cast<int>(v.size()));
    for (int i = 0; i < out.size(); ++i) out[i] = v[i];
    return out;
}

VecX load_state(const std::string& path, int num_nodes, const char* key) {
    const auto nodes = load_node_file(path);
    if (static_cast<int>(nodes.size()) != num_nodes)
        throw ConfigError(std::string(key) + ": '" + path + "' has " +
                          std::to_string(nodes.size()) + " nodes, the mesh has " +
                          std::to_string(num_nodes));
    return pack_nodes(nodes);
}

std::vector<PoseObservation> load_validated_poses(const std::string& path,
                                                  const TetMesh& mesh) {
    auto poses = load_poses(path);
    if (poses.empty())
        throw ConfigError("poses file '" + path + "' contains no poses");
    for (std::size_t p = 0; p < poses.size(); ++p) {
        try {
            poses[p].validate(mesh);
        } catch (const std::exception& e) {
            throw ConfigError("poses file '" + path + "', pose " + std::to_string(p) +
                              ": " + e.what());
        }
    }
    return poses;
}

// Equilibrium under gravity with an arbitrary rest shape X (not mesh.nodes).
EquilibriumState solve_at_rest_shape(const TetMesh& mesh, const VecX& X,
                                     const MaterialModel& material, const Vec3& gravity,
                                     double density, SolverConfig solver,
                                     const VecX& x_init) {
    const auto refs = build_element_refs(mesh, X);
    if (solver.residual_tol <= 0.0)
        solver.residual_tol = default_residual_tol(mesh, refs, gravity, density);
    const VecX f = gravity_force(mesh, refs, gravity, density);
    return solve_quasistatic(mesh, refs, X, material, f, x_init, solver);
}

// Soft clamped end, stiff free end: the soft band carries the full bending
// moment, so every pose deforms visibly and all bands stay identifiable.
// Log-spaced for other band counts.
std::vector<double> default_true_E(int bands) {
    if (bands == 3) return {2e4, 2e5, 8e5};
    if (bands == 1) return {2e5};
    std::vector<double> E(bands);
    for (int i = 0; i < bands; ++i)
        E[i] = 2e4 * std::pow(8e5 / 2e4, static_cast<double>(i) / (bands - 1));
    return E;
}

} // namespace

void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        out << content;
        if (!content.empty() && content.back() != '\n') out << '\n';
        out.close();
        if (!out) throw std::runtime_error("write to '" + tmp + "' failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec)
        throw std::runtime_error("cannot move temp file into '" + path +
                                 "': " + ec.message());
}

std::vector<PoseObservation> load_poses(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open poses file '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse poses file '" + path + "': " + e.what());
    }
    if (!doc.is_array())
        throw ConfigError("poses file '" + path + "': top level must be a list");
    std::vector<PoseObservation> poses;
    poses.reserve(doc.size());
    for (std::size_t p = 0; p < doc.size(); ++p) {
        const std::string where = "poses file '" + path + "', pose " + std::to_string(p);
        const json& entry = doc[p];
        PoseObservation pose;
        try {
            const json& g = entry.at("gravity");
            if (!g.is_array() || g.size() != 3)
                throw ConfigError(where + ": gravity must be [gx, gy, gz]");
            for (int k = 0; k < 3; ++k) pose.gravity[k] = g[k].get<double>();
            for (const json& id : entry.at("observed"))
                pose.observed_ids.push_back(id.get<int>());
            for (const json& t : entry.at("targets")) {
                if (!t.is_array() || t.size() != 3)
                    throw ConfigError(where + ": targets must be [x, y, z] triples");
                pose.targets.emplace_back(t[0].get<double>(), t[1].get<double>(),
                                          t[2].get<double>());
            }
        } catch (const json::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
        if (pose.observed_ids.size() != pose.targets.size())
            throw ConfigError(where + ": observed and targets lengths differ");
        poses.push_back(std::move(pose));
    }
    return poses;
}

void save_poses(const std::string& path, const std::vector<PoseObservation>& poses) {
    json doc = json::array();
    for (const auto& pose : poses) {
        json entry;
        entry["gravity"] = {pose.gravity[0], pose.gravity[1], pose.gravity[2]};
        entry["observed"] = pose.observed_ids;
        json targets = json::array();
        for (const auto& t : pose.targets) targets.push_back({t[0], t[1], t[2]});
        entry["targets"] = std::move(targets);
        doc.push_back(std::move(entry));
    }
    atomic_write_text(path, doc.dump(1));
}

std::vector<double> load_cluster_E_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open moduli file '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
        return doc.at("cluster_E").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse moduli file '" + path + "': " + e.what());
    }
}

void save_cluster_E_json(const std::string& path, const std::vector<double>& cluster_E) {
    json doc;
    doc["format_version"] = 1;
    doc["cluster_E"] = cluster_E;
    atomic_write_text(path, doc.dump(1));
}

int cmd_forward(const RunConfig& cfg, const ForwardArgs& args) {
    const TetMesh mesh = load_configured_mesh(cfg);
    ensure_output_dir(cfg.output_dir);

    MaterialModel material;
    if (!args.moduli_path.empty()) {
        require_file(args.moduli_path, "--moduli");
        require_file(cfg.labels_path, "paths.labels");
        const auto labels = load_labels(cfg.labels_path, mesh.num_elements());
        const int nc = count_clusters(labels);
        const auto E = load_cluster_E_json(args.moduli_path);
        if (static_cast<int>(E.size()) != nc)
            throw ConfigError("--moduli: " + std::to_string(E.size()) + " moduli for " +
                              std::to_string(nc) + " clusters");
        material.cluster_E = to_vecx(E);
        material.clusters = build_cluster_weights(mesh, labels, nc);
        material.poisson = cfg.poisson;
    } else {
        material = homogeneous_material(mesh, cfg.inverse.e_init, cfg.poisson);
    }

    Vec3 gravity = Vec3::Zero();
    const double dir_norm = args.gravity_direction.norm();
    if (dir_norm > 0.0) gravity = args.gravity_direction * (cfg.gravity_magnitude / dir_norm);

    const VecX rest = mesh.rest_positions();
    const auto refs = build_element_refs(mesh, rest);
    SolverConfig solver = cfg.solver;
    if (solver.residual_tol <= 0.0)
        solver.residual_tol = default_residual_tol(mesh, refs, gravity, cfg.density);
    const VecX f = gravity_force(mesh, refs, gravity, cfg.density);
    const EquilibriumState eq = solve_quasistatic(mesh, refs, rest, material, f, rest, solver);

    const std::string node_out = join_path(cfg.output_dir, "deformed.node");
    save_node_file(eq.positions, node_out + ".tmp");
    commit_tmp(node_out);

    json diag;
    diag["format_version"] = 1;
    diag["converged"] = eq.converged;
    diag["iterations"] = eq.iterations;
    diag["residual"] = eq.residual_norm;
    diag["residual_tol"] = solver.residual_tol;
    diag["energy"] = total_energy(mesh, refs, eq.positions, material, solver.inversion_threshold);
    diag["tikhonov_shift"] = eq.tikhonov_shift;
    diag["gravity"] = {gravity[0], gravity[1], gravity[2]};
    atomic_write_text(join_path(cfg.output_dir, "forward_diagnostics.json"), diag.dump(1));

    std::printf("forward: %s in %d iterations, residual %.3e (tol %.3e)\n",
                eq.converged ? "converged" : "NOT converged", eq.iterations,
                eq.residual_norm, solver.residual_tol);
    if (!eq.converged) {
        std::fprintf(stderr,
                     "error: forward solve did not converge: residual %.6e > tol %.6e "
                     "after %d iterations\n",
                     eq.residual_norm, solver.residual_tol, eq.iterations);
        return 1;
    }
    return 0;
}

int cmd_synth(const RunConfig& cfg, const SynthArgs& args) {
    ensure_output_dir(cfg.output_dir);

    TetMesh mesh;
    std::vector<int> labels;
    if (!cfg.node_path.empty() || !cfg.ele_path.empty()) {
        mesh = load_configured_mesh(cfg);
        require_file(cfg.labels_path, "paths.labels");
        labels = load_labels(cfg.labels_path, mesh.num_elements());
    } else {
        if (args.cells_x < 1 || args.cells_y < 1 || args.cells_z < 1)
            throw ConfigError("--cells: every dimension must be >= 1");
        if (args.bands < 1) throw ConfigError("--bands must be >= 1");
        if (args.cell_size <= 0.0) throw ConfigError("--cell-size must be > 0");
        mesh = make_block_mesh(args.cells_x, args.cells_y, args.cells_z, args.cell_size);
        labels = band_labels(mesh, args.bands);
    }
    const int nc = count_clusters(labels);

    const std::vector<double> true_E =
        args.true_E.empty() ? default_true_E(nc) : args.true_E;
    if (static_cast<int>(true_E.size()) != nc)
        throw ConfigError("--true-E: " + std::to_string(true_E.size()) + " values for " +
                          std::to_string(nc) + " clusters");
    for (double E : true_E)
        if (E < cfg.inverse.p_lower || E > cfg.inverse.p_upper)
            throw ConfigError("--true-E: " + fmt17(E) + " Pa outside [" +
                              fmt17(cfg.inverse.p_lower) + ", " +
                              fmt17(cfg.inverse.p_upper) + "]");
    if (args.noise_std < 0.0) throw ConfigError("--noise must be >= 0");

    MaterialModel material;
    material.cluster_E = to_vecx(true_E);
    material.clusters = build_cluster_weights(mesh, labels, nc);
    material.poisson = cfg.poisson;

    SynthOptions opts;
    if (!args.angles_deg.empty()) {
        opts.angles_deg = args.angles_deg;
    } else {
        if (args.n_poses < 1) throw ConfigError("--n-poses must be >= 1");
        opts.angles_deg = default_pose_angles(args.n_poses);
    }
    opts.gravity_magnitude = cfg.gravity_magnitude;
    opts.plane = args.plane;
    opts.noise_std = args.noise_std;
    opts.seed = args.seed;

    const VecX rest = mesh.rest_positions();
    const SynthResult result =
        synthesize_poses(mesh, rest, material, cfg.density, cfg.solver, opts);

    const std::string node_out = join_path(cfg.output_dir, "mesh.node");
    const std::string ele_out = join_path(cfg.output_dir, "mesh.ele");
    save_mesh(mesh, node_out + ".tmp", ele_out + ".tmp");
    commit_tmp(node_out);
    commit_tmp(ele_out);

    std::ostringstream fixed_txt;
    fixed_txt << "# fixed vertex ids, 0-based\n";
    for (int v : mesh.fixed_vertices) fixed_txt << v << "\n";
    atomic_write_text(join_path(cfg.output_dir, "fixed.txt"), fixed_txt.str());

    std::ostringstream labels_txt;
    for (int l : labels) labels_txt << l << "\n";
    atomic_write_text(join_path(cfg.output_dir, "labels.txt"), labels_txt.str());

    const std::string truth_node = join_path(cfg.output_dir, "truth_rest.node");
    save_node_file(mesh.nodes, truth_node + ".tmp");
    commit_tmp(truth_node);

    save_poses(join_path(cfg.output_dir, "poses.json"), result.poses);

    // Full noise-free equilibrium of the first (most neutral) pose; inversion
    // uses it as the observed neutral shape.
    const std::string neutral_out = join_path(cfg.output_dir, "observed_neutral.node");
    save_node_file(result.equilibria.front(), neutral_out + ".tmp");
    commit_tmp(neutral_out);

    json truth;
    truth["format_version"] = 1;
    truth["cluster_E"] = true_E;
    json rest_positions = json::array();
    for (const auto& p : mesh.nodes) rest_positions.push_back({p[0], p[1], p[2]});
    truth["rest_positions"] = std::move(rest_positions);
    atomic_write_text(join_path(cfg.output_dir, "truth.json"), truth.dump(1));

    RunConfig bench = cfg;
    bench.node_path = fs::absolute(node_out).string();
    bench.ele_path = fs::absolute(ele_out).string();
    bench.fixed_path = fs::absolute(join_path(cfg.output_dir, "fixed.txt")).string();
    bench.labels_path = fs::absolute(join_path(cfg.output_dir, "labels.txt")).string();
    bench.poses_path = fs::absolute(join_path(cfg.output_dir, "poses.json")).string();
    bench.observed_node_path = fs::absolute(neutral_out).string();
    bench.output_dir = fs::absolute(cfg.output_dir).string();
    atomic_write_text(join_path(cfg.output_dir, "benchmark.cfg"), bench.to_config_text());

    double sag = 0.0;
    for (int v = 0; v < mesh.num_nodes(); ++v)
        sag = std::max(sag, (node_of(result.equilibria.front(), v) - mesh.nodes[v]).norm());
    std::printf("synth: %d nodes, %d tets, %d clusters, %zu poses -> %s\n",
                mesh.num_nodes(), mesh.num_elements(), nc, result.poses.size(),
                cfg.output_dir.c_str());
    std::printf("synth: neutral-pose max displacement %.4e m, %zu observed vertices per pose\n",
                sag, result.poses.front().observed_ids.size());
    return 0;
}

int cmd_invert(const RunConfig& cfg) {
    const TetMesh mesh = load_configured_mesh(cfg);
    require_file(cfg.labels_path, "paths.labels");
    require_file(cfg.poses_path, "paths.poses");
    require_file(cfg.observed_node_path, "paths.observed_node");
    ensure_output_dir(cfg.output_dir);

    const auto labels = load_labels(cfg.labels_path, mesh.num_elements());
    const int nc = count_clusters(labels);
    const auto poses = load_validated_poses(cfg.poses_path, mesh);
    const VecX observed =
        load_state(cfg.observed_node_path, mesh.num_nodes(), "paths.observed_node");
    try {
        cfg.inverse.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    const int threads = resolve_threads(cfg.threads);
    const auto t0 = std::chrono::steady_clock::now();
    const InversionResult result =
        block_coordinate_descent(mesh, poses, observed, labels, nc, cfg.inverse,
                                 cfg.solver, cfg.density, cfg.poisson, threads);
    const double runtime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const std::string rest_out = join_path(cfg.output_dir, "recovered_rest.node");
    save_node_file(result.rest_shape, rest_out + ".tmp");
    commit_tmp(rest_out);

    std::vector<double> E(result.cluster_E.data(),
                          result.cluster_E.data() + result.cluster_E.size());
    save_cluster_E_json(join_path(cfg.output_dir, "cluster_E.json"), E);

    std::vector<std::string> columns = {"phase", "iter",      "objective", "data_term",
                                        "reg_term", "grad_norm", "step"};
    for (int c = 0; c < nc; ++c) columns.push_back("E_" + std::to_string(c));

    std::ostringstream csv;
    for (std::size_t i = 0; i < columns.size(); ++i)
        csv << (i ? "," : "") << columns[i];
    csv << "\n";
    for (const auto& row : result.history) {
        csv << row.phase << "," << row.iter << "," << fmt17(row.objective) << ","
            << fmt17(row.data_term) << "," << fmt17(row.reg_term) << ","
            << fmt17(row.grad_norm) << "," << fmt17(row.step);
        for (int c = 0; c < row.cluster_E.size(); ++c) csv << "," << fmt17(row.cluster_E[c]);
        csv << "\n";
    }
    atomic_write_text(join_path(cfg.output_dir, "history.csv"), csv.str());

    json meta;
    meta["format_version"] = 1;
    meta["config"] = cfg.to_key_values();
    meta["alpha_used"] = result.alpha_used;
    meta["runtime_seconds"] = runtime;
    meta["threads"] = threads;
    meta["converged"] = result.converged;
    meta["reason"] = result.reason;
    meta["history_columns"] = columns;
    meta["validation_columns"] = {"configuration", "pose", "total_error",
                                  "mean_vertex_error"};
    atomic_write_text(join_path(cfg.output_dir, "metadata.json"), meta.dump(1));

    std::printf("invert: %s (%s), %zu history rows, %.1f s, alpha %.6e\n",
                result.converged ? "converged" : "stopped", result.reason.c_str(),
                result.history.size(), runtime, result.alpha_used);
    if (!result.history.empty())
        std::printf("invert: final objective %.9e\n", result.history.back().objective);
    for (int c = 0; c < result.cluster_E.size(); ++c)
        std::printf("invert: cluster %d E = %.6e Pa\n", c, result.cluster_E[c]);
    return result.converged ? 0 : 1;
}

int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args) {
    const TetMesh mesh = load_configured_mesh(cfg);
    require_file(cfg.labels_path, "paths.labels");
    require_file(cfg.poses_path, "paths.poses");
    if (args.n_probes < 1) throw ConfigError("--probes must be >= 1");

    const auto labels = load_labels(cfg.labels_path, mesh.num_elements());
    const int nc = count_clusters(labels);
    const auto poses = load_validated_poses(cfg.poses_path, mesh);

    if (mesh.num_elements() > 5000)
        std::fprintf(stderr,
                     "warning: %d elements; each probe costs two full multi-pose solves, "
                     "expect a long run\n",
                     mesh.num_elements());

    const VecX X = mesh.rest_positions();
    MaterialModel material;
    material.cluster_E = VecX::Constant(nc, cfg.inverse.e_init);
    material.clusters = build_cluster_weights(mesh, labels, nc);
    material.poisson = cfg.poisson;

    ObjectiveSetup setup;
    setup.alpha = cfg.inverse.alpha < 0.0 ? 0.0 : cfg.inverse.alpha;
    setup.X0 = cfg.observed_node_path.empty()
                   ? X
                   : load_state(cfg.observed_node_path, mesh.num_nodes(),
                                "paths.observed_node");
    setup.material0 = material;
    setup.density = cfg.density;
    setup.threads = resolve_threads(cfg.threads);
    setup.solver = cfg.solver;
    {
        // Solver error enters the finite differences directly, so tighten the
        // residual tolerance well below the probe step scale.
        const auto refs = build_element_refs(mesh, X);
        double tol = setup.solver.residual_tol;
        if (tol <= 0.0)
            tol = default_residual_tol(mesh, refs, poses.front().gravity, cfg.density);
        setup.solver.residual_tol = tol / 100.0;
    }

    const ObjectiveReport base = evaluate_objective(mesh, X, material, poses, setup,
                                                    nullptr, true);

    const double grad_inf = std::max(base.grad_clusters.lpNorm<Eigen::Infinity>(),
                                     base.grad_rest.lpNorm<Eigen::Infinity>());
    if (grad_inf < 1e-9 * std::max(1.0, std::abs(base.value))) {
        std::printf("gradcheck: at optimum (gradient inf-norm %.3e); "
                    "finite-difference comparison skipped\n",
                    grad_inf);
        return 0;
    }

    const double corrupt = args.corrupt_gradient ? 1.02 : 1.0;

    std::vector<VecX> base_warm;
    base_warm.reserve(base.equilibria.size());
    for (const auto& eq : base.equilibria) base_warm.push_back(eq.positions);

    const auto value_at = [&](const VecX& Xp, const MaterialModel& mp) {
        std::vector<VecX> warm = base_warm;
        return evaluate_objective(mesh, Xp, mp, poses, setup, &warm, false).value;
    };

    std::mt19937_64 rng(args.seed);
    const std::vector<bool> fixed = mesh.fixed_mask();
    std::vector<int> free_vertices;
    for (int v = 0; v < mesh.num_nodes(); ++v)
        if (!fixed[v]) free_vertices.push_back(v);
    if (free_vertices.empty())
        throw ConfigError("gradient check needs at least one free vertex");

    Vec3 lo = mesh.nodes.front(), hi = mesh.nodes.front();
    for (const auto& p : mesh.nodes) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const double diameter = (hi - lo).norm();
    const double h_rest = 1e-5 * (diameter > 0.0 ? diameter : 1.0);

    double max_rel = 0.0;
    std::printf("%-8s %6s %22s %22s %10s\n", "probe", "index", "analytic", "central-fd",
                "rel-err");
    std::uniform_int_distribution<int> cluster_dist(0, nc - 1);
    for (int k = 0; k < args.n_probes; ++k) {
        const int c = cluster_dist(rng);
        const double h = 1e-5 * material.cluster_E[c];
        MaterialModel mp = material;
        mp.cluster_E[c] = material.cluster_E[c] + h;
        const double fp = value_at(X, mp);
        mp.cluster_E[c] = material.cluster_E[c] - h;
        const double fm = value_at(X, mp);
        const double fd = (fp - fm) / (2.0 * h);
        const double an = corrupt * base.grad_clusters[c];
        const double rel =
            std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12});
        max_rel = std::max(max_rel, rel);
        std::printf("%-8s %6d %22.15e %22.15e %10.3e\n", "cluster", c, an, fd, rel);
    }
    std::uniform_int_distribution<std::size_t> vert_dist(0, free_vertices.size() - 1);
    std::uniform_int_distribution<int> axis_dist(0, 2);
    for (int k = 0; k < args.n_probes; ++k) {
        const int v = free_vertices[vert_dist(rng)];
        const int axis = axis_dist(rng);
        const int dof = 3 * v + axis;
        VecX Xp = X;
        Xp[dof] = X[dof] + h_rest;
        const double fp = value_at(Xp, material);
        Xp[dof] = X[dof] - h_rest;
        const double fm = value_at(Xp, material);
        const double fd = (fp - fm) / (2.0 * h_rest);
        const double an = corrupt * base.grad_rest[dof];
        const double rel =
            std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12});
        max_rel = std::max(max_rel, rel);
        std::printf("%-8s %6d %22.15e %22.15e %10.3e  (vertex %d axis %d)\n", "rest",
                    dof, an, fd, rel, v, axis);
    }
    std::printf("gradcheck: max relative error %.3e (threshold 1e-3)\n", max_rel);
    if (!(max_rel <= 1e-3)) {
        std::fprintf(stderr, "error: gradient check failed: max relative error %.3e > 1e-3\n",
                     max_rel);
        return 1;
    }
    return 0;
}

int cmd_validate(const RunConfig& cfg, const std::string& heldout_poses_path) {
    const TetMesh mesh = load_configured_mesh(cfg);
    require_file(cfg.labels_path, "paths.labels");
    require_file(cfg.observed_node_path, "paths.observed_node");
    ensure_output_dir(cfg.output_dir);
    require_file(heldout_poses_path, "held-out poses file");

    const auto labels = load_labels(cfg.labels_path, mesh.num_elements());
    const int nc = count_clusters(labels);
    const auto heldout = load_validated_poses(heldout_poses_path, mesh);

    const std::string rest_path = join_path(cfg.output_dir, "recovered_rest.node");
    const std::string moduli_path = join_path(cfg.output_dir, "cluster_E.json");
    require_file(rest_path, "recovered rest shape (run invert first)");
    require_file(moduli_path, "recovered moduli (run invert first)");

    const VecX X_inverted = load_state(rest_path, mesh.num_nodes(), "recovered rest shape");
    const auto E_rec = load_cluster_E_json(moduli_path);
    if (static_cast<int>(E_rec.size()) != nc)
        throw ConfigError("moduli file '" + moduli_path + "' has " +
                          std::to_string(E_rec.size()) + " moduli for " +
                          std::to_string(nc) + " clusters");

    const ClusterMap clusters = build_cluster_weights(mesh, labels, nc);
    const MaterialModel inverted{to_vecx(E_rec), clusters, cfg.poisson};
    const VecX X_naive =
        load_state(cfg.observed_node_path, mesh.num_nodes(), "paths.observed_node");
    const MaterialModel naive{VecX::Constant(nc, cfg.naive_E), clusters, cfg.poisson};

    struct Candidate {
        const char* name;
        const VecX* X;
        const MaterialModel* material;
    };
    const Candidate candidates[] = {{"inverted", &X_inverted, &inverted},
                                    {"naive", &X_naive, &naive}};

    std::ostringstream csv;
    csv << "configuration,pose,total_error,mean_vertex_error\n";
    std::printf("%-13s %5s %15s %18s\n", "configuration", "pose", "total_error",
                "mean_vertex_error");
    for (const Candidate& cand : candidates) {
        double sum_total = 0.0;
        long sum_count = 0;
        for (std::size_t p = 0; p < heldout.size(); ++p) {
            const auto& pose = heldout[p];
            const EquilibriumState eq =
                solve_at_rest_shape(mesh, *cand.X, *cand.material, pose.gravity,
                                    cfg.density, cfg.solver, *cand.X);
            if (!eq.converged) {
                std::fprintf(stderr,
                             "warning: %s pose %zu: solve did not converge "
                             "(residual %.3e); recorded as nan\n",
                             cand.name, p, eq.residual_norm);
                csv << cand.name << "," << p << ",nan,nan\n";
                std::printf("%-13s %5zu %15s %18s\n", cand.name, p, "nan", "nan");
                continue;
            }
            double total = 0.0;
            for (std::size_t i = 0; i < pose.observed_ids.size(); ++i)
                total += (node_of(eq.positions, pose.observed_ids[i]) - pose.targets[i]).norm();
            const double mean = total / static_cast<double>(pose.observed_ids.size());
            sum_total += total;
            sum_count += static_cast<long>(pose.observed_ids.size());
            csv << cand.name << "," << p << "," << fmt17(total) << "," << fmt17(mean)
                << "\n";
            std::printf("%-13s %5zu %15.6e %18.6e\n", cand.name, p, total, mean);
        }
        const double agg_mean = sum_count > 0
                                    ? sum_total / static_cast<double>(sum_count)
                                    : std::numeric_limits<double>::quiet_NaN();
        csv << cand.name << ",all," << fmt17(sum_total) << "," << fmt17(agg_mean) << "\n";
        std::printf("%-13s %5s %15.6e %18.6e\n", cand.name, "all", sum_total, agg_mean);
    }
    atomic_write_text(join_path(cfg.output_dir, "validation.csv"), csv.str());
    return 0;
}

} // namespace elfin
