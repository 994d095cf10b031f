#include "elfin/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>
#include <vector>

namespace elfin {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value +
                          "' as a number");
    }
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value +
                          "' as an integer");
    }
}

// "auto" maps to the sentinel; otherwise a plain number.
double parse_double_or_auto(const std::string& key, const std::string& value,
                            double sentinel) {
    if (value == "auto") return sentinel;
    return parse_double(key, value);
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "paths.node") cfg.node_path = value;
    else if (key == "paths.ele") cfg.ele_path = value;
    else if (key == "paths.fixed") cfg.fixed_path = value;
    else if (key == "paths.labels") cfg.labels_path = value;
    else if (key == "paths.poses") cfg.poses_path = value;
    else if (key == "paths.observed_node") cfg.observed_node_path = value;
    else if (key == "paths.output") cfg.output_dir = value;
    else if (key == "physics.density") cfg.density = parse_double(key, value);
    else if (key == "physics.gravity") cfg.gravity_magnitude = parse_double(key, value);
    else if (key == "physics.poisson") cfg.poisson = parse_double(key, value);
    else if (key == "solver.residual_tol")
        cfg.solver.residual_tol = parse_double_or_auto(key, value, -1.0);
    else if (key == "solver.max_newton_iters")
        cfg.solver.max_newton_iters = parse_int(key, value);
    else if (key == "solver.inversion_threshold")
        cfg.solver.inversion_threshold = parse_double(key, value);
    else if (key == "inverse.alpha")
        cfg.inverse.alpha = parse_double_or_auto(key, value, -1.0);
    else if (key == "inverse.p_lower") cfg.inverse.p_lower = parse_double(key, value);
    else if (key == "inverse.p_upper") cfg.inverse.p_upper = parse_double(key, value);
    else if (key == "inverse.e_init") cfg.inverse.e_init = parse_double(key, value);
    else if (key == "inverse.wolfe_gamma")
        cfg.inverse.wolfe_gamma = parse_double(key, value);
    else if (key == "inverse.material_max_iters")
        cfg.inverse.material_max_iters = parse_int(key, value);
    else if (key == "inverse.restshape_max_iters")
        cfg.inverse.restshape_max_iters = parse_int(key, value);
    else if (key == "inverse.bcd_max_outer")
        cfg.inverse.bcd_max_outer = parse_int(key, value);
    else if (key == "inverse.bcd_rel_tol")
        cfg.inverse.bcd_rel_tol = parse_double(key, value);
    else if (key == "inverse.grad_tol_material")
        cfg.inverse.grad_tol_material = parse_double(key, value);
    else if (key == "inverse.grad_tol_rest")
        cfg.inverse.grad_tol_rest = parse_double(key, value);
    else if (key == "validate.naive_E") cfg.naive_E = parse_double(key, value);
    else if (key == "threads")
        cfg.threads = (value == "auto") ? 0 : parse_int(key, value);
    else
        throw ConfigError("unknown config key '" + key + "'");
}

} // namespace

RunConfig RunConfig::from_string(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + trim(raw) + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            apply_key(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path);
}

RunConfig RunConfig::from_key_values(const std::map<std::string, std::string>& kv) {
    RunConfig cfg;
    for (const auto& [key, value] : kv) apply_key(cfg, key, value);
    return cfg;
}

std::map<std::string, std::string> RunConfig::to_key_values() const {
    std::map<std::string, std::string> kv;
    kv["paths.node"] = node_path;
    kv["paths.ele"] = ele_path;
    kv["paths.fixed"] = fixed_path;
    kv["paths.labels"] = labels_path;
    kv["paths.poses"] = poses_path;
    kv["paths.observed_node"] = observed_node_path;
    kv["paths.output"] = output_dir;
    kv["physics.density"] = format_double(density);
    kv["physics.gravity"] = format_double(gravity_magnitude);
    kv["physics.poisson"] = format_double(poisson);
    kv["solver.residual_tol"] =
        solver.residual_tol < 0.0 ? "auto" : format_double(solver.residual_tol);
    kv["solver.max_newton_iters"] = std::to_string(solver.max_newton_iters);
    kv["solver.inversion_threshold"] = format_double(solver.inversion_threshold);
    kv["inverse.alpha"] = inverse.alpha < 0.0 ? "auto" : format_double(inverse.alpha);
    kv["inverse.p_lower"] = format_double(inverse.p_lower);
    kv["inverse.p_upper"] = format_double(inverse.p_upper);
    kv["inverse.e_init"] = format_double(inverse.e_init);
    kv["inverse.wolfe_gamma"] = format_double(inverse.wolfe_gamma);
    kv["inverse.material_max_iters"] = std::to_string(inverse.material_max_iters);
    kv["inverse.restshape_max_iters"] = std::to_string(inverse.restshape_max_iters);
    kv["inverse.bcd_max_outer"] = std::to_string(inverse.bcd_max_outer);
    kv["inverse.bcd_rel_tol"] = format_double(inverse.bcd_rel_tol);
    kv["inverse.grad_tol_material"] = format_double(inverse.grad_tol_material);
    kv["inverse.grad_tol_rest"] = format_double(inverse.grad_tol_rest);
    kv["validate.naive_E"] = format_double(naive_E);
    kv["threads"] = threads == 0 ? "auto" : std::to_string(threads);
    return kv;
}

std::string RunConfig::to_config_text() const {
    std::ostringstream out;
    for (const auto& [key, value] : to_key_values()) out << key << " = " << value << "\n";
    return out.str();
}

int resolve_threads(int threads_field) {
    if (threads_field > 0) return threads_field;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

} // namespace elfin
