#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elfin/commands.hpp"
#include "elfin/run_config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"elfin: static inverse elasticity on tetrahedral meshes"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir;
    int threads = -1;  // -1 keeps the config value
    std::uint64_t seed = 0;
    app.add_option("--config", config_path, "configuration file (section.key = value)");
    app.add_option("--output", output_dir, "output directory (overrides paths.output)");
    app.add_option("--threads", threads, "worker thread count, 0 = hardware concurrency");
    app.add_option("--seed", seed, "RNG seed for synthetic noise and probe selection");

    auto* forward =
        app.add_subcommand("forward", "solve one static equilibrium under gravity");
    std::vector<double> gravity_dir{0.0, 0.0, -1.0};
    elfin::ForwardArgs fargs;
    forward->add_option("--gravity", gravity_dir,
                        "gravity direction, scaled to physics.gravity")
        ->expected(3);
    forward->add_option("--moduli", fargs.moduli_path,
                        "cluster moduli JSON (default: homogeneous inverse.e_init)");

    auto* synth = app.add_subcommand("synth", "generate the synthetic benchmark");
    elfin::SynthArgs sargs;
    std::string cells = "2x2x10";
    std::string plane = "xz";
    synth->add_option("--cells", cells, "built-in block cells as WxHxL (default 2x2x10)");
    synth->add_option("--cell-size", sargs.cell_size, "cell edge length in meters");
    synth->add_option("--bands", sargs.bands, "cluster bands along the long axis");
    synth->add_option("--true-E", sargs.true_E, "ground-truth modulus per band in Pa");
    synth->add_option("--n-poses", sargs.n_poses,
                      "gravity poses, evenly tilted across [-60, 60] degrees");
    synth->add_option("--plane", plane, "rotation plane: xz, yz or xy");
    synth->add_option("--noise", sargs.noise_std,
                      "additive Gaussian target noise in meters");
    synth->add_option("--angles", sargs.angles_deg,
                      "explicit tilt angles in degrees (overrides --n-poses)");

    auto* invert = app.add_subcommand(
        "invert", "recover rest shape and cluster moduli from observed poses");

    auto* gradcheck = app.add_subcommand(
        "gradcheck", "compare analytic gradients against central finite differences");
    elfin::GradcheckArgs gargs;
    gradcheck->add_option("--probes", gargs.n_probes, "random probes per gradient block");
    gradcheck
        ->add_flag("--corrupt-gradient", gargs.corrupt_gradient,
                   "harness self-test: corrupt the analytic gradient")
        ->group("");

    auto* validate =
        app.add_subcommand("validate", "score the recovered model on held-out poses");
    std::string heldout;
    validate->add_option("--heldout", heldout, "held-out poses JSON")->required();

    // global flags remain usable after the subcommand name
    for (CLI::App* sub : {forward, synth, invert, gradcheck, validate}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        elfin::RunConfig cfg;
        if (!config_path.empty()) cfg = elfin::RunConfig::from_file(config_path);
        if (!output_dir.empty()) cfg.output_dir = output_dir;
        if (threads >= 0) cfg.threads = threads;

        if (forward->parsed()) {
            fargs.gravity_direction =
                elfin::Vec3(gravity_dir[0], gravity_dir[1], gravity_dir[2]);
            return elfin::cmd_forward(cfg, fargs);
        }
        if (synth->parsed()) {
            int w = 0, h = 0, l = 0;
            if (std::sscanf(cells.c_str(), "%dx%dx%d", &w, &h, &l) != 3)
                throw elfin::ConfigError("--cells: expected WxHxL, got '" + cells + "'");
            sargs.cells_y = w;
            sargs.cells_z = h;
            sargs.cells_x = l;
            if (plane == "xz") sargs.plane = 0;
            else if (plane == "yz") sargs.plane = 1;
            else if (plane == "xy") sargs.plane = 2;
            else
                throw elfin::ConfigError("--plane: expected xz, yz or xy, got '" + plane +
                                         "'");
            sargs.seed = seed;
            return elfin::cmd_synth(cfg, sargs);
        }
        if (invert->parsed()) return elfin::cmd_invert(cfg);
        if (gradcheck->parsed()) {
            gargs.seed = seed;
            return elfin::cmd_gradcheck(cfg, gargs);
        }
        if (validate->parsed()) return elfin::cmd_validate(cfg, heldout);
    } catch (const elfin::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
