#include <CLI11.hpp>

#include <iostream>

#include "vortexkam/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Quasi-periodic vortex waves: dispersion, measure estimates and KAM reduction"};
    app.require_subcommand(1, 1);

    std::string config_path, outdir;
    unsigned threads = 0;
    std::optional<std::uint64_t> seed;
    for (const auto& name : vortexkam::subcommands()) {
        auto* sub = app.add_subcommand(name, "run the '" + name + "' stage");
        sub->add_option("--config", config_path, "JSON configuration file")->required();
        sub->add_option("--out", outdir, "output directory")->required();
        sub->add_option("--threads", threads, "worker threads (default: VORTEXKAM_THREADS or all cores)");
        sub->add_option("--seed", seed, "override the configured seed");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : vortexkam::kExitValidation;
    }

    try {
        if (threads > 0) vortexkam::set_thread_budget(threads);
        auto cfg = vortexkam::parse_config(config_path);
        if (seed) cfg.seed = *seed;
        return vortexkam::run_subcommand(app.get_subcommands().front()->get_name(), cfg, outdir);
    } catch (const vortexkam::ValidationError& e) {
        std::cerr << "vortexkam: invalid input: " << e.what() << '\n';
        return vortexkam::kExitValidation;
    } catch (const vortexkam::DivergenceError& e) {
        std::cerr << "vortexkam: divergence: " << e.what() << '\n';
        return vortexkam::kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "vortexkam: " << e.what() << '\n';
        return 1;
    }
}
