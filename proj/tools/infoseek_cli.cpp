#include "infoseek/scenario.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

int main(int argc, char** argv) {
    using namespace infoseek;
    CLI::App app{"Distributed estimation and information-seeking control simulator"};
    app.require_subcommand(1);

    std::string mode, scheme, out = "out", config_path;
    std::size_t runs = 0, steps = 0, J = 0, Jp = 0, Jc = 0, R = 0, threads = 0;
    std::uint64_t seed = 0;
    bool paper_scale = false, dump_config = false;

    for (const char* name : {"noncoop", "coop", "coslat"}) {
        auto* sub = app.add_subcommand(name, std::string("run the ") + name + " scenario");
        sub->add_option("--config", config_path, "JSON config; its scenario must match the subcommand");
        sub->add_option("--mode", mode, "CC, NC or CN");
        sub->add_option("--scheme", scheme, "flooding or consensus");
        sub->add_option("--runs", runs, "Monte Carlo runs");
        sub->add_option("--steps", steps, "time steps per run");
        sub->add_option("--seed", seed, "base seed");
        sub->add_option("--j", J, "estimation samples per CA");
        sub->add_option("--jc", Jc, "control-layer samples");
        sub->add_option("--jprime", Jp, "measurement draws per control sample");
        sub->add_option("--consensus-iters", R, "average-consensus iterations");
        sub->add_option("--threads", threads, "worker threads for independent runs");
        sub->add_flag("--paper-scale", paper_scale, "use the full sample counts and run counts");
        sub->add_option("--out", out, "output directory for CSV files");
        sub->add_flag("--dump-config", dump_config, "print the effective config as JSON and exit");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    ScenarioConfig cfg;
    const std::string which = app.get_subcommands().front()->get_name();
    try {
        if (!config_path.empty()) {
            cfg = load_config(config_path);
            if (cfg.scenario != which)
                throw ConfigError("config describes scenario '" + cfg.scenario + "' but subcommand is '" + which + "'");
        } else {
            cfg = preset(which);
        }
        if (paper_scale) apply_paper_scale(cfg);
        if (!mode.empty()) cfg.mode = parse_mode(mode);
        if (!scheme.empty()) cfg.scheme = parse_scheme(scheme);
        if (runs) cfg.runs = runs;
        if (steps) cfg.steps = steps;
        if (seed) cfg.seed = seed;
        if (J) cfg.J = J;
        if (Jc) cfg.J_control = Jc;
        if (Jp) cfg.J_prime = Jp;
        if (R) cfg.R = R;
        if (threads) cfg.threads = threads;
        cfg.validate();
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    if (dump_config) {
        std::cout << config_to_json(cfg).dump(2) << "\n";
        return 0;
    }

    try {
        const auto t0 = std::chrono::steady_clock::now();
        auto res = run_scenario(cfg);
        emit_csv(res, out);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << which << " mode=" << mode_name(cfg.mode) << " runs=" << cfg.runs << " steps=" << cfg.steps
                  << " wrote " << out << " in " << secs << " s\n";
        const auto& last = res.self_rmse.back();
        std::cerr << "final self RMSE " << last;
        if (!std::isnan(res.target_rmse.back())) std::cerr << ", target RMSE " << res.target_rmse.back();
        std::cerr << "\n";
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
