// Command-line front end for the study runner. Precedence, lowest to highest:
// built-in defaults, --config file, --set overrides, HOMOG_OUT, explicit
// flags, and finally the subcommand name (which pins the study kind).

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "homog/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"numerical laboratory for fluctuations in stochastic homogenization"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string seed_text, workers_text, out_text;
    app.add_option("--config", config_path, "configuration file (key = value lines)");
    app.add_option("--set", overrides, "override one key, as key=value (repeatable)")->type_name("KEY=VALUE");
    app.add_option("--seed", seed_text, "master seed (overrides config)");
    app.add_option("--workers", workers_text, "worker threads, 0 = auto (overrides config)");
    app.add_option("--out", out_text, "output directory (overrides config and HOMOG_OUT)");

    const char* names[] = {"verify", "rve", "gk", "clt", "pathwise", "normality", "moments"};
    const char* descs[] = {"run the identity and oracle checks",
                           "estimate the fluctuation tensor Q by box statistics",
                           "windowed covariance estimate of Q on a doubled torus",
                           "distributions of the commutator functionals J0/J1/J2",
                           "solution functionals, two-scale error, and the duality identity",
                           "normality metrics of the homogenized coefficient",
                           "corrector second moments across sides"};
    // global flags remain valid after the subcommand name
    for (int i = 0; i < 7; ++i) app.add_subcommand(names[i], descs[i])->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        homog::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = homog::ExperimentConfig::from_file(config_path);
        for (const auto& kv : overrides) cfg.apply_override(kv);
        if (const char* env_out = std::getenv("HOMOG_OUT"); env_out && *env_out) cfg.set("out", env_out);
        if (!seed_text.empty()) cfg.set("seed", seed_text);
        if (!workers_text.empty()) cfg.set("workers", workers_text);
        if (!out_text.empty()) cfg.set("out", out_text);
        for (const auto* sub : app.get_subcommands()) cfg.set("study", sub->get_name());
        cfg.validate();

        const int status = homog::run_study(cfg);
        if (cfg.study == "verify")
            std::fprintf(stdout, "verify: %s (see %s/summary.json)\n", status == 0 ? "all checks passed" : "FAILURES",
                         cfg.out.c_str());
        else
            std::fprintf(stdout, "%s study written to %s\n", cfg.study.c_str(), cfg.out.c_str());
        return status;
    } catch (const homog::ConfigError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
