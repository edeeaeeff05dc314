// Command-line front end: run scenario files, list experiments.
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qbranch/scenario.hpp"

int main(int argc, char** argv) {
    CLI::App app{"qbranch - branching-tree quantum dynamics simulator"};
    app.require_subcommand(1);

    std::string scenario_path;
    qbranch::RunOptions options;
    std::string tolerance_arg;
    std::uint64_t seed_arg = 0;
    std::size_t max_paths_arg = 0;
    std::string out_dir;

    CLI::App* run = app.add_subcommand("run", "run a scenario file");
    run->add_option("scenario", scenario_path, "scenario JSON file")->required();
    run->add_option("--out", out_dir, "output directory (overrides the scenario)");
    auto* seed_opt = run->add_option("--seed", seed_arg, "override the scenario seed");
    run->add_flag("--dry-run", options.dry_run, "validate without computing");
    run->add_option("--tolerance", tolerance_arg, "override tolerance, e.g. eps_x=1e-3");
    auto* paths_opt = run->add_option("--max-paths", max_paths_arg, "path cap for tree growth");
    run->add_option("--threads", options.threads, "bound on worker threads")
        ->check(CLI::PositiveNumber);

    CLI::App* list = app.add_subcommand("list", "list the available experiments");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (list->parsed()) {
        for (const auto& info : qbranch::list_experiments())
            std::cout << info.name << "  -  " << info.description << "\n";
        return 0;
    }

    if (!out_dir.empty()) options.out_dir = out_dir;
    if (*seed_opt) options.seed = seed_arg;
    if (*paths_opt) options.max_paths = max_paths_arg;
    if (!tolerance_arg.empty()) {
        const std::string prefix = "eps_x=";
        if (tolerance_arg.rfind(prefix, 0) != 0) {
            std::cerr << "usage: --tolerance eps_x=<value>\n";
            return 2;
        }
        try {
            options.eps_x = std::stod(tolerance_arg.substr(prefix.size()));
        } catch (...) {
            std::cerr << "usage: --tolerance eps_x=<value>\n";
            return 2;
        }
    }

    return qbranch::run_scenario_file(scenario_path, options, std::cout, std::cerr);
}
