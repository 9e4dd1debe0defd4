#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

void add_solver_options(CLI::App* cmd, mdpde::SolverConfig& solver) {
    cmd->add_option("--max-iter", solver.max_iter, "iteration limit per start")->check(CLI::PositiveNumber);
    cmd->add_option("--tol-theta", solver.tol_theta, "relative step tolerance")->check(CLI::PositiveNumber);
    cmd->add_option("--tol-obj", solver.tol_obj, "objective change tolerance")->check(CLI::PositiveNumber);
    cmd->add_option("--restarts", solver.restarts, "perturbed restarts")->check(CLI::NonNegativeNumber);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Minimum density power divergence estimation for Gaussian linear mixed models"};
    app.require_subcommand(1);

    mdpde::cli::FitOptions fit;
    auto* fit_cmd = app.add_subcommand("fit", "fit a long-format CSV data set at one or more alphas");
    fit_cmd->add_option("--data", fit.data, "input CSV")->required();
    fit_cmd->add_option("--alpha", fit.alpha, "comma-separated alpha values, e.g. 0,0.0769,1/6")->required();
    fit_cmd->add_option("--out", fit.out, "output JSON")->required();
    add_solver_options(fit_cmd, fit.solver);

    mdpde::cli::SimulateOptions sim;
    int threads = 0;
    auto* sim_cmd = app.add_subcommand("simulate", "run a Monte Carlo contamination study");
    sim_cmd->add_option("--scenario", sim.scenario, "scenario JSON")->required();
    sim_cmd->add_option("--reps", sim.reps, "replications")->required();
    sim_cmd->add_option("--seed", sim.seed, "base seed")->required();
    sim_cmd->add_option("--out", sim.out, "output stem: writes <stem>.csv and <stem>.json")->required();
    auto* threads_opt = sim_cmd->add_option("--threads", threads, "worker threads (default: MDPDE_THREADS or all cores)");

    mdpde::cli::DiagnoseOptions diag;
    auto* diag_cmd = app.add_subcommand("diagnose", "sensitivities, efficiencies and influence-function grids");
    diag_cmd->add_option("--data", diag.data, "input CSV")->required();
    diag_cmd->add_option("--alpha-grid", diag.alpha_grid, "comma-separated alpha values")->required();
    diag_cmd->add_option("--direction", diag.direction, "contaminated group (1-based)")->required();
    diag_cmd->add_option("--out", diag.out, "output JSON")->required();
    add_solver_options(diag_cmd, diag.solver);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : mdpde::cli::kInputError;
    }

    if (fit_cmd->parsed()) return mdpde::cli::cmd_fit(fit);
    if (sim_cmd->parsed()) {
        if (threads_opt->count() > 0) sim.threads = threads;
        return mdpde::cli::cmd_simulate(sim);
    }
    return mdpde::cli::cmd_diagnose(diag);
}
