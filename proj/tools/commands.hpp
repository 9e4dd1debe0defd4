#pragma once

#include "mdpde/mdpde.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mdpde::cli {

enum ExitCode : int { kOk = 0, kInputError = 2, kNumericalFailure = 3 };

struct FitOptions {
    std::string data;
    std::string alpha;
    std::string out;
    SolverConfig solver;
};

struct SimulateOptions {
    std::string scenario;
    int reps = 1;
    std::uint64_t seed = 1;
    std::string out;
    std::optional<int> threads;
};

struct DiagnoseOptions {
    std::string data;
    std::string alpha_grid;
    int direction = 1;  // 1-based
    std::string out;
    SolverConfig solver;
};

/// Comma-separated numbers; entries may be written as fractions ("1/13").
inline std::vector<double> parse_alpha_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) throw ParseError("empty entry in alpha list '" + text + "'");
        item = item.substr(b, item.find_last_not_of(" \t") - b + 1);
        double v = 0.0;
        const auto slash = item.find('/');
        if (slash == std::string::npos) {
            v = csv::parse_number(item, 0, 0);
        } else {
            const double num = csv::parse_number(item.substr(0, slash), 0, 0);
            const double den = csv::parse_number(item.substr(slash + 1), 0, 0);
            if (den == 0.0) throw ParseError("zero denominator in alpha list");
            v = num / den;
        }
        if (!(v >= 0.0)) throw ParseError("alpha values must be non-negative, got '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ParseError("alpha list is empty");
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write '" + path + "'");
    f << text;
    if (!f) throw ParseError("failed writing '" + path + "'");
}

/// Fits at each alpha; entries are kept even when a fit fails.
struct FitEntry {
    double alpha = 0.0;
    std::optional<FitResult> fit;
    std::string error;
};

inline std::vector<FitEntry> fit_each(const GroupedDesign& design, const std::vector<double>& alphas,
                                      const SolverConfig& solver) {
    std::vector<FitEntry> out;
    for (double a : alphas) {
        FitEntry e;
        e.alpha = a;
        try {
            e.fit = fit(design, DpdConfig{a}, solver);
        } catch (const DidNotConverge& ex) {
            e.fit = ex.best();
            e.error = ex.what();
        } catch (const Error& ex) {
            e.error = ex.what();
        }
        out.push_back(std::move(e));
    }
    return out;
}

inline nlohmann::json fit_entry_json(const GroupedDesign& design, const FitEntry& e,
                                     const std::vector<std::string>& group_ids) {
    nlohmann::json j;
    j["alpha"] = e.alpha;
    j["converged"] = e.fit && e.fit->converged;
    if (!e.error.empty()) j["error"] = e.error;
    if (!e.fit) return j;
    const FitResult& f = *e.fit;
    j["objective"] = number_or_null(f.objective);
    j["iterations"] = f.iterations;
    j["grad_norm"] = number_or_null(f.grad_norm);
    j["beta"] = to_json(f.theta_hat.beta);
    j["sigma2"] = to_json(f.theta_hat.sigma2);
    nlohmann::json weights = nlohmann::json::object();
    for (std::size_t i = 0; i < group_ids.size(); ++i) weights[group_ids[i]] = f.weights[static_cast<Eigen::Index>(i)];
    j["weights"] = std::move(weights);
    try {
        const AsymptoticInfo info = asymptotic_info(design, f.theta_hat, DpdConfig{e.alpha});
        j["se"] = to_json(info.se);
        j["boundary"] = info.boundary;
        nlohmann::json tests = nlohmann::json::array();
        for (const auto& row : wald_tests(f, info))
            tests.push_back({{"parameter", row.name},
                             {"estimate", row.estimate},
                             {"se", number_or_null(row.se)},
                             {"z", number_or_null(row.z)},
                             {"p_value", number_or_null(row.p)},
                             {"boundary_invalid", row.boundary_invalid}});
        j["wald"] = std::move(tests);
    } catch (const Error& ex) {
        j["inference_error"] = ex.what();
    }
    return j;
}

inline int cmd_fit(const FitOptions& opt, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    std::optional<LongFormatDataset> loaded;
    std::vector<double> alphas;
    try {
        loaded = read_long_csv_file(opt.data);
        alphas = parse_alpha_list(opt.alpha);
        opt.solver.validate();
    } catch (const Error& e) {
        err << "mdpde fit: " << e.what() << '\n';
        return kInputError;
    }
    const LongFormatDataset& data = *loaded;
    const auto entries = fit_each(data.design, alphas, opt.solver);
    nlohmann::json out;
    out["groups"] = data.design.num_groups();
    out["observations"] = data.design.total_obs();
    out["k"] = data.design.k();
    out["r"] = data.design.r();
    out["x_columns"] = data.x_names;
    out["parameters"] = parameter_names(data.design.k(), data.design.r());
    nlohmann::json fits = nlohmann::json::array();
    bool any = false;
    for (const auto& e : entries) {
        any |= e.fit && e.fit->converged;
        fits.push_back(fit_entry_json(data.design, e, data.group_ids));
        log << "alpha=" << format_double(e.alpha) << ' '
            << (e.fit && e.fit->converged ? "converged" : "FAILED") << (e.error.empty() ? "" : " (" + e.error + ")")
            << '\n';
    }
    out["fits"] = std::move(fits);
    try {
        write_text(opt.out, out.dump(2) + "\n");
    } catch (const Error& e) {
        err << "mdpde fit: " << e.what() << '\n';
        return kInputError;
    }
    if (!any) {
        err << "mdpde fit: no convergence at any alpha\n";
        return kNumericalFailure;
    }
    return kOk;
}

inline int default_threads() {
    if (const char* env = std::getenv("MDPDE_THREADS")) {
        try {
            const int t = std::stoi(env);
            if (t >= 1) return t;
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Strips a trailing .csv or .json so both outputs share one stem.
inline std::string output_stem(const std::string& out) {
    for (const std::string ext : {".csv", ".json"})
        if (out.size() > ext.size() && out.compare(out.size() - ext.size(), ext.size(), ext) == 0)
            return out.substr(0, out.size() - ext.size());
    return out;
}

inline void print_summary(std::ostream& os, const McReport& rep) {
    char line[256];
    // clean settings: efficiency table
    bool header = false;
    for (const auto& row : rep.rows) {
        if (row.setting.epsilon != 0.0) continue;
        if (!header) {
            os << "Clean data (" << rep.replications << " replications)\n";
            std::snprintf(line, sizeof line, "%-16s %12s %10s %12s %10s %8s\n", "estimator", "MSMD", "eff", "MKLD", "eff",
                          "fails");
            os << line;
            header = true;
        }
        std::snprintf(line, sizeof line, "%-16s %12.5f %10.3f %12.5f %10.3f %8zu\n", estimator_name(row.alpha).c_str(),
                      row.msmd, row.msmd_efficiency, row.mkld, row.mkld_efficiency, row.fit_failures);
        os << line;
    }
    // contaminated settings: maximum over omega0
    struct Key {
        double eps;
        std::string lev;
        double alpha;
    };
    std::vector<std::pair<Key, std::pair<double, double>>> maxima;
    for (const auto& row : rep.rows) {
        if (row.setting.epsilon == 0.0) continue;
        const std::string lev = leverage_label(row.setting);
        auto it = std::find_if(maxima.begin(), maxima.end(), [&](const auto& m) {
            return m.first.eps == row.setting.epsilon && m.first.lev == lev && m.first.alpha == row.alpha;
        });
        if (it == maxima.end()) {
            maxima.push_back({{row.setting.epsilon, lev, row.alpha}, {row.msmd, row.mkld}});
        } else {
            it->second.first = std::max(it->second.first, row.msmd);
            it->second.second = std::max(it->second.second, row.mkld);
        }
    }
    std::string last;
    for (const auto& [key, vals] : maxima) {
        char head[128];
        std::snprintf(head, sizeof head, "epsilon=%.3g %s", key.eps, key.lev.c_str());
        if (last != head) {
            os << "\nContaminated, " << head << ": maximum over omega0\n";
            std::snprintf(line, sizeof line, "%-16s %12s %12s\n", "estimator", "max MSMD", "max MKLD");
            os << line;
            last = head;
        }
        std::snprintf(line, sizeof line, "%-16s %12.5f %12.5f\n", estimator_name(key.alpha).c_str(), vals.first,
                      vals.second);
        os << line;
    }
    std::size_t fails = 0;
    for (const auto& row : rep.rows) fails += row.fit_failures;
    if (fails > 0) os << "\nfit failures (not converged, estimates kept): " << fails << '\n';
}

inline int cmd_simulate(const SimulateOptions& opt, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    StudyConfig cfg;
    try {
        cfg = read_scenario_file(opt.scenario);
        if (opt.reps < 1) throw ParseError("--reps must be at least 1");
        if (opt.threads && *opt.threads < 1) throw ParseError("--threads must be at least 1");
    } catch (const Error& e) {
        err << "mdpde simulate: " << e.what() << '\n';
        return kInputError;
    }
    cfg.reps = opt.reps;
    cfg.base_seed = opt.seed;
    cfg.threads = opt.threads ? *opt.threads : default_threads();

    McReport rep;
    try {
        rep = run_study(cfg);
    } catch (const Error& e) {
        err << "mdpde simulate: " << e.what() << '\n';
        return kNumericalFailure;
    }
    const std::string stem = output_stem(opt.out);
    try {
        std::ostringstream csv_text;
        write_report_csv(csv_text, rep);
        write_text(stem + ".csv", csv_text.str());
        write_text(stem + ".json", report_to_json(rep).dump(2) + "\n");
    } catch (const Error& e) {
        err << "mdpde simulate: " << e.what() << '\n';
        return kInputError;
    }
    print_summary(log, rep);
    return kOk;
}

inline int cmd_diagnose(const DiagnoseOptions& opt, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
    std::optional<LongFormatDataset> loaded;
    std::vector<double> alphas;
    try {
        loaded = read_long_csv_file(opt.data);
        alphas = parse_alpha_list(opt.alpha_grid);
        opt.solver.validate();
        if (opt.direction < 1 || static_cast<std::size_t>(opt.direction) > loaded->design.num_groups())
            throw ParseError("--direction must lie in 1.." + std::to_string(loaded->design.num_groups()));
    } catch (const Error& e) {
        err << "mdpde diagnose: " << e.what() << '\n';
        return kInputError;
    }
    const LongFormatDataset& data = *loaded;
    const GroupedDesign& design = data.design;
    const auto i0 = static_cast<std::size_t>(opt.direction - 1);
    const auto entries = fit_each(design, alphas, opt.solver);
    for (const auto& e : entries)
        if (!e.fit || !e.fit->converged) {
            err << "mdpde diagnose: fit failed at alpha=" << format_double(e.alpha) << ": " << e.error << '\n';
            return kNumericalFailure;
        }

    nlohmann::json out;
    out["direction"] = opt.direction;
    out["group"] = data.group_ids[i0];
    out["balanced"] = design.is_balanced();
    out["parameters"] = parameter_names(design.k(), design.r());
    nlohmann::json fits = nlohmann::json::array();
    for (const auto& e : entries) fits.push_back(fit_entry_json(design, e, data.group_ids));
    out["fits"] = std::move(fits);

    char line[256];
    try {
        nlohmann::json sens = nlohmann::json::array();
        std::snprintf(line, sizeof line, "%-12s %22s %22s\n", "alpha", "GES", "SSS");
        log << line;
        for (const auto& e : entries) {
            const SensitivityReport s = sensitivities(design, e.fit->theta_hat, DpdConfig{e.alpha}, i0);
            sens.push_back({{"alpha", e.alpha}, {"ges", s.ges.infinite ? nlohmann::json("inf") : nlohmann::json(s.ges.value)},
                            {"sss", s.sss.infinite ? nlohmann::json("inf") : nlohmann::json(s.sss.value)}});
            std::snprintf(line, sizeof line, "%-12.6g %22s %22s\n", e.alpha, s.ges.str().c_str(), s.sss.str().c_str());
            log << line;
            if (s.alpha_star) {
                out["alpha_star"] = *s.alpha_star;
                out["alpha_bar"] = *s.alpha_bar;
            }
        }
        out["sensitivity"] = std::move(sens);
        if (out.contains("alpha_star"))
            log << "alpha* = " << format_double(out["alpha_star"].get<double>())
                << "  alpha_bar = " << format_double(out["alpha_bar"].get<double>()) << '\n';

        // Efficiencies at the fit with the smallest alpha.
        const auto base_it = std::min_element(entries.begin(), entries.end(),
                                              [](const FitEntry& a, const FitEntry& b) { return a.alpha < b.alpha; });
        const ThetaParams& theta0 = base_it->fit->theta_hat;
        nlohmann::json are = nlohmann::json::object();
        const auto names = parameter_names(design.k(), design.r());
        for (std::size_t p = 0; p < design.num_params(); ++p) {
            try {
                are[names[p]] = are_curve(design, theta0, alphas, p);
            } catch (const Error& ex) {
                are[names[p]] = ex.what();
            }
        }
        out["are"] = {{"alphas", alphas}, {"evaluated_at_alpha", base_it->alpha}, {"values", std::move(are)}};

        const auto ts = default_if_grid();
        nlohmann::json grids = nlohmann::json::array();
        for (const auto& e : entries) {
            const InfluenceContext ctx(design, e.fit->theta_hat, DpdConfig{e.alpha});
            auto rows_json = [&](const std::vector<InfluenceGridRow>& rows) {
                nlohmann::json a = nlohmann::json::array();
                for (const auto& r : rows)
                    a.push_back({{"t", r.t}, {"beta", to_json(r.beta_if)}, {"sigma2", to_json(r.sigma_if)},
                                 {"beta_norm", r.beta_if.norm()}});
                return a;
            };
            grids.push_back({{"alpha", e.alpha},
                             {"all_directions", rows_json(influence_grid_all(ctx, ts))},
                             {"direction", rows_json(influence_grid_direction(ctx, i0, ts))}});
        }
        out["influence"] = std::move(grids);
    } catch (const Error& e) {
        err << "mdpde diagnose: " << e.what() << '\n';
        return kNumericalFailure;
    }
    try {
        write_text(opt.out, out.dump(2) + "\n");
    } catch (const Error& e) {
        err << "mdpde diagnose: " << e.what() << '\n';
        return kInputError;
    }
    return kOk;
}

} // namespace mdpde::cli
