#pragma once

#include "mdpde/estimator.hpp"
#include "mdpde/model.hpp"
#include "mdpde/simulation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace mdpde {

/// Malformed input file. `row` and `column` are 1-based (0 when not applicable).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row = 0, std::size_t column = 0)
        : Error(format(what, row, column)), row_(row), column_(column) {}

    std::size_t row() const noexcept { return row_; }
    std::size_t column() const noexcept { return column_; }

private:
    static std::string format(const std::string& what, std::size_t row, std::size_t column) {
        std::string s;
        if (row > 0) s += "row " + std::to_string(row);
        if (column > 0) s += (s.empty() ? "" : ", ") + std::string("column ") + std::to_string(column);
        return s.empty() ? what : s + ": " + what;
    }
    std::size_t row_, column_;
};

/// 17 significant digits: enough to reproduce every double exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace csv {

/// Splits one RFC 4180 record. Handles quoted fields with embedded commas,
/// doubled quotes and line breaks; `line` counts physical lines consumed.
inline bool read_record(std::istream& in, std::vector<std::string>& fields, std::size_t& line) {
    fields.clear();
    std::string field;
    bool quoted = false, any = false, after_quote = false;
    char c;
    while (in.get(c)) {
        any = true;
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    field += '"';
                } else {
                    quoted = false;
                    after_quote = true;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == '"' && field.empty() && !after_quote) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
            after_quote = false;
        } else if (c == '\n') {
            ++line;
            fields.push_back(std::move(field));
            return true;
        } else if (c == '\r') {
            if (in.peek() != '\n') field += c;
        } else {
            field += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", line + 1);
    if (!any) return false;
    ++line;
    fields.push_back(std::move(field));
    return true;
}

inline std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline double parse_number(const std::string& text, std::size_t row, std::size_t col) {
    std::size_t pos = 0;
    double v = 0.0;
    std::string t = text;
    while (!t.empty() && (t.back() == ' ' || t.back() == '\t')) t.pop_back();
    std::size_t start = t.find_first_not_of(" \t");
    if (start == std::string::npos) throw ParseError("empty numeric field", row, col);
    t = t.substr(start);
    try {
        v = std::stod(t, &pos);
    } catch (const std::exception&) {
        throw ParseError("not a number: '" + text + "'", row, col);
    }
    if (pos != t.size()) throw ParseError("not a number: '" + text + "'", row, col);
    if (!std::isfinite(v)) throw ParseError("non-finite value '" + text + "'", row, col);
    return v;
}

} // namespace csv

/// Long-format data set: one row per observation with a group identifier,
/// the response `y`, fixed covariates `x*` and random-design columns `z{j}_*`.
struct LongFormatDataset {
    std::vector<std::string> group_ids;  // order of first appearance
    GroupedDesign design;
    std::vector<std::string> x_names;
    std::vector<std::vector<std::string>> z_names;
};

inline LongFormatDataset read_long_csv(std::istream& in) {
    std::vector<std::string> header;
    std::size_t line = 0;
    if (!csv::read_record(in, header, line) || (header.size() == 1 && header[0].empty()))
        throw ParseError("empty file: expected a header row", 1);

    std::optional<std::size_t> gcol, ycol;
    std::vector<std::size_t> xcols;
    std::vector<std::string> xnames;
    std::map<int, std::vector<std::pair<std::size_t, std::string>>> zcols;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string& h = header[c];
        if (h == "group" || h == "group_id") {
            if (gcol) throw ParseError("duplicate group column", 1, c + 1);
            gcol = c;
        } else if (h == "y") {
            if (ycol) throw ParseError("duplicate y column", 1, c + 1);
            ycol = c;
        } else if (!h.empty() && h[0] == 'x') {
            xcols.push_back(c);
            xnames.push_back(h);
        } else if (h.size() > 1 && h[0] == 'z') {
            const auto us = h.find('_');
            int j = 0;
            const std::string num = h.substr(1, us == std::string::npos ? std::string::npos : us - 1);
            if (us == std::string::npos || num.empty() || num.find_first_not_of("0123456789") != std::string::npos ||
                (j = std::stoi(num)) < 1)
                throw ParseError("random-design column must be named z{j}_<label> with j >= 1: '" + h + "'", 1, c + 1);
            zcols[j].emplace_back(c, h);
        } else {
            throw ParseError("unrecognized column '" + h + "'", 1, c + 1);
        }
    }
    if (!gcol) throw ParseError("missing group (or group_id) column", 1);
    if (!ycol) throw ParseError("missing y column", 1);
    if (xcols.empty()) throw ParseError("need at least one x column", 1);
    int expect = 1;
    for (const auto& [j, cols] : zcols) {
        if (j != expect) throw ParseError("random factors must be numbered z1, z2, ... without gaps", 1);
        ++expect;
    }

    struct Acc {
        std::vector<double> y;
        std::vector<std::vector<double>> x;
        std::vector<std::vector<std::vector<double>>> z;
    };
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::string> ids;
    std::vector<Acc> acc;
    std::vector<std::string> rec;
    std::size_t datarow = 1;
    while (csv::read_record(in, rec, line)) {
        ++datarow;
        if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
        if (rec.size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(rec.size()),
                             datarow);
        const std::string& gid = rec[*gcol];
        if (gid.empty()) throw ParseError("empty group identifier", datarow, *gcol + 1);
        auto [it, inserted] = index.emplace(gid, acc.size());
        if (inserted) {
            ids.push_back(gid);
            acc.emplace_back();
            acc.back().z.resize(zcols.size());
        }
        Acc& a = acc[it->second];
        a.y.push_back(csv::parse_number(rec[*ycol], datarow, *ycol + 1));
        std::vector<double> xr;
        for (auto c : xcols) xr.push_back(csv::parse_number(rec[c], datarow, c + 1));
        a.x.push_back(std::move(xr));
        std::size_t jj = 0;
        for (const auto& [j, cols] : zcols) {
            std::vector<double> zr;
            for (const auto& [c, name] : cols) zr.push_back(csv::parse_number(rec[c], datarow, c + 1));
            a.z[jj++].push_back(std::move(zr));
        }
    }
    if (acc.empty()) throw ParseError("no data rows", 2);

    std::vector<GroupBlock> groups;
    groups.reserve(acc.size());
    for (const auto& a : acc) {
        GroupBlock g;
        const auto ni = static_cast<Eigen::Index>(a.y.size());
        g.y = Eigen::Map<const Vector>(a.y.data(), ni);
        g.X.resize(ni, static_cast<Eigen::Index>(xcols.size()));
        for (Eigen::Index r = 0; r < ni; ++r)
            for (Eigen::Index c = 0; c < g.X.cols(); ++c) g.X(r, c) = a.x[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        for (const auto& zj : a.z) {
            const auto q = static_cast<Eigen::Index>(zj.front().size());
            Matrix Z(ni, q);
            for (Eigen::Index r = 0; r < ni; ++r)
                for (Eigen::Index c = 0; c < q; ++c) Z(r, c) = zj[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            g.Z.push_back(std::move(Z));
        }
        groups.push_back(std::move(g));
    }
    LongFormatDataset out{ids, GroupedDesign(std::move(groups)), xnames, {}};
    for (const auto& [j, cols] : zcols) {
        std::vector<std::string> names;
        for (const auto& [c, name] : cols) names.push_back(name);
        out.z_names.push_back(std::move(names));
    }
    return out;
}

inline LongFormatDataset read_long_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open data file '" + path + "'");
    return read_long_csv(in);
}

/// Writes a design in the long format read by read_long_csv.
inline void write_long_csv(std::ostream& out, const GroupedDesign& design) {
    out << "group,y";
    for (std::size_t c = 0; c < design.k(); ++c) out << ",x" << c + 1;
    const auto& g0 = design.group(0);
    for (std::size_t j = 0; j < design.r(); ++j)
        for (Eigen::Index c = 0; c < g0.Z[j].cols(); ++c) out << ",z" << j + 1 << '_' << c + 1;
    out << '\n';
    for (std::size_t i = 0; i < design.num_groups(); ++i) {
        const auto& g = design.group(i);
        for (Eigen::Index r = 0; r < g.y.size(); ++r) {
            out << 'g' << i + 1 << ',' << format_double(g.y[r]);
            for (Eigen::Index c = 0; c < g.X.cols(); ++c) out << ',' << format_double(g.X(r, c));
            for (const auto& z : g.Z)
                for (Eigen::Index c = 0; c < z.cols(); ++c) out << ',' << format_double(z(r, c));
            out << '\n';
        }
    }
}

inline nlohmann::json to_json(const Vector& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i]))
            a.push_back(v[i]);
        else
            a.push_back(nullptr);
    }
    return a;
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// Fixed-effect and variance-component vectors from a JSON fit record.
inline ThetaParams theta_from_json(const nlohmann::json& j) {
    auto vec = [](const nlohmann::json& a) {
        Vector v(static_cast<Eigen::Index>(a.size()));
        for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
        return v;
    };
    return ThetaParams{vec(j.at("beta")), vec(j.at("sigma2"))};
}

// ---- scenario files ----

/// Parses a scenario JSON document into a study configuration (reps, seed and
/// threads are left for the caller). Unknown keys are rejected.
inline StudyConfig parse_scenario(const nlohmann::json& doc) {
    using nlohmann::json;
    auto fail = [](const std::string& msg) -> void { throw ParseError("scenario: " + msg); };
    auto check_keys = [&](const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
        if (!obj.is_object()) fail(where + " must be an object");
        for (auto it = obj.begin(); it != obj.end(); ++it)
            if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
                fail("unknown key '" + it.key() + "' in " + where);
    };
    auto num = [&](const json& v, const std::string& name) {
        if (!v.is_number()) fail(name + " must be a number");
        return v.get<double>();
    };
    auto integer = [&](const json& v, const std::string& name) {
        if (!v.is_number_integer()) fail(name + " must be an integer");
        return v.get<long long>();
    };
    auto numbers = [&](const json& v, const std::string& name) {
        std::vector<double> out;
        if (v.is_number()) return std::vector<double>{v.get<double>()};
        if (!v.is_array()) fail(name + " must be a number or an array of numbers");
        for (const auto& e : v) out.push_back(num(e, name));
        return out;
    };

    StudyConfig cfg;
    cfg.alphas = {0.01, 1.0 / 13.0, 0.1, 1.0 / 6.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    cfg.omega0.clear();
    for (int i = 0; i <= 20; ++i) cfg.omega0.push_back(0.5 * i);

    check_keys(doc, {"design", "contamination", "alphas", "solver"}, "scenario");
    if (doc.contains("design")) {
        const auto& d = doc["design"];
        check_keys(d, {"F", "G", "H", "k", "beta0", "sigma_a2", "sigma_b2", "sigma_c2", "sigma_e2", "n"}, "design");
        auto& s = cfg.design;
        if (d.contains("F")) s.F = static_cast<int>(integer(d["F"], "F"));
        if (d.contains("G")) s.G = static_cast<int>(integer(d["G"], "G"));
        if (d.contains("H")) s.H = static_cast<int>(integer(d["H"], "H"));
        if (d.contains("n")) s.n = static_cast<int>(integer(d["n"], "n"));
        if (d.contains("k")) {
            s.k = static_cast<int>(integer(d["k"], "k"));
            if (!d.contains("beta0")) {
                s.beta0 = Vector::Constant(s.k, 2.0);
                if (s.k > 0) s.beta0[0] = 0.0;
            }
        }
        if (d.contains("beta0")) {
            const auto b = numbers(d["beta0"], "beta0");
            s.beta0 = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
            if (!d.contains("k")) s.k = static_cast<int>(b.size());
        }
        if (d.contains("sigma_a2")) s.sigma_a2 = num(d["sigma_a2"], "sigma_a2");
        if (d.contains("sigma_b2")) s.sigma_b2 = num(d["sigma_b2"], "sigma_b2");
        if (d.contains("sigma_c2")) s.sigma_c2 = num(d["sigma_c2"], "sigma_c2");
        if (d.contains("sigma_e2")) s.sigma_e2 = num(d["sigma_e2"], "sigma_e2");
    }
    if (doc.contains("contamination")) {
        const auto& c = doc["contamination"];
        check_keys(c, {"epsilon", "omega0", "leverage", "covariate_sd"}, "contamination");
        if (c.contains("epsilon")) cfg.epsilons = numbers(c["epsilon"], "epsilon");
        if (c.contains("omega0")) {
            const auto& w = c["omega0"];
            if (w.is_object()) {
                check_keys(w, {"from", "to", "points"}, "omega0");
                const double from = num(w.at("from"), "omega0.from"), to = num(w.at("to"), "omega0.to");
                const auto pts = integer(w.at("points"), "omega0.points");
                if (pts < 1) fail("omega0.points must be positive");
                cfg.omega0.clear();
                for (long long i = 0; i < pts; ++i)
                    cfg.omega0.push_back(pts == 1 ? from : from + (to - from) * static_cast<double>(i) / static_cast<double>(pts - 1));
            } else {
                cfg.omega0 = numbers(w, "omega0");
            }
        }
        if (c.contains("leverage")) {
            const auto& l = c["leverage"];
            cfg.leverages.clear();
            auto one = [&](const json& e) {
                if (!e.is_string()) fail("leverage entries must be \"lev1\" or \"lev20\"");
                try {
                    cfg.leverages.push_back(parse_leverage(e.get<std::string>()));
                } catch (const InvalidArgument& ex) {
                    fail(ex.what());
                }
            };
            if (l.is_array())
                for (const auto& e : l) one(e);
            else
                one(l);
        }
        if (c.contains("covariate_sd")) cfg.covariate_sd = num(c["covariate_sd"], "covariate_sd");
    }
    if (doc.contains("alphas")) cfg.alphas = numbers(doc["alphas"], "alphas");
    if (doc.contains("solver")) {
        const auto& s = doc["solver"];
        check_keys(s, {"max_iter", "tol_theta", "tol_obj", "restarts", "seed"}, "solver");
        if (s.contains("max_iter")) cfg.solver.max_iter = static_cast<int>(integer(s["max_iter"], "max_iter"));
        if (s.contains("tol_theta")) cfg.solver.tol_theta = num(s["tol_theta"], "tol_theta");
        if (s.contains("tol_obj")) cfg.solver.tol_obj = num(s["tol_obj"], "tol_obj");
        if (s.contains("restarts")) cfg.solver.restarts = static_cast<int>(integer(s["restarts"], "restarts"));
        if (s.contains("seed")) cfg.solver.seed = static_cast<std::uint64_t>(integer(s["seed"], "seed"));
    }
    try {
        cfg.validate();
    } catch (const ParseError&) {
        throw;
    } catch (const Error& e) {
        throw ParseError(std::string("scenario: ") + e.what());
    }
    return cfg;
}

inline StudyConfig read_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open scenario file '" + path + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("scenario is not valid JSON: ") + e.what());
    }
    return parse_scenario(doc);
}

// ---- Monte Carlo reports ----

inline std::string leverage_label(const StudySetting& s) { return s.leverage ? to_string(*s.leverage) : "none"; }

/// Long format: estimator, alpha, epsilon, omega0, leverage, metric, value.
inline void write_report_csv(std::ostream& out, const McReport& rep) {
    out << "estimator,alpha,epsilon,omega0,leverage,metric,value\n";
    for (const auto& row : rep.rows) {
        const std::string prefix = csv::quote(estimator_name(row.alpha)) + ',' + format_double(row.alpha) + ',' +
                                   format_double(row.setting.epsilon) + ',' + format_double(row.setting.omega0) + ',' +
                                   leverage_label(row.setting) + ',';
        out << prefix << "msmd," << format_double(row.msmd) << '\n';
        out << prefix << "mkld," << format_double(row.mkld) << '\n';
        out << prefix << "msmd_efficiency," << format_double(row.msmd_efficiency) << '\n';
        out << prefix << "mkld_efficiency," << format_double(row.mkld_efficiency) << '\n';
        out << prefix << "fit_failures," << row.fit_failures << '\n';
        out << prefix << "singular_estimates," << row.singular << '\n';
    }
}

inline nlohmann::json report_to_json(const McReport& rep) {
    nlohmann::json j;
    j["replications"] = rep.replications;
    j["seed"] = rep.seed;
    j["alphas"] = rep.alphas;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : rep.rows) {
        rows.push_back({{"estimator", estimator_name(row.alpha)},
                        {"alpha", row.alpha},
                        {"epsilon", row.setting.epsilon},
                        {"omega0", row.setting.omega0},
                        {"leverage", leverage_label(row.setting)},
                        {"msmd", number_or_null(row.msmd)},
                        {"mkld", number_or_null(row.mkld)},
                        {"msmd_efficiency", number_or_null(row.msmd_efficiency)},
                        {"mkld_efficiency", number_or_null(row.mkld_efficiency)},
                        {"fit_failures", row.fit_failures},
                        {"singular_estimates", row.singular}});
    }
    j["rows"] = std::move(rows);
    return j;
}

} // namespace mdpde
