#include "regmerge/expectations.hpp"

#include <cmath>

#include "regmerge/cli.hpp"
#include "regmerge/experiments.hpp"

namespace regmerge {

using nlohmann::json;

json compute_expectations(const std::filesystem::path& scratch) {
    json out;
    out["noniid"] = to_json(run_noniid_experiment(benchmarks::noniid_task(), benchmarks::noniid_partition(),
                                                  benchmarks::noniid_config()));
    const auto domains = benchmarks::domains();
    const auto ood = benchmarks::ood_domains();
    const Workbench wb = prepare_workbench(domains, ood, benchmarks::multidomain_config());
    out["multidomain"] = to_json(run_multidomain_experiment(wb));
    const MergeConfig base;
    out["sweep_alpha"] = to_json(sweep_alpha(wb, {std::begin(kAlphaSweep), std::end(kAlphaSweep)}, base));
    out["sweep_batches"] = to_json(sweep_batches(wb, {std::begin(kBatchSweep), std::end(kBatchSweep)}, base));
    out["greedy"] = to_json(run_greedy_experiment(benchmarks::adversarial_workbench(), {"regmean", base}));
    out["golden"] = run_golden_pipeline(scratch / "golden");
    return out;
}

static void compare(const json& e, const json& a, const std::string& path, double tol,
                    std::vector<std::string>& diffs) {
    if (diffs.size() > 20) return;
    if (e.is_number() && a.is_number()) {
        const double x = e.get<double>(), y = a.get<double>();
        if (!(std::fabs(x - y) <= tol)) diffs.push_back(path + ": expected " + e.dump() + ", got " + a.dump());
        return;
    }
    if (e.type() != a.type()) {
        diffs.push_back(path + ": type differs");
        return;
    }
    if (e.is_object()) {
        for (const auto& [k, v] : e.items()) {
            if (!a.contains(k)) diffs.push_back(path + "/" + k + ": missing");
            else compare(v, a.at(k), path + "/" + k, tol, diffs);
        }
        for (const auto& [k, v] : a.items())
            if (!e.contains(k)) diffs.push_back(path + "/" + k + ": unexpected");
    } else if (e.is_array()) {
        if (e.size() != a.size()) {
            diffs.push_back(path + ": length " + std::to_string(a.size()) + " != " + std::to_string(e.size()));
            return;
        }
        for (std::size_t i = 0; i < e.size(); ++i) compare(e[i], a[i], path + "/" + std::to_string(i), tol, diffs);
    } else if (e != a) {
        diffs.push_back(path + ": expected " + e.dump() + ", got " + a.dump());
    }
}

std::vector<std::string> compare_expectations(const json& expected, const json& actual, double tol) {
    std::vector<std::string> diffs;
    compare(expected, actual, "", tol, diffs);
    return diffs;
}

}  // namespace regmerge
