#include "regmerge/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <exception>
#include <sstream>

#include "regmerge/error.hpp"
#include "regmerge/rng.hpp"

namespace regmerge {

using nlohmann::json;

std::vector<NamedMerge> default_merges() {
    MergeConfig simple, fisher, regmean;
    simple.algorithm = MergeAlgorithm::simple;
    fisher.algorithm = MergeAlgorithm::fisher;
    regmean.algorithm = MergeAlgorithm::regmean;
    return {{"simple", simple}, {"fisher", fisher}, {"regmean", regmean}};
}

json to_json(const ExperimentConfig& c) {
    json merges = json::array();
    for (const auto& m : c.merges) {
        json j = to_json(m.config);
        j["name"] = m.name;
        merges.push_back(std::move(j));
    }
    return json{{"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"collect", to_json(c.collect)},
                {"merges", merges},
                {"metric", to_string(c.metric)},
                {"seed", c.seed}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("model")) {
            json spec = j.at("model");
            if (!spec.contains("input_dim")) spec["input_dim"] = 1;
            if (!spec.contains("num_classes")) spec["num_classes"] = 2;
            if (!spec.contains("architecture")) spec["architecture"] = "mlp";
            c.model = model_spec_from_json(spec);
        }
        if (j.contains("train")) c.train = train_hyper_from_json(j.at("train"));
        if (j.contains("collect")) c.collect = collect_config_from_json(j.at("collect"));
        if (j.contains("merges")) {
            c.merges.clear();
            for (const json& m : j.at("merges")) {
                MergeConfig cfg = merge_config_from_json(m);
                c.merges.push_back({m.value("name", std::string(to_string(cfg.algorithm))), cfg});
            }
        }
        c.metric = metric_from_string(j.value("metric", std::string("accuracy")));
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("experiment config: ") + e.what());
    }
    return c;
}

const ScoreRow& EvalReport::row(const std::string& section, const std::string& method) const {
    for (const auto& r : rows)
        if (r.section == section && r.method == method) return r;
    throw ValidationError("report has no row " + section + "/" + method);
}

json to_json(const EvalReport& r) {
    json rows = json::array(), pairs = json::array(), sweep = json::array();
    for (const auto& s : r.rows)
        rows.push_back({{"section", s.section},
                        {"method", s.method},
                        {"datasets", s.datasets},
                        {"values", s.values},
                        {"macro_average", s.macro_average}});
    for (const auto& p : r.pairwise) {
        json grid = json::array(), flags = json::array();
        for (std::size_t i = 0; i < p.drop.rows(); ++i) {
            grid.push_back(std::vector<double>(p.drop.row(i).begin(), p.drop.row(i).end()));
            flags.push_back(std::vector<bool>(p.undefined[i].begin(), p.undefined[i].end()));
        }
        pairs.push_back({{"method", p.method},
                         {"drop_percent", grid},
                         {"undefined", flags},
                         {"mean_off_diagonal", p.mean_off_diagonal},
                         {"flagged", p.flagged}});
    }
    for (const auto& s : r.sweep)
        sweep.push_back({{"parameter", s.parameter},
                         {"value", s.value},
                         {"in_domain", s.in_domain},
                         {"ood", s.ood},
                         {"max_jitter", s.max_jitter}});
    return json{{"experiment", r.experiment}, {"config", r.config}, {"rows", rows},
                {"pairwise", pairs},          {"sweep", sweep},     {"greedy", r.greedy}};
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    try {
        r.experiment = j.at("experiment").get<std::string>();
        r.config = j.at("config");
        for (const json& s : j.at("rows"))
            r.rows.push_back({s.at("section").get<std::string>(), s.at("method").get<std::string>(),
                              s.at("datasets").get<std::vector<std::string>>(),
                              s.at("values").get<std::vector<double>>(), s.at("macro_average").get<double>()});
        for (const json& p : j.at("pairwise")) {
            PairwiseDrop d;
            d.method = p.at("method").get<std::string>();
            const auto grid = p.at("drop_percent").get<std::vector<std::vector<double>>>();
            d.drop = Matrix(grid.size(), grid.size());
            for (std::size_t i = 0; i < grid.size(); ++i)
                for (std::size_t k = 0; k < grid[i].size(); ++k) d.drop(i, k) = grid[i][k];
            d.undefined = p.at("undefined").get<std::vector<std::vector<bool>>>();
            d.mean_off_diagonal = p.at("mean_off_diagonal").get<double>();
            d.flagged = p.at("flagged").get<std::size_t>();
            r.pairwise.push_back(std::move(d));
        }
        for (const json& s : j.at("sweep"))
            r.sweep.push_back({s.at("parameter").get<std::string>(), s.at("value").get<double>(),
                               s.at("in_domain").get<double>(), s.at("ood").get<double>(),
                               s.at("max_jitter").get<double>()});
        r.greedy = j.value("greedy", json());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("report json: ") + e.what());
    }
    return r;
}

std::string to_csv(const EvalReport& r) {
    std::ostringstream out;
    out.precision(17);
    const std::string metric = r.config.contains("metric") ? r.config.at("metric").get<std::string>() : "metric";
    out << "experiment,method,dataset,metric,value\n";
    for (const auto& s : r.rows) {
        for (std::size_t i = 0; i < s.datasets.size(); ++i)
            out << r.experiment << ',' << s.method << ',' << s.section << '/' << s.datasets[i] << ',' << metric << ','
                << s.values[i] << '\n';
        out << r.experiment << ',' << s.method << ',' << s.section << "/macro_average," << metric << ','
            << s.macro_average << '\n';
    }
    for (const auto& p : r.pairwise)
        out << r.experiment << ',' << p.method << ",pairwise/mean_off_diagonal,relative_drop_percent,"
            << p.mean_off_diagonal << '\n';
    for (const auto& s : r.sweep) {
        char buf[32];
        const auto end = std::to_chars(buf, buf + sizeof buf, s.value).ptr;
        const std::string label = s.parameter + '=' + std::string(buf, end);
        out << r.experiment << ",regmean," << label << "/in_domain," << metric << ',' << s.in_domain << '\n';
        out << r.experiment << ",regmean," << label << "/ood," << metric << ',' << s.ood << '\n';
    }
    return out.str();
}

namespace {

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    std::vector<std::exception_ptr> failures(n);
    const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < count; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
            failures[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& f : failures)
        if (f) std::rethrow_exception(f);
}

double score(const ModelInstance& m, const Dataset& d, MetricKind k) { return 100.0 * evaluate(m, d, k); }

double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void add_row(EvalReport& r, std::string section, std::string method, const std::vector<std::string>& datasets,
             std::vector<double> values) {
    const double avg = mean(values);
    r.rows.push_back({std::move(section), std::move(method), datasets, std::move(values), avg});
}

std::vector<double> scores_on(const ModelInstance& m, std::span<const TaskSplits> splits, MetricKind k,
                              bool validation = false) {
    std::vector<double> out;
    for (const auto& s : splits) out.push_back(score(m, validation ? s.val : s.test, k));
    return out;
}

std::vector<double> ensemble_scores(std::span<const ModelInstance> models, std::span<const TaskSplits> splits,
                                    MetricKind k) {
    std::vector<double> out;
    for (const auto& s : splits) out.push_back(100.0 * metric(ensemble_predict(models, s.test.x), s.test.y, k));
    return out;
}

ModelInstance merge_with(const Workbench& wb, std::span<const GramStats> grams, const MergeConfig& cfg,
                         MergeReport* report) {
    std::vector<NamedTensorMap> params;
    for (const auto& m : wb.models) params.push_back(m.params);
    MergeResult r = merge(params, grams, wb.fishers, cfg);
    NamedTensorMap full = wb.models[0].params;
    for (const auto& [name, t] : r.merged.entries()) full.set(name, t);
    full.metadata = r.merged.metadata;
    if (report) *report = std::move(r.report);
    return with_params(wb.models[0], std::move(full));
}

ModelInstance train_mtl(const Workbench& wb) {
    std::vector<Dataset> trains, vals;
    for (const auto& d : wb.domains) {
        trains.push_back(d.train);
        vals.push_back(d.val);
    }
    const Dataset train_set = Dataset::concat(trains);
    const Dataset val_set = Dataset::concat(vals);
    TrainHyper hyper = wb.config.train;
    hyper.seed = derive_seed(wb.config.seed, 99);
    ModelInstance m = train(wb.init, train_set, &val_set, hyper).model;
    m.params.metadata["dataset"] = "mtl";
    return m;
}

double max_jitter(const MergeReport& r) {
    double j = 0.0;
    for (const auto& [layer, s] : r.solves) j = std::max(j, s.jitter_applied);
    return j;
}

json workbench_echo(const Workbench& wb) {
    return json{{"experiment", to_json(wb.config)},
                {"seed", wb.config.seed},
                {"domains", wb.domain_names},
                {"ood", wb.ood_names}};
}

}  // namespace

Workbench prepare_workbench(std::vector<std::string> domain_names, std::vector<TaskSplits> domains,
                            std::vector<std::string> ood_names, std::vector<TaskSplits> ood,
                            const ExperimentConfig& cfg) {
    if (domains.empty()) throw ValidationError("experiment needs at least one domain");
    if (domain_names.size() != domains.size() || ood_names.size() != ood.size())
        throw ValidationError("domain names and splits differ in count");
    Workbench wb;
    wb.config = cfg;
    wb.domain_names = std::move(domain_names);
    wb.domains = std::move(domains);
    wb.ood_names = std::move(ood_names);
    wb.ood = std::move(ood);

    ModelSpec spec = cfg.model;
    spec.input_dim = wb.domains[0].train.x.cols();
    spec.num_classes = wb.domains[0].train.num_classes;
    wb.config.model = spec;
    wb.init = init_pretrained(spec, derive_seed(cfg.seed, 1));

    const std::size_t n = wb.domains.size();
    wb.models.resize(n);
    wb.grams.resize(n);
    wb.fishers.resize(n);
    parallel_for(n, [&](std::size_t i) {
        TrainHyper hyper = cfg.train;
        hyper.seed = derive_seed(cfg.seed, 100 + i);
        ModelInstance m = train(wb.init, wb.domains[i].train, &wb.domains[i].val, hyper).model;
        m.params.metadata["dataset"] = wb.domain_names[i];
        wb.grams[i] = collect_gram(m, wb.domains[i].train, cfg.collect);
        wb.fishers[i] = collect_fisher(m, wb.domains[i].train, cfg.collect);
        wb.models[i] = std::move(m);
    });
    return wb;
}

Workbench prepare_workbench(std::span<const SyntheticTask> domains, std::span<const SyntheticTask> ood,
                            const ExperimentConfig& cfg) {
    std::vector<std::string> dn, on;
    std::vector<TaskSplits> ds, os;
    for (const auto& t : domains) {
        dn.push_back(t.name);
        ds.push_back(generate(t));
    }
    for (const auto& t : ood) {
        on.push_back(t.name);
        os.push_back(generate(t));
    }
    return prepare_workbench(std::move(dn), std::move(ds), std::move(on), std::move(os), cfg);
}

ModelInstance merge_workbench(const Workbench& wb, const MergeConfig& cfg, MergeReport* report) {
    return merge_with(wb, wb.grams, cfg, report);
}

EvalReport run_noniid_experiment(const SyntheticTask& task, const PartitionSpec& partition,
                                 const ExperimentConfig& cfg) {
    const TaskSplits splits = generate(task);
    Partitions parts = make_noniid_partitions(splits.train, partition);
    std::vector<TaskSplits> domains{{std::move(parts.first), splits.val, splits.test},
                                    {std::move(parts.second), splits.val, splits.test}};
    const Workbench wb = prepare_workbench({"partition1", "partition2"}, std::move(domains), {}, {}, cfg);

    EvalReport r;
    r.experiment = "noniid";
    r.config = {{"task", to_json(task)},
                {"partition", to_json(partition)},
                {"key_class", parts.key_class},
                {"experiment", to_json(wb.config)},
                {"seed", cfg.seed},
                {"metric", to_string(cfg.metric)}};
    const std::vector<std::string> joint{task.name};
    const double f1 = score(wb.models[0], splits.test, cfg.metric);
    const double f2 = score(wb.models[1], splits.test, cfg.metric);
    add_row(r, "joint", "f1", joint, {f1});
    add_row(r, "joint", "f2", joint, {f2});
    add_row(r, "joint", "avg_individual", joint, {(f1 + f2) / 2.0});
    for (const auto& m : cfg.merges) add_row(r, "joint", m.name, joint, {score(merge_workbench(wb, m.config), splits.test, cfg.metric)});
    add_row(r, "joint", "ensemble", joint, ensemble_scores(wb.models, std::span(&wb.domains[0], 1), cfg.metric));
    add_row(r, "joint", "mtl", joint, {score(train_mtl(wb), splits.test, cfg.metric)});
    return r;
}

PairwiseDrop pairwise_drop(std::span<const ModelInstance> models, std::span<const GramStats> grams,
                           std::span<const FisherStats> fishers, std::span<const Dataset> tests,
                           const NamedMerge& merge_cfg, MetricKind kind) {
    const std::size_t n = models.size();
    if (tests.size() != n) throw ValidationError("pairwise drop needs one test set per model");
    PairwiseDrop out;
    out.method = merge_cfg.name;
    out.drop = Matrix(n, n);
    out.undefined.assign(n, std::vector<bool>(n, false));
    std::vector<double> base(n);
    for (std::size_t i = 0; i < n; ++i) base[i] = score(models[i], tests[i], kind);

    std::vector<std::pair<std::size_t, std::size_t>> cells;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) cells.emplace_back(i, j);
    std::vector<double> merged_score(cells.size());
    parallel_for(cells.size(), [&](std::size_t c) {
        const auto [i, j] = cells[c];
        const std::vector<NamedTensorMap> pair{models[i].params, models[j].params};
        std::vector<GramStats> g;
        std::vector<FisherStats> f;
        if (grams.size() == n) g = {grams[i], grams[j]};
        if (fishers.size() == n) f = {fishers[i], fishers[j]};
        const MergeResult r = merge(pair, g, f, merge_cfg.config);
        NamedTensorMap full = models[i].params;
        for (const auto& [name, t] : r.merged.entries()) full.set(name, t);
        merged_score[c] = score(with_params(models[i], std::move(full)), tests[i], kind);
    });

    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        const auto [i, j] = cells[c];
        if (base[i] == 0.0) {
            out.undefined[i][j] = true;
            ++out.flagged;
            continue;
        }
        out.drop(i, j) = 100.0 * (merged_score[c] - base[i]) / base[i];
        total += out.drop(i, j);
        ++counted;
    }
    out.mean_off_diagonal = counted ? total / static_cast<double>(counted) : 0.0;
    return out;
}

PairwiseDrop pairwise_drop(const Workbench& wb, const NamedMerge& merge_cfg) {
    std::vector<Dataset> tests;
    for (const auto& d : wb.domains) tests.push_back(d.test);
    return pairwise_drop(wb.models, wb.grams, wb.fishers, tests, merge_cfg, wb.config.metric);
}

EvalReport run_multidomain_experiment(const Workbench& wb) {
    const MetricKind kind = wb.config.metric;
    const std::size_t n = wb.models.size();
    EvalReport r;
    r.experiment = "multidomain";
    r.config = workbench_echo(wb);
    r.config["metric"] = to_string(kind);

    std::vector<std::vector<double>> in(n), ood(n);
    std::vector<double> val_in(n), val_ood(n);
    for (std::size_t i = 0; i < n; ++i) {
        in[i] = scores_on(wb.models[i], wb.domains, kind);
        ood[i] = scores_on(wb.models[i], wb.ood, kind);
        val_in[i] = mean(scores_on(wb.models[i], wb.domains, kind, true));
        val_ood[i] = mean(scores_on(wb.models[i], wb.ood, kind, true));
    }
    auto column_mean = [&](const std::vector<std::vector<double>>& s) {
        std::vector<double> out(s[0].size(), 0.0);
        for (const auto& row : s)
            for (std::size_t d = 0; d < row.size(); ++d) out[d] += row[d];
        for (double& v : out) v /= static_cast<double>(s.size());
        return out;
    };
    auto best_of = [](const std::vector<double>& v) {
        return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    };
    const bool has_ood = !wb.ood.empty();

    add_row(r, "in_domain", "avg_individual", wb.domain_names, column_mean(in));
    if (has_ood) add_row(r, "ood", "avg_individual", wb.ood_names, column_mean(ood));
    add_row(r, "in_domain", "best_individual", wb.domain_names, in[best_of(val_in)]);
    if (has_ood) add_row(r, "ood", "best_individual", wb.ood_names, ood[best_of(val_ood)]);
    std::vector<double> specific(n);
    for (std::size_t d = 0; d < n; ++d) specific[d] = in[d][d];
    add_row(r, "in_domain", "domain_specific", wb.domain_names, specific);
    add_row(r, "in_domain", "ensemble", wb.domain_names, ensemble_scores(wb.models, wb.domains, kind));
    if (has_ood) add_row(r, "ood", "ensemble", wb.ood_names, ensemble_scores(wb.models, wb.ood, kind));
    for (const auto& m : wb.config.merges) {
        const ModelInstance merged = merge_workbench(wb, m.config);
        add_row(r, "in_domain", m.name, wb.domain_names, scores_on(merged, wb.domains, kind));
        if (has_ood) add_row(r, "ood", m.name, wb.ood_names, scores_on(merged, wb.ood, kind));
    }
    const ModelInstance mtl = train_mtl(wb);
    add_row(r, "in_domain", "mtl", wb.domain_names, scores_on(mtl, wb.domains, kind));
    if (has_ood) add_row(r, "ood", "mtl", wb.ood_names, scores_on(mtl, wb.ood, kind));

    for (const auto& m : wb.config.merges) r.pairwise.push_back(pairwise_drop(wb, m));
    return r;
}

EvalReport run_multidomain_experiment(std::span<const SyntheticTask> domains, std::span<const SyntheticTask> ood,
                                      const ExperimentConfig& cfg) {
    EvalReport r = run_multidomain_experiment(prepare_workbench(domains, ood, cfg));
    json tasks = json::array(), held_out = json::array();
    for (const auto& t : domains) tasks.push_back(to_json(t));
    for (const auto& t : ood) held_out.push_back(to_json(t));
    r.config["domain_tasks"] = tasks;
    r.config["ood_tasks"] = held_out;
    return r;
}

namespace {

SweepRow sweep_point(const Workbench& wb, const ModelInstance& merged, const MergeReport& rep, std::string param,
                     double value) {
    SweepRow row;
    row.parameter = std::move(param);
    row.value = value;
    row.in_domain = mean(scores_on(merged, wb.domains, wb.config.metric));
    row.ood = wb.ood.empty() ? row.in_domain : mean(scores_on(merged, wb.ood, wb.config.metric));
    row.max_jitter = max_jitter(rep);
    return row;
}

}  // namespace

EvalReport sweep_alpha(const Workbench& wb, std::vector<double> alphas, const MergeConfig& base) {
    std::sort(alphas.begin(), alphas.end());
    EvalReport r;
    r.experiment = "sweep_alpha";
    r.config = workbench_echo(wb);
    r.config["metric"] = to_string(wb.config.metric);
    r.config["merge"] = to_json(base);
    r.config["alphas"] = alphas;
    r.sweep.resize(alphas.size());
    parallel_for(alphas.size(), [&](std::size_t k) {
        MergeConfig cfg = base;
        cfg.algorithm = MergeAlgorithm::regmean;
        cfg.regularizer = Regularizer::offdiag_scale;
        cfg.alpha = alphas[k];
        MergeReport rep;
        const ModelInstance merged = merge_workbench(wb, cfg, &rep);
        r.sweep[k] = sweep_point(wb, merged, rep, "alpha", alphas[k]);
    });
    return r;
}

EvalReport sweep_batches(const Workbench& wb, std::vector<std::size_t> counts, const MergeConfig& base) {
    std::sort(counts.begin(), counts.end());
    EvalReport r;
    r.experiment = "sweep_batches";
    r.config = workbench_echo(wb);
    r.config["metric"] = to_string(wb.config.metric);
    r.config["merge"] = to_json(base);
    r.config["counts"] = counts;
    r.sweep.resize(counts.size());
    parallel_for(counts.size(), [&](std::size_t k) {
        CollectConfig collect = wb.config.collect;
        collect.max_batches = counts[k];
        std::vector<GramStats> grams;
        for (std::size_t i = 0; i < wb.models.size(); ++i)
            grams.push_back(collect_gram(wb.models[i], wb.domains[i].train, collect));
        MergeConfig cfg = base;
        cfg.algorithm = MergeAlgorithm::regmean;
        MergeReport rep;
        const ModelInstance merged = merge_with(wb, grams, cfg, &rep);
        r.sweep[k] = sweep_point(wb, merged, rep, "batches", static_cast<double>(counts[k]));
    });
    return r;
}

EvalReport run_greedy_experiment(const Workbench& wb, const NamedMerge& merge_cfg) {
    const bool use_ood = !wb.ood.empty();
    const auto& eval_sets = use_ood ? wb.ood : wb.domains;
    const auto& eval_names = use_ood ? wb.ood_names : wb.domain_names;
    const MetricKind kind = wb.config.metric;

    std::vector<GreedyCandidate> candidates;
    for (std::size_t i = 0; i < wb.models.size(); ++i)
        candidates.push_back({wb.domain_names[i], wb.models[i], wb.grams[i], wb.fishers[i]});
    const GreedyResult g = greedy_merge(
        candidates, [&](const ModelInstance& m) { return mean(scores_on(m, eval_sets, kind, true)); },
        merge_cfg.config);

    EvalReport r;
    r.experiment = "greedy";
    r.config = workbench_echo(wb);
    r.config["metric"] = to_string(kind);
    r.config["merge"] = to_json(merge_cfg.config);
    r.config["selection"] = use_ood ? "ood_validation" : "in_domain_validation";
    r.greedy = to_json(g);
    add_row(r, use_ood ? "ood" : "in_domain", "greedy_" + merge_cfg.name, eval_names,
            scores_on(with_params(wb.models[0], g.merged), eval_sets, kind));
    return r;
}

namespace benchmarks {

SyntheticTask noniid_task(std::uint64_t seed) {
    SyntheticTask t;
    t.name = "blobs";
    t.generator = Generator::gaussian_blobs;
    t.input_dim = 16;
    t.num_classes = 4;
    t.train = 4000;
    t.val = 500;
    t.test = 2000;
    t.task_seed = seed;
    t.seed = derive_seed(seed, 1);
    t.separation = 3.0;
    t.noise = 1.0;
    return t;
}

PartitionSpec noniid_partition(std::uint64_t seed) {
    PartitionSpec p;
    p.seed = derive_seed(seed, 2);
    return p;
}

ExperimentConfig noniid_config(std::uint64_t seed) {
    ExperimentConfig c;
    c.model.architecture = Architecture::mlp;
    c.model.hidden_dim = 32;
    c.model.depth = 1;
    c.model.activation = Activation::relu;
    c.train.lr = 0.1;
    c.train.epochs = 10;
    c.train.batch_size = 32;
    c.collect.batch_size = 16;
    c.collect.max_batches = 1000;
    c.seed = seed;
    return c;
}

namespace {

SyntheticTask shifted_domain(std::uint64_t seed, std::size_t k, std::string name, bool skew) {
    SyntheticTask t;
    t.name = std::move(name);
    t.generator = Generator::rotated_blobs;
    t.input_dim = 16;
    t.num_classes = 4;
    t.train = 1000;
    t.val = 300;
    t.test = 1000;
    t.task_seed = seed;
    t.seed = derive_seed(seed, 1000 + k);
    t.separation = 3.0;
    t.noise = 1.0;
    t.shift.rotation = 0.35 * static_cast<double>(k);
    Philox rng(derive_seed(seed, 2000 + k));
    for (std::size_t d = 0; d < t.input_dim; ++d) t.shift.mean_offset.push_back(0.4 * rng.normal());
    if (skew) {
        t.shift.class_prior.assign(t.num_classes, 1.0);
        t.shift.class_prior[k % t.num_classes] = 4.0;
    }
    return t;
}

}  // namespace

std::vector<SyntheticTask> domains(std::uint64_t seed) {
    std::vector<SyntheticTask> out;
    for (std::size_t k = 0; k < 4; ++k) out.push_back(shifted_domain(seed, k, "domain" + std::to_string(k), true));
    return out;
}

std::vector<SyntheticTask> ood_domains(std::uint64_t seed) {
    std::vector<SyntheticTask> out;
    out.push_back(shifted_domain(seed, 4, "heldout0", false));
    out.push_back(shifted_domain(seed, 5, "heldout1", false));
    out[0].shift.rotation = 0.5;
    out[1].shift.rotation = 0.2;
    return out;
}

ExperimentConfig multidomain_config(std::uint64_t seed) {
    ExperimentConfig c = noniid_config(seed);
    c.collect.batch_size = 8;
    return c;
}

Workbench adversarial_workbench(std::uint64_t seed) {
    const auto tasks = domains(seed);
    std::vector<std::string> names;
    std::vector<TaskSplits> splits;
    for (const auto& t : tasks) {
        names.push_back(t.name);
        splits.push_back(generate(t));
    }
    auto& bad = splits.back();
    const int c = static_cast<int>(bad.train.num_classes);
    for (int& y : bad.train.y) y = (y + 1) % c;
    for (int& y : bad.val.y) y = (y + 1) % c;
    names.back() += "_flipped";
    std::vector<std::string> ood_names;
    std::vector<TaskSplits> ood;
    for (const auto& t : ood_domains(seed)) {
        ood_names.push_back(t.name);
        ood.push_back(generate(t));
    }
    return prepare_workbench(std::move(names), std::move(splits), std::move(ood_names), std::move(ood),
                             multidomain_config(seed));
}

}  // namespace benchmarks

}  // namespace regmerge
