#include "regmerge/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "regmerge/error.hpp"
#include "regmerge/experiments.hpp"
#include "regmerge/kernels.hpp"
#include "regmerge/merge.hpp"
#include "regmerge/perm.hpp"
#include "regmerge/stats.hpp"
#include "regmerge/synthetic.hpp"

#ifndef REGMERGE_VERSION
#define REGMERGE_VERSION "0.0.0"
#endif

namespace regmerge {

using nlohmann::json;
namespace fs = std::filesystem;

const char* version() { return REGMERGE_VERSION; }

namespace {

// Bad flags, configs or inputs: exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

template <class Fn>
auto load(Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const UsageError&) {
        throw;
    } catch (const json::exception& e) {
        throw UsageError(e.what());
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path resolve(const fs::path& base_dir, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
}

struct Run {
    std::string command;
    std::vector<std::string> args;
    json config = json::object();
    std::vector<std::string> outputs;
    std::ostream* log = nullptr;
    bool verbose = false;

    void info(const std::string& msg) const {
        if (verbose) *log << "[regmerge] " << msg << '\n';
    }

    void finish(const fs::path& out_dir) {
        json j{{"tool", "regmerge"}, {"version", version()}, {"command", command},
               {"args", args},       {"config", config},     {"outputs", outputs}};
        if (config.contains("seed")) j["seed"] = config["seed"];
        write_json(out_dir / "run.json", j);
    }
};

fs::path prepare_out_dir(const std::string& out) {
    if (out.empty()) throw UsageError("--out is required");
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("cannot parse number '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError("empty number list");
    return out;
}

// ----- make-data ------------------------------------------------------------

struct MakeDataOpts {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

void cmd_make_data(const MakeDataOpts& o, Run& run) {
    const auto [task, partition] = load([&] {
        const json cfg = read_json(o.config);
        SyntheticTask t = synthetic_task_from_json(cfg.at("task"));
        if (o.seed) t.seed = *o.seed;
        std::optional<PartitionSpec> p;
        if (cfg.contains("partition")) p = partition_spec_from_json(cfg.at("partition"));
        return std::pair{t, p};
    });
    run.config = {{"task", to_json(task)}, {"seed", task.seed}};
    if (partition) run.config["partition"] = to_json(*partition);
    const fs::path dir = prepare_out_dir(o.out);
    const TaskSplits s = generate(task);
    for (const auto& [name, d] : {std::pair{"train.json", &s.train}, {"val.json", &s.val}, {"test.json", &s.test}}) {
        write_dataset(*d, dir / name);
        run.outputs.push_back((dir / name).string());
    }
    if (partition) {
        const Partitions parts = load([&] { return make_noniid_partitions(s.train, *partition); });
        write_dataset(parts.first, dir / "partition1.json");
        write_dataset(parts.second, dir / "partition2.json");
        run.outputs.push_back((dir / "partition1.json").string());
        run.outputs.push_back((dir / "partition2.json").string());
        run.config["key_class"] = parts.key_class;
    }
    run.finish(dir);
}

// ----- train ----------------------------------------------------------------

struct TrainOpts {
    std::string config, out, data, val, name;
    std::optional<std::uint64_t> seed, init_seed;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<double> lr;
};

void cmd_train(const TrainOpts& o, Run& run) {
    struct Loaded {
        ModelSpec spec;
        TrainHyper hyper;
        std::uint64_t init_seed = 0;
        std::string name, dataset;
        fs::path train_path, val_path;
        Dataset train_set;
        std::optional<Dataset> val_set;
    };
    Loaded l = load([&] {
        Loaded l;
        const json cfg = read_json(o.config);
        const fs::path base = fs::path(o.config).parent_path();
        json spec = cfg.value("model", json::object());
        l.hyper = train_hyper_from_json(cfg.value("train", json::object()));
        if (o.seed) l.hyper.seed = *o.seed;
        if (o.epochs) l.hyper.epochs = *o.epochs;
        if (o.batch_size) l.hyper.batch_size = *o.batch_size;
        if (o.lr) l.hyper.lr = *o.lr;
        train_hyper_from_json(to_json(l.hyper));
        l.init_seed = o.init_seed ? *o.init_seed : cfg.value("init_seed", std::uint64_t{0});
        l.name = !o.name.empty() ? o.name : cfg.value("name", std::string("model"));
        if (!valid_tensor_name(l.name)) throw UsageError("model name must match [A-Za-z0-9_.]+");
        const json data = cfg.value("data", json::object());
        l.train_path = !o.data.empty() ? fs::path(o.data) : resolve(base, data.value("train", std::string()));
        if (l.train_path.empty()) throw UsageError("no training data: set data.train or --data");
        l.train_set = read_dataset(l.train_path);
        const std::string val = !o.val.empty() ? o.val : data.value("val", std::string());
        if (!val.empty()) {
            l.val_path = o.val.empty() ? resolve(base, val) : fs::path(val);
            l.val_set = read_dataset(l.val_path);
        }
        if (!spec.contains("input_dim")) spec["input_dim"] = l.train_set.x.cols();
        if (!spec.contains("num_classes")) spec["num_classes"] = l.train_set.num_classes;
        if (l.train_set.multi_label() && !spec.contains("output")) spec["output"] = "sigmoid";
        l.spec = model_spec_from_json(spec);
        if (l.spec.input_dim != l.train_set.x.cols() || l.spec.num_classes != l.train_set.num_classes)
            throw UsageError("model dimensions do not match the training data");
        l.dataset = cfg.value("dataset", l.train_path.stem().string());
        return l;
    });
    run.config = {{"model", to_json(l.spec)},
                  {"train", to_json(l.hyper)},
                  {"init_seed", l.init_seed},
                  {"name", l.name},
                  {"dataset", l.dataset},
                  {"data", {{"train", l.train_path.string()}, {"val", l.val_path.string()}}},
                  {"seed", l.hyper.seed}};
    const fs::path dir = prepare_out_dir(o.out);
    run.info("training " + l.name + " on " + l.train_path.string());
    const ModelInstance init = init_pretrained(l.spec, l.init_seed);
    TrainResult r = train(init, l.train_set, l.val_set ? &*l.val_set : nullptr, l.hyper);
    r.model.params.metadata["dataset"] = l.dataset;
    r.model.params.metadata["id"] = l.name;
    r.model.params.metadata["init_seed"] = std::to_string(l.init_seed);
    const fs::path ckpt = dir / (l.name + ".ckpt");
    write_checkpoint(r.model.params, ckpt);
    run.outputs.push_back(ckpt.string());
    run.config["best_epoch"] = r.best_epoch;
    run.config["val_history"] = r.val_history;
    run.finish(dir);
}

// ----- collect-stats --------------------------------------------------------

struct CollectOpts {
    std::string model, data, out, config;
    bool gram = false, fisher = false;
    std::optional<std::size_t> batch_size, max_batches;
    std::optional<std::uint64_t> seed;
};

void cmd_collect(const CollectOpts& o, Run& run) {
    struct Loaded {
        ModelInstance model;
        Dataset data;
        CollectConfig cfg;
    };
    Loaded l = load([&] {
        Loaded l;
        json cfg = o.config.empty() ? json::object() : read_json(o.config);
        if (o.batch_size) cfg["batch_size"] = *o.batch_size;
        if (o.max_batches) cfg["max_batches"] = *o.max_batches;
        if (o.seed) cfg["seed"] = *o.seed;
        if (!cfg.contains("batch_size")) cfg["batch_size"] = 16;
        l.cfg = collect_config_from_json(cfg);
        if (o.model.empty() || o.data.empty()) throw UsageError("--model and --data are required");
        l.model = model_from_checkpoint(read_checkpoint(o.model));
        l.data = read_dataset(o.data);
        if (l.data.x.cols() != l.model.spec.input_dim) throw UsageError("data width does not match the model");
        return l;
    });
    const bool gram = o.gram || !o.fisher;
    const bool fisher = o.fisher || !o.gram;
    if (fisher && l.model.spec.num_classes < 2)
        throw UsageError("Fisher statistics need a classifier with at least 2 classes");
    run.config = {{"collect", to_json(l.cfg)},
                  {"model", o.model},
                  {"data", o.data},
                  {"gram", gram},
                  {"fisher", fisher},
                  {"seed", l.cfg.seed}};
    const fs::path dir = prepare_out_dir(o.out);
    const std::string stem = fs::path(o.model).stem().string();
    if (gram) {
        run.info("collecting Gram matrices");
        const fs::path p = dir / (stem + ".gram");
        write_gram(collect_gram(l.model, l.data, l.cfg), p);
        run.outputs.push_back(p.string());
    }
    if (fisher) {
        run.info("collecting Fisher diagonal");
        const fs::path p = dir / (stem + ".fisher");
        write_fisher(collect_fisher(l.model, l.data, l.cfg), p);
        run.outputs.push_back(p.string());
    }
    run.finish(dir);
}

// ----- merge ----------------------------------------------------------------

struct MergeOpts {
    std::string config, out, algo, regularizer;
    std::optional<double> alpha, beta, gamma;
    bool normalize = false;
    std::vector<std::string> models, stats, exclude;
    std::string weights;
};

MergeConfig resolve_merge_config(const std::string& config_path, const std::string& algo, const std::string& reg,
                                 std::optional<double> alpha, std::optional<double> beta,
                                 std::optional<double> gamma, bool normalize,
                                 const std::vector<std::string>& exclude, const std::string& weights) {
    json cfg = config_path.empty() ? json::object() : read_json(config_path);
    if (!algo.empty()) cfg["algorithm"] = algo;
    if (!reg.empty()) cfg["regularizer"] = reg;
    if (alpha) cfg["alpha"] = *alpha;
    if (beta) {
        cfg["beta"] = *beta;
        if (reg.empty()) cfg["regularizer"] = "additive";
    }
    if (gamma) {
        cfg["gamma"] = *gamma;
        if (reg.empty()) cfg["regularizer"] = "diag_ridge";
    }
    if (normalize) cfg["normalize_gram_per_example"] = true;
    if (!exclude.empty()) cfg["exclude_patterns"] = exclude;
    if (!weights.empty()) cfg["weights_override"] = parse_doubles(weights);
    return merge_config_from_json(cfg);
}

void split_stats(const std::vector<std::string>& paths, std::vector<GramStats>& grams,
                 std::vector<FisherStats>& fishers) {
    for (const auto& p : paths) {
        const std::string kind = peek_kind(p);
        if (kind == "gram") grams.push_back(read_gram(p));
        else if (kind == "fisher") fishers.push_back(read_fisher(p));
        else throw UsageError(p + " is a " + kind + " file, not a statistics file");
    }
}

void check_stats_present(const MergeConfig& cfg, std::size_t models, std::size_t grams, std::size_t fishers) {
    if (cfg.algorithm == MergeAlgorithm::regmean && grams != models)
        throw UsageError("regmean needs one .gram file per model (got " + std::to_string(grams) + " for " +
                         std::to_string(models) + " models); produce them with `regmerge collect-stats --gram` "
                         "and pass them with --stats in model order");
    if (cfg.algorithm == MergeAlgorithm::fisher && fishers != models)
        throw UsageError("fisher merging needs one .fisher file per model (got " + std::to_string(fishers) +
                         " for " + std::to_string(models) + " models); produce them with "
                         "`regmerge collect-stats --fisher` and pass them with --stats in model order");
}

void cmd_merge(const MergeOpts& o, Run& run) {
    struct Loaded {
        MergeConfig cfg;
        std::vector<NamedTensorMap> models;
        std::vector<GramStats> grams;
        std::vector<FisherStats> fishers;
    };
    Loaded l = load([&] {
        Loaded l;
        l.cfg = resolve_merge_config(o.config, o.algo, o.regularizer, o.alpha, o.beta, o.gamma, o.normalize,
                                     o.exclude, o.weights);
        if (o.models.empty()) throw UsageError("--models needs at least one checkpoint");
        for (const auto& m : o.models) l.models.push_back(read_checkpoint(m));
        split_stats(o.stats, l.grams, l.fishers);
        check_stats_present(l.cfg, l.models.size(), l.grams.size(), l.fishers.size());
        return l;
    });
    run.config = {{"merge", to_json(l.cfg)}, {"models", o.models}, {"stats", o.stats}};
    fs::path out(o.out);
    fs::path dir, ckpt;
    if (out.extension() == ".ckpt") {
        dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
        prepare_out_dir(dir.string());
        ckpt = out;
    } else {
        dir = prepare_out_dir(o.out);
        ckpt = dir / "merged.ckpt";
    }
    run.info(std::string("merging ") + std::to_string(l.models.size()) + " models with " + to_string(l.cfg.algorithm));
    const MergeResult r = load([&] { return merge(l.models, l.grams, l.fishers, l.cfg); });
    write_checkpoint(r.merged, ckpt);
    const fs::path report = dir / (ckpt.stem().string() + ".report.json");
    write_json(report, to_json(r.report));
    run.outputs = {ckpt.string(), report.string()};
    run.finish(dir);
}

// ----- eval and experiments -------------------------------------------------

void write_report(const EvalReport& r, const fs::path& dir, Run& run) {
    write_json(dir / "report.json", to_json(r));
    write_text(dir / "report.csv", to_csv(r));
    run.outputs.push_back((dir / "report.json").string());
    run.outputs.push_back((dir / "report.csv").string());
}

Workbench workbench_from_config(const json& cfg, std::optional<std::uint64_t> seed) {
    const std::string bench = cfg.value("benchmark", std::string());
    if (bench == "multidomain" || bench == "adversarial") {
        const std::uint64_t s = seed ? *seed : cfg.value("seed", std::uint64_t{bench == "adversarial" ? 13u : 11u});
        if (bench == "adversarial") return benchmarks::adversarial_workbench(s);
        const auto d = benchmarks::domains(s);
        const auto o = benchmarks::ood_domains(s);
        return prepare_workbench(d, o, benchmarks::multidomain_config(s));
    }
    if (!bench.empty()) throw UsageError("unknown benchmark '" + bench + "'");
    std::vector<SyntheticTask> domains, ood;
    for (const json& t : cfg.at("domains")) domains.push_back(synthetic_task_from_json(t));
    for (const json& t : cfg.value("ood", json::array())) ood.push_back(synthetic_task_from_json(t));
    ExperimentConfig ec = experiment_config_from_json(cfg.value("experiment", json::object()));
    if (seed) ec.seed = *seed;
    return prepare_workbench(domains, ood, ec);
}

struct EvalOpts {
    std::string config, out, metric = "accuracy";
    std::vector<std::string> models, data;
    std::optional<std::uint64_t> seed;
};

void cmd_eval(const EvalOpts& o, Run& run) {
    const fs::path dir = prepare_out_dir(o.out);
    if (!o.models.empty()) {
        struct Loaded {
            std::vector<ModelInstance> models;
            std::vector<Dataset> data;
            MetricKind kind;
        };
        Loaded l = load([&] {
            Loaded l;
            l.kind = metric_from_string(o.metric);
            if (o.data.empty()) throw UsageError("--data is required with --models");
            for (const auto& m : o.models) l.models.push_back(model_from_checkpoint(read_checkpoint(m)));
            for (const auto& d : o.data) l.data.push_back(read_dataset(d));
            return l;
        });
        EvalReport r;
        r.experiment = "checkpoint";
        // File names only, so reports do not depend on where the run happened.
        std::vector<std::string> model_files, data_files;
        for (const auto& m : o.models) model_files.push_back(fs::path(m).filename().string());
        for (const auto& d : o.data) data_files.push_back(fs::path(d).filename().string());
        r.config = {{"models", model_files}, {"data", data_files}, {"metric", o.metric}};
        std::vector<std::string> names;
        for (const auto& d : o.data) names.push_back(fs::path(d).stem().string());
        for (std::size_t k = 0; k < l.models.size(); ++k) {
            ScoreRow row{"test", fs::path(o.models[k]).stem().string(), names, {}, 0.0};
            for (const auto& d : l.data) row.values.push_back(100.0 * evaluate(l.models[k], d, l.kind));
            double s = 0.0;
            for (double v : row.values) s += v;
            row.macro_average = s / static_cast<double>(row.values.size());
            r.rows.push_back(std::move(row));
        }
        run.config = {{"models", o.models}, {"data", o.data}, {"metric", o.metric}};
        write_report(r, dir, run);
        run.finish(dir);
        return;
    }
    if (o.config.empty()) throw UsageError("eval needs --config or --models/--data");
    const json cfg = read_json(o.config);
    run.config = cfg;
    if (o.seed) run.config["seed"] = *o.seed;
    const std::string kind = cfg.value("kind", std::string("noniid"));
    EvalReport r;
    if (kind == "noniid") {
        const auto [task, part, ec] = load([&] {
            const std::uint64_t s = o.seed ? *o.seed : cfg.value("seed", std::uint64_t{7});
            if (cfg.value("benchmark", std::string()) == "noniid")
                return std::tuple{benchmarks::noniid_task(s), benchmarks::noniid_partition(s),
                                  benchmarks::noniid_config(s)};
            ExperimentConfig ec = experiment_config_from_json(cfg.value("experiment", json::object()));
            if (o.seed) ec.seed = *o.seed;
            return std::tuple{synthetic_task_from_json(cfg.at("task")),
                              partition_spec_from_json(cfg.value("partition", json::object())), ec};
        });
        r = load([&] { return run_noniid_experiment(task, part, ec); });
    } else if (kind == "multidomain") {
        const Workbench wb = load([&] { return workbench_from_config(cfg, o.seed); });
        r = run_multidomain_experiment(wb);
    } else {
        throw UsageError("unknown experiment '" + kind + "' (expected noniid or multidomain)");
    }
    write_report(r, dir, run);
    run.finish(dir);
}

struct BenchOpts {
    std::string config, out, algo = "regmean", list;
    std::optional<double> alpha;
    std::optional<std::uint64_t> seed;
};

NamedMerge named_merge(const BenchOpts& o) {
    MergeConfig cfg = resolve_merge_config("", o.algo, "", o.alpha, std::nullopt, std::nullopt, false, {}, "");
    return {o.algo, cfg};
}

void cmd_workbench(const std::string& command, const BenchOpts& o, Run& run) {
    const auto [cfg, merge_cfg] = load([&] {
        if (o.config.empty()) throw UsageError("--config is required");
        return std::pair{read_json(o.config), named_merge(o)};
    });
    run.config = cfg;
    run.config["merge"] = to_json(merge_cfg.config);
    if (o.seed) run.config["seed"] = *o.seed;
    const fs::path dir = prepare_out_dir(o.out);
    const Workbench wb = load([&] { return workbench_from_config(cfg, o.seed); });
    EvalReport r;
    if (command == "sweep-alpha") {
        const auto alphas = o.list.empty() ? cfg.value("alphas", std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9, 1.0})
                                           : parse_doubles(o.list);
        run.config["alphas"] = alphas;
        r = load([&] { return sweep_alpha(wb, alphas, merge_cfg.config); });
    } else if (command == "sweep-batches") {
        std::vector<std::size_t> counts;
        if (o.list.empty()) {
            counts = cfg.value("counts", std::vector<std::size_t>{1, 10, 100, 1000});
        } else {
            for (double v : parse_doubles(o.list)) {
                if (!(v >= 1.0) || v != static_cast<double>(static_cast<std::size_t>(v)))
                    throw UsageError("batch counts must be positive integers");
                counts.push_back(static_cast<std::size_t>(v));
            }
        }
        run.config["counts"] = counts;
        r = load([&] { return sweep_batches(wb, counts, merge_cfg.config); });
    } else if (command == "greedy-merge") {
        r = run_greedy_experiment(wb, merge_cfg);
    } else {
        r.experiment = "pairwise";
        r.config = {{"merge", to_json(merge_cfg.config)}, {"domains", wb.domain_names},
                    {"metric", to_string(wb.config.metric)}};
        r.pairwise.push_back(pairwise_drop(wb, merge_cfg));
    }
    write_report(r, dir, run);
    run.finish(dir);
}

// ----- match ----------------------------------------------------------------

struct MatchOpts {
    std::string model_a, model_b, method = "weight_based", algo = "simple", probe, out;
    std::optional<double> alpha;
    std::vector<std::string> stats;
};

void cmd_match(const MatchOpts& o, Run& run) {
    struct Loaded {
        ModelInstance a, b;
        MatchMethod method;
        MergeConfig cfg;
        MatchInputs inputs;
    };
    Loaded l = load([&] {
        Loaded l;
        l.method = match_method_from_string(o.method);
        l.cfg = resolve_merge_config("", o.algo, "", o.alpha, std::nullopt, std::nullopt, false, {}, "");
        if (o.model_a.empty() || o.model_b.empty()) throw UsageError("--model-a and --model-b are required");
        l.a = model_from_checkpoint(read_checkpoint(o.model_a));
        l.b = model_from_checkpoint(read_checkpoint(o.model_b));
        if (l.a.spec.architecture != Architecture::mlp || !(l.a.spec == l.b.spec))
            throw UsageError("match needs two MLP checkpoints with the same spec");
        if (!o.probe.empty()) l.inputs.probe = read_dataset(o.probe).x;
        if (l.method == MatchMethod::activation_based && !l.inputs.probe)
            throw UsageError("activation_based matching needs --data with probe examples");
        split_stats(o.stats, l.inputs.grams, l.inputs.fishers);
        check_stats_present(l.cfg, 2, l.inputs.grams.size(), l.inputs.fishers.size());
        return l;
    });
    run.config = {{"model_a", o.model_a}, {"model_b", o.model_b}, {"method", o.method},
                  {"merge", to_json(l.cfg)}, {"data", o.probe},      {"stats", o.stats}};
    const fs::path dir = prepare_out_dir(o.out);
    const MatchResult r = load([&] { return match_and_merge(l.a, l.b, l.method, l.cfg, l.inputs); });
    write_checkpoint(r.merge.merged, dir / "matched.ckpt");
    write_json(dir / "grids.json", to_json(r));
    run.outputs = {(dir / "matched.ckpt").string(), (dir / "grids.json").string()};
    run.finish(dir);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"regmerge: dataless merging of fine-tuned models (RegMean, Fisher, simple averaging)"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", std::string(version()));
    int threads = 0;
    bool verbose = false;
    auto* threads_opt = app.add_option("--threads", threads,
                                       "Worker threads (default: machine parallelism; env REGMERGE_THREADS)")
                            ->check(CLI::NonNegativeNumber);
    app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

    MakeDataOpts md;
    auto* make_data = app.add_subcommand("make-data", "Generate a synthetic task (and optional non-iid partitions)");
    make_data->add_option("--config", md.config, "Task config JSON")->required();
    make_data->add_option("--out", md.out, "Output directory")->required();
    make_data->add_option("--seed", md.seed, "Overrides task.seed");

    TrainOpts tr;
    auto* train_cmd = app.add_subcommand("train", "Train a zoo model from a shared initialisation");
    train_cmd->add_option("--config", tr.config, "Training config JSON")->required();
    train_cmd->add_option("--out", tr.out, "Output directory")->required();
    train_cmd->add_option("--data", tr.data, "Overrides data.train");
    train_cmd->add_option("--val", tr.val, "Overrides data.val");
    train_cmd->add_option("--name", tr.name, "Overrides name (checkpoint file stem)");
    train_cmd->add_option("--seed", tr.seed, "Overrides train.seed");
    train_cmd->add_option("--init-seed", tr.init_seed, "Overrides init_seed");
    train_cmd->add_option("--epochs", tr.epochs, "Overrides train.epochs");
    train_cmd->add_option("--batch-size", tr.batch_size, "Overrides train.batch_size");
    train_cmd->add_option("--lr", tr.lr, "Overrides train.lr");

    CollectOpts co;
    auto* collect = app.add_subcommand("collect-stats", "Compute Gram and/or Fisher statistics");
    collect->add_option("--model", co.model, "Checkpoint")->required();
    collect->add_option("--data", co.data, "Dataset JSON")->required();
    collect->add_option("--out", co.out, "Output directory")->required();
    collect->add_option("--config", co.config, "Collect config JSON");
    collect->add_flag("--gram", co.gram, "Write the .gram file");
    collect->add_flag("--fisher", co.fisher, "Write the .fisher file");
    collect->add_option("--batch-size", co.batch_size, "Examples per batch (default 16)");
    collect->add_option("--max-batches", co.max_batches, "Batch cap (default 1000)");
    collect->add_option("--seed", co.seed, "Example order seed");

    MergeOpts mo;
    auto* merge_cmd = app.add_subcommand("merge", "Merge checkpoints");
    merge_cmd->add_option("--config", mo.config, "Merge config JSON");
    merge_cmd->add_option("--algo", mo.algo, "simple, fisher or regmean");
    merge_cmd->add_option("--alpha", mo.alpha, "Off-diagonal Gram scale in [0,1] (default 0.9)");
    merge_cmd->add_option("--regularizer", mo.regularizer, "offdiag_scale, additive or diag_ridge");
    merge_cmd->add_option("--beta", mo.beta, "Additive ridge G + beta*I");
    merge_cmd->add_option("--gamma", mo.gamma, "Diagonal ridge G + gamma*diag(G)");
    merge_cmd->add_flag("--normalize-gram", mo.normalize, "Divide each Gram by its example count");
    merge_cmd->add_option("--models", mo.models, "Checkpoints")->required();
    merge_cmd->add_option("--stats", mo.stats, "Gram or Fisher files, in model order");
    merge_cmd->add_option("--exclude", mo.exclude, "Glob of keys to leave out, e.g. 'head.*'");
    merge_cmd->add_option("--weights", mo.weights, "Comma-separated weights for simple averaging");
    merge_cmd->add_option("--out", mo.out, "Output .ckpt path or directory")->required();

    EvalOpts ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints or run an experiment config");
    eval_cmd->add_option("--config", ev.config, "Experiment config JSON (noniid or multidomain)");
    eval_cmd->add_option("--models", ev.models, "Checkpoints to score");
    eval_cmd->add_option("--data", ev.data, "Datasets to score on");
    eval_cmd->add_option("--metric", ev.metric, "accuracy, macro_f1 or matthews");
    eval_cmd->add_option("--seed", ev.seed, "Overrides the experiment seed");
    eval_cmd->add_option("--out", ev.out, "Output directory")->required();

    std::map<std::string, BenchOpts> bench_opts;
    std::vector<std::pair<std::string, CLI::App*>> bench_cmds;
    for (const auto& [name, help] : {std::pair{"sweep-alpha", "RegMean score against alpha"},
                                     {"sweep-batches", "RegMean score against the Gram batch count"},
                                     {"greedy-merge", "Greedy subset merging"},
                                     {"pairwise", "Pairwise relative drop of merged models"}}) {
        BenchOpts& b = bench_opts[name];
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", b.config, "Workbench config JSON")->required();
        sub->add_option("--out", b.out, "Output directory")->required();
        sub->add_option("--algo", b.algo, "Merge algorithm (default regmean)");
        sub->add_option("--alpha", b.alpha, "RegMean alpha");
        sub->add_option("--seed", b.seed, "Overrides the benchmark seed");
        if (std::string(name) == "sweep-alpha") sub->add_option("--alphas", b.list, "Comma-separated alphas");
        if (std::string(name) == "sweep-batches") sub->add_option("--counts", b.list, "Comma-separated batch counts");
        bench_cmds.emplace_back(name, sub);
    }

    MatchOpts ma;
    auto* match = app.add_subcommand("match", "Permutation-match two MLPs, then merge");
    match->add_option("--model-a", ma.model_a, "Reference checkpoint")->required();
    match->add_option("--model-b", ma.model_b, "Checkpoint to align")->required();
    match->add_option("--method", ma.method, "weight_based or activation_based");
    match->add_option("--algo", ma.algo, "Merge algorithm (default simple)");
    match->add_option("--alpha", ma.alpha, "RegMean alpha");
    match->add_option("--data", ma.probe, "Probe dataset for activation matching");
    match->add_option("--stats", ma.stats, "Stats of model a then model b");
    match->add_option("--out", ma.out, "Output directory")->required();

    std::vector<std::string> argv_store{"regmerge"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << version() << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        if (e.get_exit_code() != 0) err << "run with --help for usage\n";
        return kExitUsage;
    }

    if (threads_opt->count() == 0) {
        if (const char* env = std::getenv("REGMERGE_THREADS"); env && *env) {
            try {
                std::size_t used = 0;
                threads = std::stoi(env, &used);
                if (env[used] != '\0') threads = -1;
            } catch (const std::exception&) {
                threads = -1;
            }
        }
    }
    if (threads < 0) {
        err << "error: --threads / REGMERGE_THREADS must be >= 0\n";
        return kExitUsage;
    }
    if (threads > 0) kernels::set_thread_count(threads);
    Run run;
    run.log = &err;
    run.verbose = verbose;
    run.args = args;
    try {
        if (make_data->parsed()) {
            run.command = "make-data";
            cmd_make_data(md, run);
        } else if (train_cmd->parsed()) {
            run.command = "train";
            cmd_train(tr, run);
        } else if (collect->parsed()) {
            run.command = "collect-stats";
            cmd_collect(co, run);
        } else if (merge_cmd->parsed()) {
            run.command = "merge";
            cmd_merge(mo, run);
        } else if (eval_cmd->parsed()) {
            run.command = "eval";
            cmd_eval(ev, run);
        } else if (match->parsed()) {
            run.command = "match";
            cmd_match(ma, run);
        } else {
            for (const auto& [name, sub] : bench_cmds) {
                if (!sub->parsed()) continue;
                run.command = name;
                cmd_workbench(name, bench_opts[name], run);
            }
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << run.command << " failed: " << e.what() << '\n';
        return kExitFailure;
    }
    if (threads > 0) kernels::set_thread_count(0);
    return kExitOk;
}

json run_golden_pipeline(const fs::path& workdir) {
    fs::create_directories(workdir);
    const fs::path data = workdir / "data";
    write_json(workdir / "task.json",
               {{"task",
                 {{"name", "golden"},
                  {"generator", "gaussian_blobs"},
                  {"input_dim", 8},
                  {"num_classes", 3},
                  {"sizes", {{"train", 2000}, {"val", 300}, {"test", 600}}},
                  {"task_seed", 3},
                  {"seed", 5},
                  {"separation", 2.5}}},
                {"partition", {{"key_class", 0}, {"key_fraction", 0.8}, {"partition_size", 800}, {"seed", 9}}}});
    for (const char* agent : {"a", "b"}) {
        write_json(workdir / (std::string("train_") + agent + ".json"),
                   {{"model", {{"architecture", "mlp"}, {"hidden_dim", 16}, {"activation", "gelu"}}},
                    {"train", {{"lr", 0.1}, {"epochs", 8}, {"batch_size", 32}, {"seed", agent[0] == 'a' ? 1 : 2}}},
                    {"data",
                     {{"train", std::string("data/partition") + (agent[0] == 'a' ? "1" : "2") + ".json"},
                      {"val", "data/val.json"}}},
                    {"init_seed", 42},
                    {"name", agent}});
    }
    std::ostringstream sink_out, sink_err;
    auto step = [&](std::vector<std::string> args) {
        const int code = run_cli(args, sink_out, sink_err);
        if (code != kExitOk) throw Error("golden pipeline step '" + args[0] + "' failed: " + sink_err.str());
    };
    const std::string w = workdir.string();
    step({"make-data", "--config", w + "/task.json", "--out", data.string()});
    step({"train", "--config", w + "/train_a.json", "--out", w + "/models"});
    step({"train", "--config", w + "/train_b.json", "--out", w + "/models"});
    step({"collect-stats", "--model", w + "/models/a.ckpt", "--data", data.string() + "/partition1.json", "--out",
          w + "/stats"});
    step({"collect-stats", "--model", w + "/models/b.ckpt", "--data", data.string() + "/partition2.json", "--out",
          w + "/stats"});
    step({"merge", "--algo", "regmean", "--alpha", "0.9", "--models", w + "/models/a.ckpt", w + "/models/b.ckpt",
          "--stats", w + "/stats/a.gram", w + "/stats/b.gram", "--out", w + "/merged/merged.ckpt"});
    step({"eval", "--models", w + "/models/a.ckpt", w + "/models/b.ckpt", w + "/merged/merged.ckpt", "--data",
          data.string() + "/test.json", "--out", w + "/eval"});

    json hashes = json::object();
    for (const char* f : {"models/a.ckpt", "models/b.ckpt", "stats/a.gram", "stats/b.gram", "stats/a.fisher",
                          "stats/b.fisher", "merged/merged.ckpt", "eval/report.json"})
        hashes[f] = sha256_file(workdir / f);
    const EvalReport report = eval_report_from_json(read_json(workdir / "eval/report.json"));
    json scores = json::object();
    for (const auto& row : report.rows) scores[row.method] = row.macro_average;
    return json{{"sha256", hashes}, {"test_accuracy", scores}};
}

}  // namespace regmerge
