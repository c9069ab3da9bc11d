#pragma once

// Experimental protocols on synthetic data: non-iid pair merging, multi-domain
// merging with in-domain and out-of-domain reporting, pairwise relative drop,
// greedy subset merging and the α / batch-count sweeps.
//
// Every experiment is a pure function of its configuration and seeds: two
// runs produce identical reports.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "regmerge/merge.hpp"
#include "regmerge/model.hpp"
#include "regmerge/stats.hpp"
#include "regmerge/synthetic.hpp"

namespace regmerge {

struct NamedMerge {
    std::string name;
    MergeConfig config;
};

/// simple, fisher and regmean (α = 0.9).
std::vector<NamedMerge> default_merges();

struct ExperimentConfig {
    /// input_dim and num_classes are taken from the data.
    ModelSpec model;
    TrainHyper train;
    CollectConfig collect;
    std::vector<NamedMerge> merges = default_merges();
    MetricKind metric = MetricKind::accuracy;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Scores of one method on the datasets of one section ("joint", "in_domain", "ood").
/// Values are in points (metric × 100).
struct ScoreRow {
    std::string section;
    std::string method;
    std::vector<std::string> datasets;
    std::vector<double> values;
    double macro_average = 0.0;

    friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

/// drop(i, j) = [M(merge(f_i, f_j), D_i) − M(f_i, D_i)] / M(f_i, D_i), in percent.
/// The diagonal is zero by definition. Cells with M(f_i, D_i) == 0 are
/// flagged and left out of the mean.
struct PairwiseDrop {
    std::string method;
    Matrix drop;
    std::vector<std::vector<bool>> undefined;
    double mean_off_diagonal = 0.0;
    std::size_t flagged = 0;

    friend bool operator==(const PairwiseDrop&, const PairwiseDrop&) = default;
};

struct SweepRow {
    std::string parameter;
    double value = 0.0;
    double in_domain = 0.0;
    /// Equal to in_domain when there are no held-out tasks.
    double ood = 0.0;
    double max_jitter = 0.0;

    friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct EvalReport {
    std::string experiment;
    nlohmann::json config;
    std::vector<ScoreRow> rows;
    std::vector<PairwiseDrop> pairwise;
    std::vector<SweepRow> sweep;
    nlohmann::json greedy;

    /// Throws ValidationError when the row is absent.
    const ScoreRow& row(const std::string& section, const std::string& method) const;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
/// Flat rows: experiment,method,dataset,metric,value.
std::string to_csv(const EvalReport& r);

/// Trained models plus their statistics, shared by the experiments so sweeps
/// do not retrain.
struct Workbench {
    ExperimentConfig config;
    std::vector<std::string> domain_names, ood_names;
    std::vector<TaskSplits> domains, ood;
    ModelInstance init;
    std::vector<ModelInstance> models;
    std::vector<GramStats> grams;
    std::vector<FisherStats> fishers;
};

/// Trains one model per domain from a shared initialisation and collects its
/// Gram and Fisher statistics on the domain's training split.
Workbench prepare_workbench(std::vector<std::string> domain_names, std::vector<TaskSplits> domains,
                            std::vector<std::string> ood_names, std::vector<TaskSplits> ood,
                            const ExperimentConfig& cfg);
Workbench prepare_workbench(std::span<const SyntheticTask> domains, std::span<const SyntheticTask> ood,
                            const ExperimentConfig& cfg);

/// Merges all workbench models; keys left out by exclusion keep model 0's values.
ModelInstance merge_workbench(const Workbench& wb, const MergeConfig& cfg, MergeReport* report = nullptr);

/// Two models on key-class partitions of one task, merged pairwise and scored
/// on the task's joint test split.
EvalReport run_noniid_experiment(const SyntheticTask& task, const PartitionSpec& partition,
                                 const ExperimentConfig& cfg);

/// Individual, ensemble, merge and MTL baselines with in-domain and OOD
/// macro-averages, plus the pairwise drop of every merge method.
EvalReport run_multidomain_experiment(const Workbench& wb);
EvalReport run_multidomain_experiment(std::span<const SyntheticTask> domains, std::span<const SyntheticTask> ood,
                                      const ExperimentConfig& cfg);

PairwiseDrop pairwise_drop(std::span<const ModelInstance> models, std::span<const GramStats> grams,
                           std::span<const FisherStats> fishers, std::span<const Dataset> tests,
                           const NamedMerge& merge, MetricKind metric);
PairwiseDrop pairwise_drop(const Workbench& wb, const NamedMerge& merge);

/// In-domain / OOD macro-averages of RegMean at each α, sorted by α.
EvalReport sweep_alpha(const Workbench& wb, std::vector<double> alphas, const MergeConfig& base);
/// Recollects Grams with max_batches = N for each count and re-merges.
EvalReport sweep_batches(const Workbench& wb, std::vector<std::size_t> counts, const MergeConfig& base);

/// Greedy subset merging scored on the held-out validation splits (or the
/// in-domain ones when there are none).
EvalReport run_greedy_experiment(const Workbench& wb, const NamedMerge& merge);

/// The seeded benchmarks referenced by the tests and the expectations file.
namespace benchmarks {

SyntheticTask noniid_task(std::uint64_t seed = 7);
PartitionSpec noniid_partition(std::uint64_t seed = 7);
ExperimentConfig noniid_config(std::uint64_t seed = 7);

/// Four shifted domains of one task and two held-out domains.
std::vector<SyntheticTask> domains(std::uint64_t seed = 11);
std::vector<SyntheticTask> ood_domains(std::uint64_t seed = 11);
ExperimentConfig multidomain_config(std::uint64_t seed = 11);

/// Like domains() but the last domain's training labels are shifted by one
/// class, producing a model that only hurts a merge.
Workbench adversarial_workbench(std::uint64_t seed = 13);

}  // namespace benchmarks

}  // namespace regmerge
