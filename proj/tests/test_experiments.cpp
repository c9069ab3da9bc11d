#include <doctest.h>

#include <numeric>
#include <sstream>

#include "regmerge/error.hpp"
#include "regmerge/experiments.hpp"

using namespace regmerge;

namespace {

SyntheticTask domain(int k) {
    SyntheticTask t;
    t.name = "d" + std::to_string(k);
    t.generator = Generator::rotated_blobs;
    t.input_dim = 4;
    t.num_classes = 3;
    t.train = 150;
    t.val = 60;
    t.test = 80;
    t.task_seed = 5;
    t.seed = 100 + static_cast<std::uint64_t>(k);
    t.shift.rotation = 0.4 * k;
    return t;
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.model.architecture = Architecture::mlp;
    c.model.hidden_dim = 8;
    c.train.epochs = 3;
    c.collect.batch_size = 8;
    c.seed = 3;
    return c;
}

const Workbench& bench() {
    static const Workbench wb = [] {
        const SyntheticTask d[] = {domain(0), domain(1), domain(2)};
        const SyntheticTask o[] = {domain(3)};
        return prepare_workbench(d, o, small_config());
    }();
    return wb;
}

}  // namespace

TEST_CASE("multidomain report structure and exact macro averages") {
    const EvalReport r = run_multidomain_experiment(bench());
    CHECK(r.experiment == "multidomain");
    for (const auto& row : r.rows) {
        CAPTURE(row.method);
        const double mean = std::accumulate(row.values.begin(), row.values.end(), 0.0) /
                            static_cast<double>(row.values.size());
        CHECK(row.macro_average == mean);
        CHECK(row.values.size() == row.datasets.size());
    }
    for (const char* m : {"avg_individual", "best_individual", "ensemble", "simple", "fisher", "regmean", "mtl"}) {
        CHECK_NOTHROW(r.row("in_domain", m));
        CHECK_NOTHROW(r.row("ood", m));
    }
    CHECK_NOTHROW(r.row("in_domain", "domain_specific"));
    CHECK_THROWS_AS(r.row("in_domain", "nope"), ValidationError);
    CHECK(r.pairwise.size() == 3);
    CHECK(r.config.contains("seed"));
}

TEST_CASE("experiments are bit-reproducible") {
    const SyntheticTask d[] = {domain(0), domain(1)};
    const EvalReport a = run_multidomain_experiment(d, {}, small_config());
    const EvalReport b = run_multidomain_experiment(d, {}, small_config());
    CHECK(a == b);
    CHECK(to_json(a).dump() == to_json(b).dump());
}

TEST_CASE("report json and csv") {
    const EvalReport r = run_multidomain_experiment(bench());
    CHECK(eval_report_from_json(to_json(r)) == r);
    const std::string csv = to_csv(r);
    std::istringstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "experiment,method,dataset,metric,value");
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    std::size_t cells = 0;
    for (const auto& row : r.rows) cells += row.values.size() + 1;
    CHECK(lines >= cells);
}

TEST_CASE("pairwise drop") {
    const PairwiseDrop p = pairwise_drop(bench(), {"regmean", MergeConfig{}});
    CHECK(p.drop.rows() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.drop(i, i) == 0.0);
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j) s += p.drop(i, j);
    CHECK(p.mean_off_diagonal == doctest::Approx(s / 6));
    CHECK(p.flagged == 0);
}

TEST_CASE("pairwise drop flags a zero baseline") {
    const Workbench& wb = bench();
    std::vector<Dataset> tests;
    for (const auto& d : wb.domains) tests.push_back(d.test);
    // Relabel domain 0 so model 0 scores zero on it.
    const auto pred = predict(wb.models[0], tests[0].x);
    for (std::size_t i = 0; i < pred.size(); ++i) tests[0].y[i] = (pred[i] + 1) % 3;
    const PairwiseDrop p =
        pairwise_drop(wb.models, wb.grams, wb.fishers, tests, {"simple", [] {
                          MergeConfig c;
                          c.algorithm = MergeAlgorithm::simple;
                          return c;
                      }()},
                      MetricKind::accuracy);
    CHECK(p.flagged == 2);
    CHECK(p.undefined[0][1]);
}

TEST_CASE("alpha sweep rows are sorted and alpha 0 matches the diagonal formula") {
    const EvalReport r = sweep_alpha(bench(), {0.9, 0.0, 0.5, 1.0}, MergeConfig{});
    REQUIRE(r.sweep.size() == 4);
    for (std::size_t i = 1; i < 4; ++i) CHECK(r.sweep[i - 1].value < r.sweep[i].value);
    for (const auto& row : r.sweep) CHECK(std::isfinite(row.in_domain));

    // Diagonal reweighting done by hand on every linear layer.
    const Workbench& wb = bench();
    MergeConfig zero;
    zero.alpha = 0.0;
    const ModelInstance merged = merge_workbench(wb, zero);
    for (const auto& layer : wb.init.linear_layer_names) {
        const Matrix w = merged.weight(layer).to_matrix();
        for (std::size_t j = 0; j < w.rows(); ++j) {
            double den = 0;
            for (const auto& g : wb.grams) den += g.layers.at(layer).gram_sum(j, j);
            for (std::size_t c = 0; c < w.cols(); ++c) {
                double num = 0;
                for (std::size_t k = 0; k < wb.models.size(); ++k)
                    num += wb.grams[k].layers.at(layer).gram_sum(j, j) * wb.models[k].weight(layer).to_matrix()(j, c);
                CHECK(w(j, c) == doctest::Approx(num / den).epsilon(1e-10));
            }
        }
    }
    std::vector<double> scores;
    for (const auto& d : wb.domains) scores.push_back(100.0 * evaluate(merged, d.test, wb.config.metric));
    CHECK(r.sweep[0].in_domain ==
          doctest::Approx(std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size())));
}

TEST_CASE("batch sweep clamps to the full pass") {
    const EvalReport r = sweep_batches(bench(), {100000, 1}, MergeConfig{});
    REQUIRE(r.sweep.size() == 2);
    CHECK(r.sweep[0].value == 1);
    // 150 examples / batch 8 = 19 batches: any larger cap is the full pass.
    const EvalReport full = sweep_batches(bench(), {19}, MergeConfig{});
    CHECK(full.sweep[0].in_domain == r.sweep[1].in_domain);
    CHECK(full.sweep[0].ood == r.sweep[1].ood);
}

TEST_CASE("noniid experiment rows") {
    SyntheticTask t = domain(0);
    t.train = 600;
    PartitionSpec p;
    p.partition_size = 200;
    p.key_class = 1;
    const EvalReport r = run_noniid_experiment(t, p, small_config());
    for (const char* m : {"f1", "f2", "avg_individual", "simple", "fisher", "regmean", "ensemble", "mtl"})
        CHECK_NOTHROW(r.row("joint", m));
    CHECK(r.row("joint", "avg_individual").macro_average ==
          (r.row("joint", "f1").macro_average + r.row("joint", "f2").macro_average) / 2);
}

TEST_CASE("greedy experiment") {
    const EvalReport r = run_greedy_experiment(bench(), {"regmean", MergeConfig{}});
    REQUIRE(r.greedy.contains("trajectory"));
    double prev = -1;
    for (const auto& step : r.greedy["trajectory"])
        if (step["accepted"].get<bool>()) {
            CHECK(step["metric"].get<double>() >= prev);
            prev = step["metric"].get<double>();
        }
}

TEST_CASE("experiment config json") {
    const ExperimentConfig c = small_config();
    CHECK(to_json(experiment_config_from_json(to_json(c))) == to_json(c));
    CHECK_THROWS_AS(experiment_config_from_json({{"metric", "auc"}}), ValidationError);
}
