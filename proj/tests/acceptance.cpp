// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>

#include "helpers.hpp"
#include "oracles.hpp"
#include "regmerge/cli.hpp"
#include "regmerge/expectations.hpp"
#include "regmerge/experiments.hpp"
#include "regmerge/merge.hpp"
#include "regmerge/perm.hpp"
#include "regmerge/stats.hpp"

using namespace regmerge;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kExpectTol = 1e-9;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " FAILED: " << what << ';';
        }
    }
};

int failures = 0;

void criterion(int id, const char* name, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail << " exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("criterion %2d [%s] %s (%.2fs)%s\n", id, o.pass ? "PASS" : "FAIL", name, secs, o.detail.str().c_str());
    std::fflush(stdout);
}

json load_expectations() {
    std::ifstream in(fs::path(REGMERGE_TEST_DATA_DIR) / "expectations.json");
    if (!in) throw std::runtime_error("expectations.json not found");
    return json::parse(in);
}

void match_expected(Outcome& o, const json& expected, const json& actual, const std::string& what) {
    const auto diffs = compare_expectations(expected, actual, kExpectTol);
    std::string first = diffs.empty() ? "" : diffs.front();
    o.require(diffs.empty(), what + " differs from expectations (" + first + ")");
}

NamedTensorMap single_layer(const Matrix& w) {
    NamedTensorMap m;
    m.insert("l.weight", Tensor::from_matrix(w));
    m.insert("l.bias", Tensor::vector(std::vector<double>(w.cols(), 0.1)));
    return m;
}

GramStats single_gram(const Matrix& g, std::uint64_t n) {
    GramStats s;
    s.layers["l"] = {g, n};
    return s;
}

double max_diff(const NamedTensorMap& a, const NamedTensorMap& b) {
    double worst = 0.0;
    for (const auto& [name, t] : a.entries())
        for (std::size_t i = 0; i < t.values.size(); ++i)
            worst = std::max(worst, std::fabs(t.values[i] - b.at(name).values[i]));
    return worst;
}

// Random linear-layer merge instance: K models, each with its own Gram.
struct Instance {
    std::vector<NamedTensorMap> models;
    std::vector<GramStats> grams;
    std::vector<Matrix> ws, gs;
};

Instance random_instance(std::size_t k, std::uint64_t seed) {
    Philox rng(seed, 1);
    const std::size_t d = 1 + rng.below(16), n = 1 + rng.below(8);
    Instance in;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t rows = std::min<std::size_t>(64, 2 * d + rng.below(64 - 2 * d + 1));
        const Matrix x = testutil::random_matrix(rows, d, seed * 100 + i, 1.0 + static_cast<double>(i));
        in.ws.push_back(testutil::random_matrix(d, n, seed * 100 + 50 + i));
        in.gs.push_back(matmul_tn(x, x));
        in.models.push_back(single_layer(in.ws.back()));
        in.grams.push_back(single_gram(in.gs.back(), rows));
    }
    return in;
}

MergeConfig with_algo(MergeAlgorithm a, double alpha = 0.9) {
    MergeConfig c;
    c.algorithm = a;
    c.alpha = alpha;
    return c;
}

}  // namespace

int main() {
    json expected;
    try {
        expected = load_expectations();
    } catch (const std::exception& e) {
        std::printf("cannot load expectations: %s\n", e.what());
        return 1;
    }

    criterion(1, "closed-form optimality against a gradient-descent oracle", [](Outcome& o) {
        const auto t0 = std::chrono::steady_clock::now();
        double worst = 0.0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const Instance in = random_instance(2, 1000 + s);
            const Matrix w = merge_regmean(in.models, in.grams, with_algo(MergeAlgorithm::regmean, 1.0))
                                 .merged.at("l.weight")
                                 .to_matrix();
            const double obj = eval_merge_objective(w, in.ws, in.gs);
            const double gd = oracle::objective(oracle::gradient_descent_merge(in.ws, in.gs), in.ws, in.gs);
            worst = std::max(worst, std::fabs(obj - gd));
            Matrix avg = 0.5 * (in.ws[0] + in.ws[1]);
            const double slack = 1e-12 * (1.0 + obj);
            o.require(obj <= eval_merge_objective(avg, in.ws, in.gs) + slack, "objective above simple average");
            for (const auto& wi : in.ws)
                o.require(obj <= eval_merge_objective(wi, in.ws, in.gs) + slack, "objective above an input model");
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.require(worst <= 1e-8, "objective gap to the oracle above 1e-8");
        o.require(secs < 5.0, "runtime above 5 s");
        o.detail << " max |objective - oracle| = " << worst;
    });

    criterion(2, "identical Grams reduce RegMean to simple averaging", [](Outcome& o) {
        double worst = 0.0;
        for (std::size_t k : {2u, 3u, 5u}) {
            Instance in = random_instance(k, 2000 + k);
            for (auto& g : in.grams) g = in.grams[0];
            const auto a = merge_regmean(in.models, in.grams, with_algo(MergeAlgorithm::regmean)).merged;
            const auto b = merge_simple(in.models, with_algo(MergeAlgorithm::simple)).merged;
            worst = std::max(worst, max_diff(a, b));
        }
        o.require(worst <= 1e-8, "max difference above 1e-8");
        o.detail << " max difference = " << worst;
    });

    criterion(3, "single-model fixed point", [](Outcome& o) {
        const Instance in = random_instance(1, 3000);
        FisherStats f;
        f.diag.insert("l.weight", Tensor::from_matrix(Matrix(in.ws[0].rows(), in.ws[0].cols(), 0.5)));
        const std::vector<FisherStats> fishers{f};
        const double rm = max_diff(merge_regmean(in.models, in.grams, with_algo(MergeAlgorithm::regmean)).merged,
                                   in.models[0]);
        o.require(rm <= 1e-8, "regmean moved the model");
        o.require(merge_simple(in.models, with_algo(MergeAlgorithm::simple)).merged.entries() ==
                      in.models[0].entries(),
                  "simple is not exact");
        o.require(merge_fisher(in.models, fishers, with_algo(MergeAlgorithm::fisher)).merged.entries() ==
                      in.models[0].entries(),
                  "fisher is not exact");
        o.detail << " regmean difference = " << rm;
    });

    criterion(4, "off-diagonal scaling equals the diagonal ridge", [](Outcome& o) {
        double worst = 0.0;
        for (std::uint64_t s = 0; s < 5; ++s) {
            const Instance in = random_instance(3, 4000 + s);
            for (double alpha : {0.1, 0.5, 0.9}) {
                MergeConfig ridge;
                ridge.regularizer = Regularizer::diag_ridge;
                ridge.gamma = (1 - alpha) / alpha;
                worst = std::max(worst,
                                 max_diff(merge_regmean(in.models, in.grams, with_algo(MergeAlgorithm::regmean, alpha))
                                              .merged,
                                          merge_regmean(in.models, in.grams, ridge).merged));
            }
        }
        o.require(worst <= 1e-8, "max difference above 1e-8");
        o.detail << " max difference = " << worst;
    });

    criterion(5, "constant Fisher reduces to simple averaging", [](Outcome& o) {
        const Instance in = random_instance(4, 5000);
        std::vector<FisherStats> fishers;
        for (const auto& m : in.models) {
            FisherStats f;
            for (const auto& [name, t] : m.entries())
                f.diag.insert(name, Tensor(t.shape, DType::f64, std::vector<double>(t.numel(), 2.5)));
            fishers.push_back(f);
        }
        const double d = max_diff(merge_fisher(in.models, fishers, with_algo(MergeAlgorithm::fisher)).merged,
                                  merge_simple(in.models, with_algo(MergeAlgorithm::simple)).merged);
        o.require(d <= 1e-10, "max difference above 1e-10");
        o.detail << " max difference = " << d;
    });

    criterion(6, "Gram and Fisher statistics", [](Outcome& o) {
        ModelSpec s;
        s.architecture = Architecture::mlp;
        s.input_dim = 6;
        s.hidden_dim = 5;
        s.num_classes = 3;
        const ModelInstance m = testutil::perturbed(init_pretrained(s, 1), 2, 0.3);
        Dataset d;
        d.num_classes = 3;
        d.x = testutil::random_matrix(77, 6, 3);
        for (int i = 0; i < 77; ++i) d.y.push_back(i % 3);
        const ForwardTrace all = forward(m, d.x, true);
        double gram_rel = 0.0, batch_rel = 0.0;
        CollectConfig one{1, 1000, 0}, many{32, 1000, 0};
        const GramStats a = collect_gram(m, d, one), b = collect_gram(m, d, many);
        for (const auto& layer : m.linear_layer_names) {
            const Matrix& x = all.layer_inputs.at(layer);
            const Matrix brute = testutil::naive_matmul(x.transposed(), x);
            gram_rel = std::max(gram_rel, max_abs_diff(b.layers.at(layer).gram_sum, brute) / brute.max_abs());
            batch_rel = std::max(batch_rel, max_abs_diff(a.layers.at(layer).gram_sum, b.layers.at(layer).gram_sum) /
                                                brute.max_abs());
        }
        o.require(gram_rel <= 1e-9, "Gram differs from XᵀX");
        o.require(batch_rel <= 1e-9, "Gram depends on the batch size");

        ModelSpec lin;
        lin.architecture = Architecture::linear;
        lin.input_dim = 4;
        lin.num_classes = 2;
        const ModelInstance lm = testutil::perturbed(init_pretrained(lin, 4), 5, 0.5);
        Dataset ld;
        ld.num_classes = 2;
        ld.x = testutil::random_matrix(25, 4, 6);
        for (int i = 0; i < 25; ++i) ld.y.push_back(i % 2);
        const FisherStats f = collect_fisher(lm, ld, CollectConfig{});
        const NamedTensorMap ref = oracle::fisher_by_differences(lm, ld.x);
        double fisher_rel = 0.0;
        bool nonneg = true;
        for (const auto& [name, t] : f.diag.entries())
            for (std::size_t i = 0; i < t.values.size(); ++i) {
                nonneg &= t.values[i] >= 0.0;
                fisher_rel = std::max(fisher_rel, testutil::rel_err(t.values[i], ref.at(name).values[i], 1e-12));
            }
        o.require(nonneg, "negative Fisher entry");
        o.require(fisher_rel <= 1e-3, "Fisher differs from the finite-difference oracle");
        o.detail << " gram rel = " << gram_rel << ", batch rel = " << batch_rel << ", fisher rel = " << fisher_rel;
    });

    criterion(7, "gradients match central differences for all architectures", [](Outcome& o) {
        double worst = 0.0;
        for (auto arch : {Architecture::linear, Architecture::mlp, Architecture::mini_transformer}) {
            ModelSpec s;
            s.architecture = arch;
            s.input_dim = 8;
            s.hidden_dim = 4;
            s.num_classes = 3;
            s.activation = Activation::gelu;
            if (arch == Architecture::mini_transformer) s.seq_len = 4;
            const ModelInstance m = testutil::perturbed(init_pretrained(s, 7), 8, 0.1);
            Dataset d;
            d.num_classes = 3;
            d.x = testutil::random_matrix(5, 8, 9);
            d.y = {0, 1, 2, 1, 0};
            const double e = oracle::gradient_check(m, d);
            o.detail << ' ' << to_string(arch) << " rel = " << e << ';';
            worst = std::max(worst, e);
        }
        o.require(worst <= 1e-4, "relative gradient error above 1e-4");
    });

    criterion(8, "non-iid pair: RegMean beats the individual average", [&](Outcome& o) {
        const auto t0 = std::chrono::steady_clock::now();
        const EvalReport r = run_noniid_experiment(benchmarks::noniid_task(), benchmarks::noniid_partition(),
                                                   benchmarks::noniid_config());
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const double rm = r.row("joint", "regmean").macro_average;
        const double avg = r.row("joint", "avg_individual").macro_average;
        const double simple = r.row("joint", "simple").macro_average;
        o.require(rm > avg, "regmean not above the individual average");
        o.require(rm >= simple - 0.5, "regmean more than 0.5 below simple");
        o.require(secs < 60.0, "runtime above 60 s");
        match_expected(o, expected["noniid"], to_json(r), "noniid report");
        o.detail << " regmean " << rm << ", avg individual " << avg << ", simple " << simple;
    });

    const auto domains = benchmarks::domains();
    const auto ood = benchmarks::ood_domains();
    const Workbench wb = prepare_workbench(domains, ood, benchmarks::multidomain_config());

    criterion(9, "multi-domain pairwise drop: RegMean degrades less than simple", [&](Outcome& o) {
        const EvalReport r = run_multidomain_experiment(wb);
        double rm = NAN, simple = NAN;
        for (const auto& p : r.pairwise) {
            if (p.method == "regmean") rm = p.mean_off_diagonal;
            if (p.method == "simple") simple = p.mean_off_diagonal;
        }
        o.require(rm >= simple, "regmean drop below simple drop");
        match_expected(o, expected["multidomain"], to_json(r), "multidomain report");
        o.detail << " drop regmean " << rm << "%, simple " << simple << '%';
    });

    criterion(10, "alpha stability", [&](Outcome& o) {
        const EvalReport r = sweep_alpha(wb, {std::begin(kAlphaSweep), std::end(kAlphaSweep)}, MergeConfig{});
        double lo = INFINITY, hi = -INFINITY, at_one = NAN;
        for (const auto& row : r.sweep) {
            if (row.value == 1.0) {
                at_one = row.in_domain;
                continue;
            }
            lo = std::min(lo, row.in_domain);
            hi = std::max(hi, row.in_domain);
        }
        o.require(hi - lo <= 2.0, "in-domain spread above 2 points");
        o.require(std::isfinite(at_one), "alpha = 1 produced a non-finite score");
        double base_lo = INFINITY, base_hi = -INFINITY;
        for (const auto& row : expected["sweep_alpha"]["sweep"])
            if (row["value"].get<double>() < 1.0) {
                base_lo = std::min(base_lo, row["in_domain"].get<double>());
                base_hi = std::max(base_hi, row["in_domain"].get<double>());
            }
        o.require(hi - lo <= base_hi - base_lo + kExpectTol, "spread above the recorded baseline");
        match_expected(o, expected["sweep_alpha"], to_json(r), "alpha sweep");
        o.detail << " spread over 0.1..0.9 = " << hi - lo << " points, alpha = 1.0 scores " << at_one;
    });

    criterion(11, "batch-count saturation", [&](Outcome& o) {
        const EvalReport r = sweep_batches(wb, {100, std::numeric_limits<std::size_t>::max() / 64}, MergeConfig{});
        const double n100 = r.sweep.at(0).in_domain, full = r.sweep.at(1).in_domain;
        o.require(std::fabs(n100 - full) <= 1.0, "N = 100 more than 1 point from the full pass");
        const EvalReport recorded =
            sweep_batches(wb, {std::begin(kBatchSweep), std::end(kBatchSweep)}, MergeConfig{});
        match_expected(o, expected["sweep_batches"], to_json(recorded), "batch sweep");
        o.detail << " N=100 " << n100 << ", full " << full;
    });

    criterion(12, "permutation recovery and assignment optimality", [&](Outcome& o) {
        bool exact = true;
        for (std::size_t n = 1; n <= 7; ++n)
            for (std::uint64_t s = 0; s < 10; ++s) {
                const Matrix m = testutil::random_matrix(n, n, 7000 + 10 * n + s);
                exact &= std::fabs(assignment_value(m, solve_assignment(m, AssignmentMode::min_cost)) -
                                   oracle::exhaustive_assignment(m, false)) <= 1e-12;
                exact &= std::fabs(assignment_value(m, solve_assignment(m, AssignmentMode::max_similarity)) -
                                   oracle::exhaustive_assignment(m, true)) <= 1e-12;
            }
        o.require(exact, "assignment differs from exhaustive search");

        const ModelInstance& a = wb.models[0];
        const Permutation hidden{Philox(12, 0).permutation(a.spec.hidden_dim)};
        const ModelInstance b = apply_permutation(a, "fc1", hidden);
        const MatchResult r = match_and_merge(a, b, MatchMethod::weight_based, with_algo(MergeAlgorithm::simple));
        o.require(r.permutations.at("fc1") == hidden.inverse(), "hidden permutation not recovered");
        const double d = max_diff(r.merge.merged, a.params);
        o.require(d <= 1e-8, "matched merge differs from the original");

        double min_identity = 1.0;
        for (std::size_t i = 0; i < wb.models.size(); ++i)
            for (std::size_t j = i + 1; j < wb.models.size(); ++j) {
                const GroundMetric g =
                    weight_ground_metric(wb.models[i].weight("fc1").to_matrix(), wb.models[j].weight("fc1").to_matrix());
                min_identity =
                    std::min(min_identity, solve_assignment(g.matrix, AssignmentMode::min_cost).identity_fraction());
            }
        o.require(min_identity >= 0.9, "same-init pair assignment below 90% identity");
        o.detail << " merged difference = " << d << ", min identity fraction = " << min_identity;
    });

    criterion(13, "greedy merging is monotone and rejects the flipped model", [&](Outcome& o) {
        const EvalReport r = run_greedy_experiment(benchmarks::adversarial_workbench(), {"regmean", MergeConfig{}});
        double prev = -INFINITY;
        bool monotone = true;
        for (const auto& step : r.greedy["trajectory"])
            if (step["accepted"].get<bool>()) {
                monotone &= step["metric"].get<double>() >= prev;
                prev = step["metric"].get<double>();
            }
        bool flipped_rejected = true;
        for (const auto& id : r.greedy["accepted"]) flipped_rejected &= id.get<std::string>().find("flipped") == std::string::npos;
        o.require(monotone, "accepted metric decreased");
        o.require(flipped_rejected, "label-flipped model accepted");
        match_expected(o, expected["greedy"], to_json(r), "greedy report");
        o.detail << " accepted " << r.greedy["accepted"].dump() << ", final " << prev;
    });

    criterion(14, "format round trips and golden pipeline reproducibility", [&](Outcome& o) {
        bool round = true;
        for (std::size_t i = 0; i < wb.models.size(); ++i) {
            const auto c = encode_checkpoint(wb.models[i].params);
            round &= decode_checkpoint(c) == wb.models[i].params && encode_checkpoint(decode_checkpoint(c)) == c;
            const auto g = encode_gram(wb.grams[i]);
            round &= decode_gram(g) == wb.grams[i] && encode_gram(decode_gram(g)) == g;
            const auto f = encode_fisher(wb.fishers[i]);
            round &= decode_fisher(f) == wb.fishers[i] && encode_fisher(decode_fisher(f)) == f;
        }
        o.require(round, "a file did not round-trip bit-exact");
        const fs::path scratch = testutil::scratch_dir("acceptance_golden");
        const json first = run_golden_pipeline(scratch / "run1");
        const json second = run_golden_pipeline(scratch / "run2");
        o.require(first == second, "two golden runs differ");
        o.require(first == expected["golden"], "golden run differs from expectations");
        o.detail << " merged test accuracy " << first["test_accuracy"]["merged"];
    });

    std::printf("%d of 14 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
