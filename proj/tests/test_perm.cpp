#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "regmerge/error.hpp"
#include "regmerge/perm.hpp"
#include "regmerge/stats.hpp"

using namespace regmerge;

namespace {

ModelInstance mlp(std::size_t depth, std::uint64_t seed) {
    ModelSpec s;
    s.architecture = Architecture::mlp;
    s.input_dim = 6;
    s.hidden_dim = 9;
    s.num_classes = 3;
    s.depth = depth;
    s.activation = Activation::gelu;
    return testutil::perturbed(init_pretrained(s, seed), seed + 1, 0.2);
}

Permutation random_perm(std::size_t n, std::uint64_t seed) { return {Philox(seed, 3).permutation(n)}; }

double max_diff(const NamedTensorMap& a, const NamedTensorMap& b) {
    double worst = 0.0;
    for (const auto& [name, t] : a.entries())
        for (std::size_t i = 0; i < t.values.size(); ++i)
            worst = std::max(worst, std::fabs(t.values[i] - b.at(name).values[i]));
    return worst;
}

MergeConfig simple() {
    MergeConfig c;
    c.algorithm = MergeAlgorithm::simple;
    return c;
}

}  // namespace

TEST_CASE("hungarian matches exhaustive search") {
    for (std::size_t n = 1; n <= 7; ++n)
        for (std::uint64_t seed = 0; seed < 12; ++seed) {
            CAPTURE(n);
            CAPTURE(seed);
            Matrix m = testutil::random_matrix(n, n, 1000 * n + seed);
            if (seed % 3 == 0)  // ties
                for (double& v : m.data()) v = std::round(v);
            const Permutation lo = solve_assignment(m, AssignmentMode::min_cost);
            const Permutation hi = solve_assignment(m, AssignmentMode::max_similarity);
            CHECK_NOTHROW(lo.validate());
            CHECK_NOTHROW(hi.validate());
            CHECK(assignment_value(m, lo) == doctest::Approx(oracle::exhaustive_assignment(m, false)).epsilon(1e-12));
            CHECK(assignment_value(m, hi) == doctest::Approx(oracle::exhaustive_assignment(m, true)).epsilon(1e-12));
        }
    CHECK_THROWS_AS(solve_assignment(Matrix(2, 3), AssignmentMode::min_cost), ShapeError);
}

TEST_CASE("permutation helpers") {
    const Permutation p{{2, 0, 1}};
    CHECK(p.inverse() == Permutation{{1, 2, 0}});
    CHECK(Permutation::identity(4).identity_fraction() == 1.0);
    CHECK(Permutation{{0, 2, 1, 3}}.identity_fraction() == 0.5);
    CHECK_THROWS_AS((Permutation{{0, 0}}.validate()), ValidationError);
    CHECK_THROWS_AS((Permutation{{0, 5}}.validate()), ValidationError);
    CHECK(match_method_from_string(to_string(MatchMethod::activation_based)) == MatchMethod::activation_based);
}

TEST_CASE("permuting hidden units preserves the function") {
    const ModelInstance m = mlp(2, 1);
    const Matrix x = testutil::random_matrix(7, 6, 2);
    const ModelInstance p = apply_permutation(apply_permutation(m, "fc1", random_perm(9, 3)), "fc2", random_perm(9, 4));
    CHECK(max_abs_diff(forward(m, x).logits, forward(p, x).logits) <= 1e-12);
    CHECK_FALSE(p.params == m.params);
    CHECK_THROWS_AS(apply_permutation(m, "head", random_perm(3, 1)), ValidationError);
    CHECK_THROWS_AS(apply_permutation(m, "fc1", random_perm(4, 1)), ShapeError);
}

TEST_CASE("permuted statistics follow the permuted model") {
    const ModelInstance m = mlp(1, 5);
    const Permutation perm = random_perm(9, 6);
    const ModelInstance p = apply_permutation(m, "fc1", perm);
    Dataset d;
    d.num_classes = 3;
    d.x = testutil::random_matrix(20, 6, 7);
    for (int i = 0; i < 20; ++i) d.y.push_back(i % 3);
    const GramStats g = permute_gram(collect_gram(m, d, CollectConfig{}), m.spec, "fc1", perm);
    const GramStats direct = collect_gram(p, d, CollectConfig{});
    for (const auto& [layer, l] : direct.layers)
        CHECK(max_abs_diff(l.gram_sum, g.layers.at(layer).gram_sum) <= 1e-10 * l.gram_sum.max_abs());
    const NamedTensorMap f = permute_params(collect_fisher(m, d, CollectConfig{}).diag, m.spec, "fc1", perm);
    CHECK(max_diff(collect_fisher(p, d, CollectConfig{}).diag, f) <= 1e-12);
}

TEST_CASE("matching recovers a hidden permutation") {
    const ModelInstance a = mlp(2, 8);
    const Permutation p1 = random_perm(9, 9), p2 = random_perm(9, 10);
    const ModelInstance b = apply_permutation(apply_permutation(a, "fc1", p1), "fc2", p2);
    SUBCASE("weight based") {
        const MatchResult r = match_and_merge(a, b, MatchMethod::weight_based, simple());
        CHECK(r.permutations.at("fc1") == p1.inverse());
        CHECK(r.permutations.at("fc2") == p2.inverse());
        CHECK(max_diff(r.merge.merged, a.params) <= 1e-8);
        CHECK(r.ground_metrics.size() == 2);
        const auto j = to_json(r);
        CHECK(j["grids"].size() == 2);
        CHECK(j["grids"][0]["rows"] == 9);
        CHECK(j["permutations"]["fc1"]["mapping"] == p1.inverse().mapping);
    }
    SUBCASE("activation based") {
        MatchInputs in;
        in.probe = testutil::random_matrix(50, 6, 11);
        const MatchResult r = match_and_merge(a, b, MatchMethod::activation_based, simple(), in);
        CHECK(r.permutations.at("fc1") == p1.inverse());
        CHECK(r.permutations.at("fc2") == p2.inverse());
        CHECK(max_diff(r.merge.merged, a.params) <= 1e-8);
        CHECK_THROWS_AS(match_and_merge(a, b, MatchMethod::activation_based, simple()), ValidationError);
    }
}

TEST_CASE("weight ground metric") {
    const Matrix wa{{0, 1}, {0, 0}}, wb{{3, 1}, {4, 0}};
    const GroundMetric g = weight_ground_metric(wa, wb);
    CHECK(g.matrix(0, 0) == doctest::Approx(5.0));
    CHECK(g.matrix(1, 1) == 0.0);
    CHECK(g.matrix(0, 1) == doctest::Approx(1.0));
}
