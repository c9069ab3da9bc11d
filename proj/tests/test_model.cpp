#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "regmerge/error.hpp"
#include "regmerge/model.hpp"
#include "regmerge/synthetic.hpp"

using namespace regmerge;

namespace {

Dataset random_batch(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed) {
    Dataset d;
    d.num_classes = classes;
    d.x = testutil::random_matrix(n, dim, seed);
    Philox rng(seed, 1);
    for (std::size_t i = 0; i < n; ++i) d.y.push_back(static_cast<int>(rng.below(classes)));
    return d;
}

ModelSpec spec(Architecture a) {
    ModelSpec s;
    s.architecture = a;
    s.input_dim = 8;
    s.hidden_dim = 4;
    s.num_classes = 3;
    s.activation = Activation::gelu;
    if (a == Architecture::mini_transformer) s.seq_len = 4;
    if (a == Architecture::mlp) s.depth = 2;
    return s;
}

Tensor t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, DType::f64, std::move(v)); }

}  // namespace

TEST_CASE("analytic gradients match central differences") {
    for (auto arch : {Architecture::linear, Architecture::mlp, Architecture::mini_transformer}) {
        CAPTURE(to_string(arch));
        const ModelInstance m = testutil::perturbed(init_pretrained(spec(arch), 3), 4, 0.1);
        CHECK(oracle::gradient_check(m, random_batch(5, 8, 3, 5)) <= 1e-4);
    }
    SUBCASE("relu mlp and transformer without layer norm") {
        ModelSpec s = spec(Architecture::mlp);
        s.activation = Activation::relu;
        CHECK(oracle::gradient_check(init_pretrained(s, 1), random_batch(4, 8, 3, 6)) <= 1e-4);
        ModelSpec t = spec(Architecture::mini_transformer);
        t.layernorm = false;
        t.depth = 2;
        CHECK(oracle::gradient_check(init_pretrained(t, 1), random_batch(3, 8, 3, 7)) <= 1e-4);
    }
    SUBCASE("sigmoid outputs") {
        ModelSpec s = spec(Architecture::mlp);
        s.output = OutputMode::sigmoid;
        Dataset d = random_batch(4, 8, 3, 8);
        d.targets = Matrix{{1, 0, 1}, {0, 0, 1}, {1, 1, 1}, {0, 1, 0}};
        CHECK(oracle::gradient_check(init_pretrained(s, 2), d) <= 1e-4);
    }
}

TEST_CASE("hand-computed mlp forward and recorded inputs") {
    ModelSpec s;
    s.architecture = Architecture::mlp;
    s.input_dim = 2;
    s.hidden_dim = 2;
    s.num_classes = 2;
    s.activation = Activation::relu;
    NamedTensorMap p = init_pretrained(s, 0).params;
    p.set("fc1.weight", t2(2, 2, {1, -1, 2, 0.5}));
    p.set("fc1.bias", Tensor::vector({0.5, -1}));
    p.set("head.weight", t2(2, 2, {1, 2, -1, 1}));
    p.set("head.bias", Tensor::vector({0.1, 0.2}));
    const ModelInstance m = with_params(init_pretrained(s, 0), p);
    const ForwardTrace tr = forward(m, Matrix{{1, 2}}, true);
    CHECK(tr.logits(0, 0) == doctest::Approx(5.6));
    CHECK(tr.logits(0, 1) == doctest::Approx(11.2));
    CHECK(tr.layer_inputs.at("fc1") == Matrix{{1, 2}});
    CHECK(tr.layer_inputs.at("head") == Matrix{{5.5, 0}});
    CHECK(tr.layer_activations.at("fc1") == Matrix{{5.5, 0}});
    CHECK(predict(m, Matrix{{1, 2}}) == std::vector<int>{1});

    // Cross-entropy of label 0: log(1 + e^{5.6}) with logits (5.6, 11.2).
    Dataset d;
    d.num_classes = 2;
    d.x = Matrix{{1, 2}};
    d.y = {0};
    CHECK(loss_and_grads(m, d).loss == doctest::Approx(std::log1p(std::exp(5.6))));
}

TEST_CASE("recorded layer inputs cover every linear layer") {
    for (auto arch : {Architecture::linear, Architecture::mlp, Architecture::mini_transformer}) {
        const ModelInstance m = init_pretrained(spec(arch), 1);
        const ForwardTrace tr = forward(m, testutil::random_matrix(3, 8, 2), true);
        for (const auto& layer : m.linear_layer_names) {
            REQUIRE(tr.layer_inputs.count(layer) == 1);
            CHECK(tr.layer_inputs.at(layer).cols() == m.weight(layer).shape[0]);
        }
        CHECK(m.linear_layer_names.back() == "head");
        CHECK(forward(m, testutil::random_matrix(3, 8, 2), false).layer_inputs.empty());
    }
}

TEST_CASE("initialisation") {
    const ModelSpec s = spec(Architecture::mini_transformer);
    const ModelInstance a = init_pretrained(s, 9), b = init_pretrained(s, 9), c = init_pretrained(s, 10);
    CHECK(a.params == b.params);
    CHECK_FALSE(a.params == c.params);
    for (const auto& [name, t] : a.params.entries()) {
        if (name.ends_with(".bias")) {
            for (double v : t.values) CHECK(v == 0.0);
        } else if (name.ends_with(".gain")) {
            for (double v : t.values) CHECK(v == 1.0);
        } else if (t.shape.size() == 2) {
            const double bound = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
            for (double v : t.values) CHECK(std::fabs(v) <= bound);
        }
    }
    CHECK(a.params.metadata.at("architecture") == "mini_transformer");
}

TEST_CASE("checkpoint round trip rebuilds the model") {
    const ModelInstance m = init_pretrained(spec(Architecture::mlp), 4);
    const ModelInstance back = model_from_checkpoint(decode_checkpoint(encode_checkpoint(m.params)));
    CHECK(back.spec == m.spec);
    CHECK(back.params == m.params);
    NamedTensorMap no_spec = m.params;
    no_spec.metadata.erase("spec");
    CHECK_THROWS_AS(model_from_checkpoint(no_spec), ValidationError);
}

TEST_CASE("spec validation") {
    ModelSpec s = spec(Architecture::mini_transformer);
    s.hidden_dim = 5;
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s = spec(Architecture::mini_transformer);
    s.seq_len = 3;
    CHECK_THROWS_AS(s.validate(), ValidationError);
    CHECK(model_spec_from_json(to_json(spec(Architecture::mlp))) == spec(Architecture::mlp));
    CHECK_THROWS_AS(model_spec_from_json({{"architecture", "rnn"}, {"input_dim", 2}, {"num_classes", 2}}),
                    ValidationError);
}

TEST_CASE("loss rejects bad labels") {
    const ModelInstance m = init_pretrained(spec(Architecture::linear), 1);
    Dataset d = random_batch(2, 8, 3, 1);
    d.y[0] = 3;
    CHECK_THROWS_AS(loss_and_grads(m, d.x, d.y), ValidationError);
}

TEST_CASE("training is deterministic and keeps the best epoch") {
    SyntheticTask task;
    task.input_dim = 4;
    task.num_classes = 3;
    task.train = 300;
    task.val = 100;
    task.seed = 2;
    const TaskSplits s = generate(task);
    ModelSpec ms;
    ms.architecture = Architecture::mlp;
    ms.input_dim = 4;
    ms.num_classes = 3;
    ms.hidden_dim = 8;
    const ModelInstance init = init_pretrained(ms, 1);
    TrainHyper h;
    h.epochs = 5;
    h.seed = 3;
    const TrainResult a = train(init, s.train, &s.val, h), b = train(init, s.train, &s.val, h);
    CHECK(a.model.params == b.model.params);
    CHECK(a.val_history.size() == 5);
    REQUIRE(a.best_epoch >= 1);
    const double best = *std::max_element(a.val_history.begin(), a.val_history.end());
    CHECK(a.val_history[a.best_epoch - 1] == best);
    for (std::size_t e = 0; e + 1 < a.best_epoch; ++e) CHECK(a.val_history[e] < best);
    CHECK(evaluate(a.model, s.val, MetricKind::accuracy) == best);
    CHECK(best > 0.8);

    h.epochs = 0;
    const TrainResult z = train(init, s.train, &s.val, h);
    CHECK(z.best_epoch == 0);
    CHECK(z.model.params == init.params);
}
