#pragma once

// Desk-scale model zoo: linear classifier, MLP and a one-block mini
// transformer, with exact backprop and per-linear-layer input recording.
//
// Conventions shared by all architectures:
//   * A linear layer `L` owns `L.weight` of shape [in, out] and `L.bias` [out]
//     and computes y = x·W + b on row-vector batches, so its Gram statistic
//     is the in×in matrix Σ x xᵀ over the rows it sees.
//   * The classifier is always the linear layer `head`, which keeps the
//     `head.` prefix available for merge exclusion patterns.
//   * Mini-transformer inputs are flattened sequences: each example row holds
//     seq_len tokens of input_dim/seq_len features. Per-token linear layers
//     therefore record (batch·seq_len) input rows.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "regmerge/dataset.hpp"
#include "regmerge/linalg.hpp"
#include "regmerge/metrics.hpp"
#include "regmerge/tensor_io.hpp"

namespace regmerge {

enum class Architecture { linear, mlp, mini_transformer };
enum class Activation { gelu, relu };
/// softmax: single-label cross-entropy; sigmoid: multi-label binary cross-entropy.
enum class OutputMode { softmax, sigmoid };

const char* to_string(Architecture a);
const char* to_string(Activation a);
const char* to_string(OutputMode m);

struct ModelSpec {
    Architecture architecture = Architecture::mlp;
    std::size_t input_dim = 1;
    std::size_t hidden_dim = 1;
    std::size_t num_classes = 2;
    /// Hidden layers (mlp) or transformer blocks (mini_transformer); unused for linear.
    std::size_t depth = 1;
    Activation activation = Activation::relu;
    bool layernorm = true;
    /// Tokens per example (mini_transformer only).
    std::size_t seq_len = 1;
    OutputMode output = OutputMode::softmax;

    /// Throws ValidationError on inconsistent dimensions.
    void validate() const;

    static constexpr std::size_t kHeads = 2;
    std::size_t token_dim() const { return input_dim / seq_len; }
    std::size_t ffn_dim() const { return 2 * hidden_dim; }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

nlohmann::json to_json(const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct ModelInstance {
    ModelSpec spec;
    NamedTensorMap params;
    /// Linear layers in forward order; each has `<name>.weight` and `<name>.bias`.
    std::vector<std::string> linear_layer_names;

    const Tensor& weight(const std::string& layer) const { return params.at(layer + ".weight"); }
};

/// Ordered linear layer names for a spec.
std::vector<std::string> linear_layer_names(const ModelSpec& spec);

/// Shared starting point ("pretrained" weights). Weights are Glorot-uniform,
/// U(±sqrt(6/(fan_in+fan_out))), drawn from Philox4x32-10 keyed by `seed`
/// with one counter stream per parameter entry; biases are zero and layer
/// norm gains one. Metadata records architecture, seed and the spec.
ModelInstance init_pretrained(const ModelSpec& spec, std::uint64_t seed);

/// Rebuilds a model from a checkpoint carrying the `spec` metadata key.
ModelInstance model_from_checkpoint(NamedTensorMap params);

/// Replaces the parameters of `like` (same keys and shapes required).
ModelInstance with_params(const ModelInstance& like, NamedTensorMap params);

struct ForwardTrace {
    Matrix logits;
    /// Input rows seen by each linear layer (filled when recording).
    std::map<std::string, Matrix> layer_inputs;
    /// Post-nonlinearity outputs keyed by the linear layer that produced them.
    std::map<std::string, Matrix> layer_activations;
};

/// A forward pass with its backprop cache.
class ForwardPass {
public:
    ForwardPass(const ModelInstance& model, const Matrix& x);
    ForwardPass(ForwardPass&&) noexcept;
    ForwardPass& operator=(ForwardPass&&) noexcept;
    ~ForwardPass();

    const Matrix& logits() const;
    /// Copies recorded layer inputs/activations out of the cache.
    ForwardTrace trace(bool record) const;
    /// Gradients of Σ_rows ⟨dlogits, logits⟩ w.r.t. every parameter (same keys/shapes, f64).
    NamedTensorMap backward(const Matrix& dlogits) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

ForwardTrace forward(const ModelInstance& model, const Matrix& x, bool record = false);

struct LossAndGrads {
    double loss = 0.0;
    NamedTensorMap grads;
};

/// Mean softmax cross-entropy over the batch and its exact gradient.
/// Throws ValidationError for labels outside [0, num_classes).
LossAndGrads loss_and_grads(const ModelInstance& model, const Matrix& x, std::span<const int> labels);
/// Mean (over rows) of summed per-class binary cross-entropy, for sigmoid outputs.
LossAndGrads loss_and_grads_multilabel(const ModelInstance& model, const Matrix& x, const Matrix& targets);
/// Dispatches on the dataset/output mode.
LossAndGrads loss_and_grads(const ModelInstance& model, const Dataset& batch);

/// Row-wise softmax / sigmoid of logits, numerically stable.
Matrix softmax_rows(const Matrix& logits);
Matrix sigmoid(const Matrix& logits);

/// argmax of logits per row, ties toward the lowest class index.
std::vector<int> argmax_rows(const Matrix& logits);
std::vector<int> predict(const ModelInstance& model, const Matrix& x);

/// Metric on a dataset in [0,1]; multi-label data always uses label-wise macro-F1.
double evaluate(const ModelInstance& model, const Dataset& data, MetricKind kind);

struct TrainHyper {
    double lr = 0.1;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    MetricKind val_metric = MetricKind::accuracy;
};

nlohmann::json to_json(const TrainHyper& h);
TrainHyper train_hyper_from_json(const nlohmann::json& j);

struct TrainResult {
    ModelInstance model;
    /// 1-based epoch whose parameters were kept (0 when epochs == 0).
    std::size_t best_epoch = 0;
    std::vector<double> val_history;
};

/// Minibatch SGD with a per-epoch seeded shuffle. After every epoch the
/// validation metric is measured (on `val`, or on `train` when absent) and
/// the parameters of the best epoch are returned; ties keep the earlier epoch.
TrainResult train(const ModelInstance& init, const Dataset& train_set, const Dataset* val, const TrainHyper& hyper);

}  // namespace regmerge
