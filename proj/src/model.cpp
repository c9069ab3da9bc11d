#include "regmerge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "regmerge/error.hpp"
#include "regmerge/kernels.hpp"
#include "regmerge/rng.hpp"

namespace regmerge {

using nlohmann::json;

const char* to_string(Architecture a) {
    switch (a) {
        case Architecture::linear: return "linear";
        case Architecture::mlp: return "mlp";
        case Architecture::mini_transformer: return "mini_transformer";
    }
    return "?";
}

const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }
const char* to_string(OutputMode m) { return m == OutputMode::softmax ? "softmax" : "sigmoid"; }

void ModelSpec::validate() const {
    if (input_dim == 0 || num_classes == 0) throw ValidationError("model spec: dims must be >= 1");
    if (architecture != Architecture::linear && (hidden_dim == 0 || depth == 0))
        throw ValidationError("model spec: hidden_dim and depth must be >= 1");
    if (architecture == Architecture::mini_transformer) {
        if (hidden_dim % kHeads != 0)
            throw ValidationError("model spec: hidden_dim must be divisible by the head count (2)");
        if (seq_len == 0 || input_dim % seq_len != 0)
            throw ValidationError("model spec: input_dim must be a multiple of seq_len");
    }
}

json to_json(const ModelSpec& s) {
    return json{{"architecture", to_string(s.architecture)},
                {"input_dim", s.input_dim},
                {"hidden_dim", s.hidden_dim},
                {"num_classes", s.num_classes},
                {"depth", s.depth},
                {"activation", to_string(s.activation)},
                {"layernorm", s.layernorm},
                {"seq_len", s.seq_len},
                {"output", to_string(s.output)}};
}

ModelSpec model_spec_from_json(const json& j) {
    ModelSpec s;
    try {
        const auto arch = j.at("architecture").get<std::string>();
        if (arch == "linear") s.architecture = Architecture::linear;
        else if (arch == "mlp") s.architecture = Architecture::mlp;
        else if (arch == "mini_transformer") s.architecture = Architecture::mini_transformer;
        else throw ValidationError("unknown architecture '" + arch + "'");
        s.input_dim = j.at("input_dim").get<std::size_t>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.hidden_dim = j.value("hidden_dim", std::size_t{1});
        s.depth = j.value("depth", std::size_t{1});
        const auto act = j.value("activation", std::string("relu"));
        if (act == "relu") s.activation = Activation::relu;
        else if (act == "gelu") s.activation = Activation::gelu;
        else throw ValidationError("unknown activation '" + act + "'");
        s.layernorm = j.value("layernorm", true);
        s.seq_len = j.value("seq_len", std::size_t{1});
        const auto out = j.value("output", std::string("softmax"));
        if (out == "softmax") s.output = OutputMode::softmax;
        else if (out == "sigmoid") s.output = OutputMode::sigmoid;
        else throw ValidationError("unknown output mode '" + out + "'");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("model spec json: ") + e.what());
    }
    s.validate();
    return s;
}

namespace {

std::string block_prefix(std::size_t l) { return "block" + std::to_string(l) + "."; }

struct ParamSlot {
    std::string name;
    std::vector<std::size_t> shape;
    enum Kind { weight, bias, gain, embedding } kind;
};

std::vector<ParamSlot> param_layout(const ModelSpec& s) {
    std::vector<ParamSlot> out;
    auto linear = [&](const std::string& name, std::size_t in, std::size_t o) {
        out.push_back({name + ".weight", {in, o}, ParamSlot::weight});
        out.push_back({name + ".bias", {o}, ParamSlot::bias});
    };
    switch (s.architecture) {
        case Architecture::linear: linear("head", s.input_dim, s.num_classes); break;
        case Architecture::mlp: {
            std::size_t in = s.input_dim;
            for (std::size_t k = 1; k <= s.depth; ++k) {
                linear("fc" + std::to_string(k), in, s.hidden_dim);
                in = s.hidden_dim;
            }
            linear("head", in, s.num_classes);
            break;
        }
        case Architecture::mini_transformer: {
            const std::size_t h = s.hidden_dim;
            linear("embed", s.token_dim(), h);
            out.push_back({"pos_embed", {s.seq_len, h}, ParamSlot::embedding});
            for (std::size_t l = 0; l < s.depth; ++l) {
                const std::string p = block_prefix(l);
                for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) linear(p + proj, h, h);
                if (s.layernorm) {
                    out.push_back({p + "ln1.gain", {h}, ParamSlot::gain});
                    out.push_back({p + "ln1.bias", {h}, ParamSlot::bias});
                }
                linear(p + "ffn.fc1", h, s.ffn_dim());
                linear(p + "ffn.fc2", s.ffn_dim(), h);
                if (s.layernorm) {
                    out.push_back({p + "ln2.gain", {h}, ParamSlot::gain});
                    out.push_back({p + "ln2.bias", {h}, ParamSlot::bias});
                }
            }
            linear("head", h, s.num_classes);
            break;
        }
    }
    return out;
}

std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += sep;
        out += v[i];
    }
    return out;
}

// ----- activations ---------------------------------------------------------

double act_value(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? x : 0.0;
    return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

double act_grad(Activation a, double x) {
    if (a == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Matrix apply_act(Activation a, const Matrix& u) {
    Matrix out(u.rows(), u.cols());
    for (std::size_t i = 0; i < u.size(); ++i) out.data()[i] = act_value(a, u.data()[i]);
    return out;
}

// ----- linear layers -------------------------------------------------------

Matrix linear_forward(const Matrix& x, const NamedTensorMap& p, const std::string& layer) {
    const Tensor& w = p.at(layer + ".weight");
    const Tensor& b = p.at(layer + ".bias");
    const std::size_t in = w.shape[0], out = w.shape[1];
    if (x.cols() != in)
        throw ShapeError("layer '" + layer + "' expects " + std::to_string(in) + " inputs, got " +
                         std::to_string(x.cols()));
    Matrix y(x.rows(), out);
    kernels::matmul_nn(x.rows(), in, out, x.data(), w.values, y.data());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        auto row = y.row(r);
        for (std::size_t j = 0; j < out; ++j) row[j] += b.values[j];
    }
    return y;
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Accumulates dW, db into grads; returns dX.
Matrix linear_backward(const Matrix& x, const Matrix& dy, const NamedTensorMap& p, const std::string& layer,
                       NamedTensorMap& grads, bool need_dx = true) {
    const Tensor& w = p.at(layer + ".weight");
    const std::size_t in = w.shape[0], out = w.shape[1];
    std::vector<double> dw(in * out);
    kernels::matmul_tn(in, x.rows(), out, x.data(), dy.data(), dw);
    add_into(grads.at(layer + ".weight").values, dw);
    auto& db = grads.at(layer + ".bias").values;
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const auto row = dy.row(r);
        for (std::size_t j = 0; j < out; ++j) db[j] += row[j];
    }
    if (!need_dx) return {};
    Matrix dx(dy.rows(), in);
    kernels::matmul_nt(dy.rows(), out, in, dy.data(), w.values, dx.data());
    return dx;
}

// ----- layer norm ----------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Matrix xhat;
    std::vector<double> inv_std;
};

Matrix layernorm_forward(const Matrix& x, const std::vector<double>& gain, const std::vector<double>& bias,
                         LayerNormCache& cache) {
    const std::size_t n = x.cols();
    Matrix y(x.rows(), n);
    cache.xhat = Matrix(x.rows(), n);
    cache.inv_std.assign(x.rows(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = x.row(r);
        double mean = 0.0;
        for (double v : xr) mean += v;
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : xr) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std[r] = inv;
        for (std::size_t c = 0; c < n; ++c) {
            const double xh = (xr[c] - mean) * inv;
            cache.xhat(r, c) = xh;
            y(r, c) = gain[c] * xh + bias[c];
        }
    }
    return y;
}

Matrix layernorm_backward(const Matrix& dy, const LayerNormCache& cache, const std::vector<double>& gain,
                          std::vector<double>& dgain, std::vector<double>& dbias) {
    const std::size_t n = dy.cols();
    Matrix dx(dy.rows(), n);
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        double sum = 0.0, dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            dgain[c] += dy(r, c) * cache.xhat(r, c);
            dbias[c] += dy(r, c);
            dxhat[c] = dy(r, c) * gain[c];
            sum += dxhat[c];
            dot += dxhat[c] * cache.xhat(r, c);
        }
        const double scale = cache.inv_std[r] / static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c)
            dx(r, c) = scale * (static_cast<double>(n) * dxhat[c] - sum - cache.xhat(r, c) * dot);
    }
    return dx;
}

NamedTensorMap zero_grads(const NamedTensorMap& params) {
    NamedTensorMap g;
    for (const auto& [name, t] : params.entries())
        g.insert(name, Tensor(t.shape, DType::f64, std::vector<double>(t.numel(), 0.0)));
    return g;
}

}  // namespace

std::vector<std::string> linear_layer_names(const ModelSpec& spec) {
    std::vector<std::string> names;
    for (const auto& slot : param_layout(spec))
        if (slot.kind == ParamSlot::weight) names.push_back(slot.name.substr(0, slot.name.size() - 7));
    return names;
}

ModelInstance init_pretrained(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelInstance m;
    m.spec = spec;
    m.linear_layer_names = linear_layer_names(spec);
    const auto layout = param_layout(spec);
    for (std::size_t idx = 0; idx < layout.size(); ++idx) {
        const auto& slot = layout[idx];
        std::size_t numel = 1;
        for (std::size_t s : slot.shape) numel *= s;
        std::vector<double> values(numel, 0.0);
        if (slot.kind == ParamSlot::weight || slot.kind == ParamSlot::embedding) {
            const double fan = static_cast<double>(slot.shape[0] + slot.shape[1]);
            const double limit = std::sqrt(6.0 / fan);
            Philox rng(seed, idx);
            for (double& v : values) v = rng.uniform(-limit, limit);
        } else if (slot.kind == ParamSlot::gain) {
            std::fill(values.begin(), values.end(), 1.0);
        }
        m.params.insert(slot.name, Tensor(slot.shape, DType::f64, std::move(values)));
    }
    m.params.metadata["architecture"] = to_string(spec.architecture);
    m.params.metadata["seed"] = std::to_string(seed);
    m.params.metadata["spec"] = to_json(spec).dump();
    m.params.metadata["linear_layers"] = join(m.linear_layer_names, ',');
    return m;
}

ModelInstance model_from_checkpoint(NamedTensorMap params) {
    auto it = params.metadata.find("spec");
    if (it == params.metadata.end()) throw ValidationError("checkpoint has no 'spec' metadata; cannot rebuild model");
    ModelSpec spec;
    try {
        spec = model_spec_from_json(json::parse(it->second));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("checkpoint spec metadata: ") + e.what());
    }
    ModelInstance m;
    m.spec = spec;
    m.linear_layer_names = linear_layer_names(spec);
    for (const auto& slot : param_layout(spec)) {
        const Tensor* t = params.find(slot.name);
        if (!t) throw ValidationError("checkpoint is missing parameter '" + slot.name + "'");
        if (t->shape != slot.shape) throw ShapeError("checkpoint parameter '" + slot.name + "' has wrong shape");
    }
    if (params.size() != param_layout(spec).size())
        throw ValidationError("checkpoint has parameters not used by the architecture");
    m.params = std::move(params);
    return m;
}

ModelInstance with_params(const ModelInstance& like, NamedTensorMap params) {
    for (const auto& [name, t] : like.params.entries()) {
        const Tensor* p = params.find(name);
        if (!p) throw ValidationError("parameter '" + name + "' missing");
        if (p->shape != t.shape) throw ShapeError("parameter '" + name + "' has wrong shape");
    }
    ModelInstance m = like;
    if (params.metadata.empty()) params.metadata = like.params.metadata;
    m.params = std::move(params);
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardPass::Impl {
    const ModelInstance* model = nullptr;
    Matrix x;
    Matrix logits;

    // mlp / linear: inputs[k] feeds linear layer k, pre[k] is hidden k's pre-activation.
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;

    struct Block {
        Matrix h_in, q, k, v;
        std::vector<double> probs;  // [batch][head][t][s]
        Matrix attn_concat, h1, u, a;
        LayerNormCache ln1, ln2;
    };
    Matrix tokens;
    std::vector<Block> blocks;
    Matrix pooled;

    void forward_mlp();
    void forward_transformer();
    NamedTensorMap backward_mlp(const Matrix& dlogits) const;
    NamedTensorMap backward_transformer(const Matrix& dlogits) const;
};

void ForwardPass::Impl::forward_mlp() {
    const auto& names = model->linear_layer_names;
    const auto& p = model->params;
    Matrix h = x;
    for (std::size_t k = 0; k + 1 < names.size(); ++k) {
        inputs.push_back(h);
        Matrix u = linear_forward(h, p, names[k]);
        h = apply_act(model->spec.activation, u);
        pre.push_back(std::move(u));
    }
    inputs.push_back(h);
    logits = linear_forward(h, p, names.back());
}

NamedTensorMap ForwardPass::Impl::backward_mlp(const Matrix& dlogits) const {
    const auto& names = model->linear_layer_names;
    const auto& p = model->params;
    NamedTensorMap g = zero_grads(p);
    Matrix dh = linear_backward(inputs.back(), dlogits, p, names.back(), g, names.size() > 1);
    for (std::size_t k = names.size() - 1; k-- > 0;) {
        Matrix du = dh;
        for (std::size_t i = 0; i < du.size(); ++i)
            du.data()[i] *= act_grad(model->spec.activation, pre[k].data()[i]);
        dh = linear_backward(inputs[k], du, p, names[k], g, k > 0);
    }
    return g;
}

void ForwardPass::Impl::forward_transformer() {
    const ModelSpec& s = model->spec;
    const auto& p = model->params;
    const std::size_t batch = x.rows(), seq = s.seq_len, hid = s.hidden_dim;
    const std::size_t heads = ModelSpec::kHeads, dh = hid / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Rows of x hold seq_len consecutive tokens, so the token matrix is a reshape.
    tokens = Matrix(batch * seq, s.token_dim(), std::vector<double>(x.data().begin(), x.data().end()));
    Matrix h = linear_forward(tokens, p, "embed");
    const auto& pos = p.at("pos_embed").values;
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < hid; ++c) h(r, c) += pos[(r % seq) * hid + c];

    blocks.resize(s.depth);
    for (std::size_t l = 0; l < s.depth; ++l) {
        Block& b = blocks[l];
        const std::string pre_name = block_prefix(l);
        b.h_in = h;
        b.q = linear_forward(h, p, pre_name + "attn.q");
        b.k = linear_forward(h, p, pre_name + "attn.k");
        b.v = linear_forward(h, p, pre_name + "attn.v");
        b.probs.assign(batch * heads * seq * seq, 0.0);
        b.attn_concat = Matrix(batch * seq, hid);
        std::vector<double> scores(seq);
        for (std::size_t e = 0; e < batch; ++e) {
            for (std::size_t hd = 0; hd < heads; ++hd) {
                for (std::size_t t = 0; t < seq; ++t) {
                    const auto qt = b.q.row(e * seq + t);
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t u = 0; u < seq; ++u) {
                        const auto ku = b.k.row(e * seq + u);
                        double dot = 0.0;
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) dot += qt[c] * ku[c];
                        scores[u] = dot * scale;
                        mx = std::max(mx, scores[u]);
                    }
                    double z = 0.0;
                    for (std::size_t u = 0; u < seq; ++u) z += (scores[u] = std::exp(scores[u] - mx));
                    double* prob = &b.probs[((e * heads + hd) * seq + t) * seq];
                    auto out = b.attn_concat.row(e * seq + t);
                    for (std::size_t u = 0; u < seq; ++u) {
                        prob[u] = scores[u] / z;
                        const auto vu = b.v.row(e * seq + u);
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) out[c] += prob[u] * vu[c];
                    }
                }
            }
        }
        Matrix r1 = h + linear_forward(b.attn_concat, p, pre_name + "attn.o");
        b.h1 = s.layernorm ? layernorm_forward(r1, p.at(pre_name + "ln1.gain").values,
                                               p.at(pre_name + "ln1.bias").values, b.ln1)
                           : std::move(r1);
        b.u = linear_forward(b.h1, p, pre_name + "ffn.fc1");
        b.a = apply_act(s.activation, b.u);
        Matrix r2 = b.h1 + linear_forward(b.a, p, pre_name + "ffn.fc2");
        h = s.layernorm ? layernorm_forward(r2, p.at(pre_name + "ln2.gain").values,
                                            p.at(pre_name + "ln2.bias").values, b.ln2)
                        : std::move(r2);
    }

    pooled = Matrix(batch, hid);
    for (std::size_t e = 0; e < batch; ++e)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < hid; ++c) pooled(e, c) += h(e * seq + t, c) / static_cast<double>(seq);
    logits = linear_forward(pooled, p, "head");
}

NamedTensorMap ForwardPass::Impl::backward_transformer(const Matrix& dlogits) const {
    const ModelSpec& s = model->spec;
    const auto& p = model->params;
    const std::size_t batch = x.rows(), seq = s.seq_len, hid = s.hidden_dim;
    const std::size_t heads = ModelSpec::kHeads, dh = hid / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    NamedTensorMap g = zero_grads(p);

    Matrix dpooled = linear_backward(pooled, dlogits, p, "head", g);
    Matrix dh_mat(batch * seq, hid);
    for (std::size_t e = 0; e < batch; ++e)
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < hid; ++c) dh_mat(e * seq + t, c) = dpooled(e, c) / static_cast<double>(seq);

    for (std::size_t l = s.depth; l-- > 0;) {
        const Block& b = blocks[l];
        const std::string pre_name = block_prefix(l);

        Matrix dr2 = s.layernorm ? layernorm_backward(dh_mat, b.ln2, p.at(pre_name + "ln2.gain").values,
                                                      g.at(pre_name + "ln2.gain").values,
                                                      g.at(pre_name + "ln2.bias").values)
                                 : dh_mat;
        Matrix da = linear_backward(b.a, dr2, p, pre_name + "ffn.fc2", g);
        for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] *= act_grad(s.activation, b.u.data()[i]);
        Matrix dh1 = dr2 + linear_backward(b.h1, da, p, pre_name + "ffn.fc1", g);

        Matrix dr1 = s.layernorm ? layernorm_backward(dh1, b.ln1, p.at(pre_name + "ln1.gain").values,
                                                      g.at(pre_name + "ln1.gain").values,
                                                      g.at(pre_name + "ln1.bias").values)
                                 : dh1;
        Matrix dconcat = linear_backward(b.attn_concat, dr1, p, pre_name + "attn.o", g);

        Matrix dq(batch * seq, hid), dk(batch * seq, hid), dv(batch * seq, hid);
        std::vector<double> dprob(seq);
        for (std::size_t e = 0; e < batch; ++e) {
            for (std::size_t hd = 0; hd < heads; ++hd) {
                for (std::size_t t = 0; t < seq; ++t) {
                    const double* prob = &b.probs[((e * heads + hd) * seq + t) * seq];
                    const auto dout = dconcat.row(e * seq + t);
                    double weighted = 0.0;
                    for (std::size_t u = 0; u < seq; ++u) {
                        const auto vu = b.v.row(e * seq + u);
                        auto dvu = dv.row(e * seq + u);
                        double dot = 0.0;
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) {
                            dot += dout[c] * vu[c];
                            dvu[c] += prob[u] * dout[c];
                        }
                        dprob[u] = dot;
                        weighted += dot * prob[u];
                    }
                    const auto qt = b.q.row(e * seq + t);
                    auto dqt = dq.row(e * seq + t);
                    for (std::size_t u = 0; u < seq; ++u) {
                        const double dscore = prob[u] * (dprob[u] - weighted) * scale;
                        const auto ku = b.k.row(e * seq + u);
                        auto dku = dk.row(e * seq + u);
                        for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) {
                            dqt[c] += dscore * ku[c];
                            dku[c] += dscore * qt[c];
                        }
                    }
                }
            }
        }
        Matrix dh_in = dr1;
        dh_in += linear_backward(b.h_in, dq, p, pre_name + "attn.q", g);
        dh_in += linear_backward(b.h_in, dk, p, pre_name + "attn.k", g);
        dh_in += linear_backward(b.h_in, dv, p, pre_name + "attn.v", g);
        dh_mat = std::move(dh_in);
    }

    auto& dpos = g.at("pos_embed").values;
    for (std::size_t r = 0; r < dh_mat.rows(); ++r)
        for (std::size_t c = 0; c < hid; ++c) dpos[(r % seq) * hid + c] += dh_mat(r, c);
    linear_backward(tokens, dh_mat, p, "embed", g, false);
    return g;
}

ForwardPass::ForwardPass(const ModelInstance& model, const Matrix& x) : impl_(std::make_unique<Impl>()) {
    if (x.cols() != model.spec.input_dim)
        throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, model expects " +
                         std::to_string(model.spec.input_dim));
    impl_->model = &model;
    impl_->x = x;
    if (model.spec.architecture == Architecture::mini_transformer) impl_->forward_transformer();
    else impl_->forward_mlp();
}

ForwardPass::ForwardPass(ForwardPass&&) noexcept = default;
ForwardPass& ForwardPass::operator=(ForwardPass&&) noexcept = default;
ForwardPass::~ForwardPass() = default;

const Matrix& ForwardPass::logits() const { return impl_->logits; }

ForwardTrace ForwardPass::trace(bool record) const {
    ForwardTrace t;
    t.logits = impl_->logits;
    if (!record) return t;
    const ModelInstance& m = *impl_->model;
    const auto& names = m.linear_layer_names;
    if (m.spec.architecture != Architecture::mini_transformer) {
        for (std::size_t k = 0; k < names.size(); ++k) {
            t.layer_inputs[names[k]] = impl_->inputs[k];
            if (k + 1 < names.size()) t.layer_activations[names[k]] = impl_->inputs[k + 1];
        }
        return t;
    }
    t.layer_inputs["embed"] = impl_->tokens;
    for (std::size_t l = 0; l < impl_->blocks.size(); ++l) {
        const auto& b = impl_->blocks[l];
        const std::string pre_name = block_prefix(l);
        for (const char* proj : {"attn.q", "attn.k", "attn.v"}) t.layer_inputs[pre_name + proj] = b.h_in;
        t.layer_inputs[pre_name + "attn.o"] = b.attn_concat;
        t.layer_inputs[pre_name + "ffn.fc1"] = b.h1;
        t.layer_inputs[pre_name + "ffn.fc2"] = b.a;
        t.layer_activations[pre_name + "ffn.fc1"] = b.a;
    }
    t.layer_inputs["head"] = impl_->pooled;
    return t;
}

NamedTensorMap ForwardPass::backward(const Matrix& dlogits) const {
    if (dlogits.rows() != impl_->logits.rows() || dlogits.cols() != impl_->logits.cols())
        throw ShapeError("backward: dlogits " + shape_string(dlogits) + " vs logits " + shape_string(impl_->logits));
    if (impl_->model->spec.architecture == Architecture::mini_transformer)
        return impl_->backward_transformer(dlogits);
    return impl_->backward_mlp(dlogits);
}

ForwardTrace forward(const ModelInstance& model, const Matrix& x, bool record) {
    return ForwardPass(model, x).trace(record);
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) z += (p(r, c) = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < row.size(); ++c) p(r, c) /= z;
    }
    return p;
}

Matrix sigmoid(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits.data()[i];
        p.data()[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    return p;
}

LossAndGrads loss_and_grads(const ModelInstance& model, const Matrix& x, std::span<const int> labels) {
    if (labels.size() != x.rows()) throw ShapeError("loss_and_grads: label count differs from batch size");
    if (x.rows() == 0) throw ValidationError("loss_and_grads: empty batch");
    const std::size_t classes = model.spec.num_classes;
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ValidationError("label " + std::to_string(y) + " out of range [0," + std::to_string(classes) + ")");
    ForwardPass pass(model, x);
    const Matrix& logits = pass.logits();
    const double n = static_cast<double>(x.rows());
    Matrix dlogits(logits.rows(), classes);
    double loss = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        loss -= row[static_cast<std::size_t>(labels[r])] - lse;
        for (std::size_t c = 0; c < classes; ++c) {
            const double prob = std::exp(row[c] - lse);
            dlogits(r, c) = (prob - (static_cast<int>(c) == labels[r] ? 1.0 : 0.0)) / n;
        }
    }
    return {loss / n, pass.backward(dlogits)};
}

LossAndGrads loss_and_grads_multilabel(const ModelInstance& model, const Matrix& x, const Matrix& targets) {
    if (targets.rows() != x.rows() || targets.cols() != model.spec.num_classes)
        throw ShapeError("loss_and_grads_multilabel: targets " + shape_string(targets) + " do not match");
    if (x.rows() == 0) throw ValidationError("loss_and_grads_multilabel: empty batch");
    ForwardPass pass(model, x);
    const Matrix& logits = pass.logits();
    const Matrix prob = sigmoid(logits);
    const double n = static_cast<double>(x.rows());
    Matrix dlogits(logits.rows(), logits.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits.data()[i], t = targets.data()[i];
        if (t != 0.0 && t != 1.0) throw ValidationError("multi-label targets must be 0 or 1");
        loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - t * z;
        dlogits.data()[i] = (prob.data()[i] - t) / n;
    }
    return {loss / n, pass.backward(dlogits)};
}

LossAndGrads loss_and_grads(const ModelInstance& model, const Dataset& batch) {
    if (model.spec.output == OutputMode::sigmoid) {
        if (!batch.targets) throw ValidationError("sigmoid-output model needs multi-label targets");
        return loss_and_grads_multilabel(model, batch.x, *batch.targets);
    }
    return loss_and_grads(model, batch.x, batch.y);
}

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c)
            if (row[c] > row[best]) best = c;
        out[r] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const ModelInstance& model, const Matrix& x) {
    return argmax_rows(ForwardPass(model, x).logits());
}

double evaluate(const ModelInstance& model, const Dataset& data, MetricKind kind) {
    const Matrix logits = ForwardPass(model, data.x).logits();
    if (data.multi_label()) {
        Matrix pred = sigmoid(logits);
        for (double& v : pred.data()) v = v > 0.5 ? 1.0 : 0.0;
        return multilabel_macro_f1(pred, *data.targets);
    }
    return metric(argmax_rows(logits), data.y, kind);
}

json to_json(const TrainHyper& h) {
    return json{{"lr", h.lr},
                {"epochs", h.epochs},
                {"batch_size", h.batch_size},
                {"seed", h.seed},
                {"val_metric", to_string(h.val_metric)}};
}

TrainHyper train_hyper_from_json(const json& j) {
    TrainHyper h;
    try {
        h.lr = j.value("lr", h.lr);
        h.epochs = j.value("epochs", h.epochs);
        h.batch_size = j.value("batch_size", h.batch_size);
        h.seed = j.value("seed", h.seed);
        h.val_metric = metric_from_string(j.value("val_metric", std::string("accuracy")));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("train hyperparameters: ") + e.what());
    }
    if (h.batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (!(h.lr >= 0.0)) throw ValidationError("lr must be >= 0");
    return h;
}

TrainResult train(const ModelInstance& init, const Dataset& train_set, const Dataset* val, const TrainHyper& hyper) {
    if (train_set.size() == 0) throw ValidationError("train: empty dataset");
    if (hyper.batch_size == 0) throw ValidationError("train: batch_size must be >= 1");
    train_set.validate();
    TrainResult result{init, 0, {}};
    ModelInstance current = init;
    double best = -std::numeric_limits<double>::infinity();
    const Dataset& select_on = val ? *val : train_set;

    for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
        Philox rng(derive_seed(hyper.seed, epoch));
        const auto order = rng.permutation(train_set.size());
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            const std::size_t end = std::min(order.size(), start + hyper.batch_size);
            const Dataset batch = train_set.subset(std::span(order).subspan(start, end - start));
            const LossAndGrads lg = loss_and_grads(current, batch);
            for (const auto& [name, g] : lg.grads.entries()) {
                Tensor& t = current.params.at(name);
                for (std::size_t i = 0; i < t.values.size(); ++i) {
                    double v = t.values[i] - hyper.lr * g.values[i];
                    if (t.dtype == DType::f32) v = static_cast<double>(static_cast<float>(v));
                    t.values[i] = v;
                }
            }
        }
        const double score = evaluate(current, select_on, hyper.val_metric);
        result.val_history.push_back(score);
        if (score > best) {
            best = score;
            result.model = current;
            result.best_epoch = epoch;
        }
    }
    return result;
}

}  // namespace regmerge
