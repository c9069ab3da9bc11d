#include "regmerge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "regmerge/error.hpp"

namespace regmerge {

const char* to_string(MetricKind k) {
    switch (k) {
        case MetricKind::accuracy: return "accuracy";
        case MetricKind::macro_f1: return "macro_f1";
        case MetricKind::matthews: return "matthews";
    }
    return "?";
}

MetricKind metric_from_string(const std::string& s) {
    if (s == "accuracy") return MetricKind::accuracy;
    if (s == "macro_f1") return MetricKind::macro_f1;
    if (s == "matthews") return MetricKind::matthews;
    throw ValidationError("unknown metric '" + s + "'");
}

static void check_inputs(std::span<const int> p, std::span<const int> l) {
    if (p.size() != l.size()) throw ValidationError("metric: predictions and labels differ in length");
    if (l.empty()) throw ValidationError("metric: empty inputs");
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    check_inputs(predictions, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double macro_f1(std::span<const int> predictions, std::span<const int> labels,
                std::optional<std::span<const int>> restrict_to) {
    check_inputs(predictions, labels);
    std::map<int, std::size_t> tp, fp, fn;
    std::set<int> present(labels.begin(), labels.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (predictions[i] == labels[i]) {
            ++tp[labels[i]];
        } else {
            ++fp[predictions[i]];
            ++fn[labels[i]];
        }
    }
    std::set<int> classes = present;
    if (restrict_to) {
        classes.clear();
        for (int c : *restrict_to)
            if (present.count(c)) classes.insert(c);
    }
    if (classes.empty()) throw ValidationError("macro_f1: no evaluable classes");
    double total = 0.0;
    for (int c : classes) {
        const double t = static_cast<double>(tp[c]);
        const double denom = 2.0 * t + static_cast<double>(fp[c]) + static_cast<double>(fn[c]);
        total += denom > 0.0 ? 2.0 * t / denom : 0.0;
    }
    return total / static_cast<double>(classes.size());
}

double matthews(std::span<const int> predictions, std::span<const int> labels) {
    check_inputs(predictions, labels);
    std::map<int, double> true_count, pred_count;
    double correct = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        true_count[labels[i]] += 1.0;
        pred_count[predictions[i]] += 1.0;
        correct += predictions[i] == labels[i];
    }
    const double s = static_cast<double>(labels.size());
    double pt = 0.0, pp = 0.0, tt = 0.0;
    for (const auto& [c, t] : true_count) {
        tt += t * t;
        auto it = pred_count.find(c);
        if (it != pred_count.end()) pt += it->second * t;
    }
    for (const auto& [c, p] : pred_count) pp += p * p;
    const double denom = std::sqrt((s * s - pp) * (s * s - tt));
    if (denom == 0.0) return 0.0;
    return (correct * s - pt) / denom;
}

double metric(std::span<const int> predictions, std::span<const int> labels, MetricKind kind) {
    switch (kind) {
        case MetricKind::accuracy: return accuracy(predictions, labels);
        case MetricKind::macro_f1: return macro_f1(predictions, labels);
        case MetricKind::matthews: return matthews(predictions, labels);
    }
    throw ValidationError("unknown metric");
}

double multilabel_macro_f1(const Matrix& predictions, const Matrix& targets) {
    if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
        throw ShapeError("multilabel_macro_f1: shape mismatch");
    if (targets.rows() == 0) throw ValidationError("multilabel_macro_f1: empty inputs");
    double total = 0.0;
    std::size_t classes = 0;
    for (std::size_t c = 0; c < targets.cols(); ++c) {
        double tp = 0, fp = 0, fn = 0, positives = 0;
        for (std::size_t r = 0; r < targets.rows(); ++r) {
            const bool t = targets(r, c) > 0.5;
            const bool p = predictions(r, c) > 0.5;
            positives += t;
            tp += t && p;
            fp += !t && p;
            fn += t && !p;
        }
        if (positives == 0) continue;
        ++classes;
        total += 2 * tp / (2 * tp + fp + fn);
    }
    if (classes == 0) throw ValidationError("multilabel_macro_f1: no positive targets");
    return total / static_cast<double>(classes);
}

}  // namespace regmerge
