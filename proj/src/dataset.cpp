#include "regmerge/dataset.hpp"

#include <fstream>

#include "regmerge/error.hpp"

namespace regmerge {

using nlohmann::json;

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.x = Matrix(indices.size(), x.cols());
    out.y.reserve(indices.size());
    if (targets) out.targets = Matrix(indices.size(), targets->cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t src = indices[r];
        if (src >= size()) throw ValidationError("dataset subset index out of range");
        std::copy(x.row(src).begin(), x.row(src).end(), out.x.row(r).begin());
        out.y.push_back(y[src]);
        if (targets) std::copy(targets->row(src).begin(), targets->row(src).end(), out.targets->row(r).begin());
    }
    return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end && i < size(); ++i) idx.push_back(i);
    return subset(idx);
}

Dataset Dataset::concat(std::span<const Dataset> parts) {
    if (parts.empty()) return {};
    Dataset out;
    out.num_classes = parts.front().num_classes;
    const std::size_t cols = parts.front().x.cols();
    const bool multi = parts.front().multi_label();
    std::vector<double> xs, ts;
    for (const Dataset& p : parts) {
        if (p.x.cols() != cols) throw ShapeError("concat: input widths differ");
        if (p.num_classes != out.num_classes) throw ValidationError("concat: class counts differ");
        if (p.multi_label() != multi) throw ValidationError("concat: mixing single- and multi-label data");
        xs.insert(xs.end(), p.x.data().begin(), p.x.data().end());
        out.y.insert(out.y.end(), p.y.begin(), p.y.end());
        if (multi) ts.insert(ts.end(), p.targets->data().begin(), p.targets->data().end());
    }
    out.x = Matrix(out.y.size(), cols, std::move(xs));
    if (multi) out.targets = Matrix(out.y.size(), out.num_classes, std::move(ts));
    return out;
}

void Dataset::validate() const {
    if (x.rows() != y.size()) throw ShapeError("dataset: x has " + std::to_string(x.rows()) + " rows, y has " +
                                               std::to_string(y.size()) + " labels");
    if (num_classes == 0) throw ValidationError("dataset: num_classes must be positive");
    for (int label : y)
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
            throw ValidationError("dataset: label " + std::to_string(label) + " out of range");
    if (targets && (targets->rows() != y.size() || targets->cols() != num_classes))
        throw ShapeError("dataset: targets shape " + shape_string(*targets) + " does not match");
    if (!x.all_finite()) throw ValidationError("dataset: non-finite features");
}

json to_json(const Dataset& d) {
    json j;
    j["num_classes"] = d.num_classes;
    j["input_dim"] = d.x.cols();
    json rows = json::array();
    for (std::size_t r = 0; r < d.x.rows(); ++r) rows.push_back(std::vector<double>(d.x.row(r).begin(), d.x.row(r).end()));
    j["x"] = std::move(rows);
    j["y"] = d.y;
    if (d.targets) {
        json t = json::array();
        for (std::size_t r = 0; r < d.targets->rows(); ++r)
            t.push_back(std::vector<double>(d.targets->row(r).begin(), d.targets->row(r).end()));
        j["targets"] = std::move(t);
    }
    return j;
}

static Matrix matrix_from_rows(const json& rows, std::size_t cols) {
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const json& r : rows) {
        if (r.size() != cols) throw ShapeError("dataset json: ragged rows");
        for (const json& v : r) data.push_back(v.get<double>());
    }
    return Matrix(rows.size(), cols, std::move(data));
}

Dataset dataset_from_json(const json& j) {
    Dataset d;
    try {
        d.num_classes = j.at("num_classes").get<std::size_t>();
        const auto& rows = j.at("x");
        const std::size_t cols = j.contains("input_dim") ? j.at("input_dim").get<std::size_t>()
                                                         : (rows.empty() ? 0 : rows.front().size());
        d.x = matrix_from_rows(rows, cols);
        d.y = j.at("y").get<std::vector<int>>();
        if (j.contains("targets")) d.targets = matrix_from_rows(j.at("targets"), d.num_classes);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("dataset json: ") + e.what());
    }
    d.validate();
    return d;
}

void write_dataset(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json(d).dump() << '\n';
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open dataset " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("dataset " + path.string() + ": " + e.what());
    }
    return dataset_from_json(j);
}

}  // namespace regmerge
