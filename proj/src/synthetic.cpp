#include "regmerge/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "regmerge/error.hpp"
#include "regmerge/rng.hpp"

namespace regmerge {

using nlohmann::json;

const char* to_string(Generator g) {
    switch (g) {
        case Generator::gaussian_blobs: return "gaussian_blobs";
        case Generator::rotated_blobs: return "rotated_blobs";
        case Generator::moon_mixtures: return "moon_mixtures";
    }
    return "?";
}

Generator generator_from_string(const std::string& s) {
    if (s == "gaussian_blobs") return Generator::gaussian_blobs;
    if (s == "rotated_blobs") return Generator::rotated_blobs;
    if (s == "moon_mixtures") return Generator::moon_mixtures;
    throw ValidationError("unknown generator '" + s + "'");
}

void SyntheticTask::validate() const {
    if (input_dim == 0) throw ValidationError("task '" + name + "': input_dim must be >= 1");
    if (num_classes < 2) throw ValidationError("task '" + name + "': needs at least 2 classes");
    if (generator == Generator::moon_mixtures && input_dim < 2)
        throw ValidationError("task '" + name + "': moon_mixtures needs input_dim >= 2");
    if (!shift.mean_offset.empty() && shift.mean_offset.size() != input_dim)
        throw ShapeError("task '" + name + "': mean_offset length differs from input_dim");
    if (!shift.class_prior.empty()) {
        if (shift.class_prior.size() != num_classes)
            throw ShapeError("task '" + name + "': class_prior length differs from num_classes");
        double sum = 0.0;
        for (double p : shift.class_prior) {
            if (!(p >= 0.0)) throw ValidationError("task '" + name + "': class_prior entries must be >= 0");
            sum += p;
        }
        if (!(sum > 0.0)) throw ValidationError("task '" + name + "': class_prior sums to zero");
    }
    if (!(noise >= 0.0)) throw ValidationError("task '" + name + "': noise must be >= 0");
}

json to_json(const SyntheticTask& t) {
    return json{{"name", t.name},
                {"generator", to_string(t.generator)},
                {"input_dim", t.input_dim},
                {"num_classes", t.num_classes},
                {"shift",
                 {{"mean_offset", t.shift.mean_offset},
                  {"rotation", t.shift.rotation},
                  {"class_prior", t.shift.class_prior}}},
                {"sizes", {{"train", t.train}, {"val", t.val}, {"test", t.test}}},
                {"task_seed", t.task_seed},
                {"seed", t.seed},
                {"separation", t.separation},
                {"noise", t.noise}};
}

SyntheticTask synthetic_task_from_json(const json& j) {
    SyntheticTask t;
    try {
        t.name = j.value("name", t.name);
        t.generator = generator_from_string(j.value("generator", std::string("gaussian_blobs")));
        t.input_dim = j.value("input_dim", t.input_dim);
        t.num_classes = j.value("num_classes", t.num_classes);
        if (j.contains("shift")) {
            const json& s = j.at("shift");
            t.shift.mean_offset = s.value("mean_offset", std::vector<double>{});
            t.shift.rotation = s.value("rotation", 0.0);
            t.shift.class_prior = s.value("class_prior", std::vector<double>{});
        }
        if (j.contains("sizes")) {
            const json& s = j.at("sizes");
            t.train = s.value("train", t.train);
            t.val = s.value("val", t.val);
            t.test = s.value("test", t.test);
        }
        t.task_seed = j.value("task_seed", t.task_seed);
        t.seed = j.value("seed", t.seed);
        t.separation = j.value("separation", t.separation);
        t.noise = j.value("noise", t.noise);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("task json: ") + e.what());
    }
    t.validate();
    return t;
}

namespace {

struct Geometry {
    std::vector<std::vector<double>> centers;  // gaussian/rotated blobs
    Matrix projection;                         // moons: input_dim × 2
};

Geometry make_geometry(const SyntheticTask& t) {
    Geometry g;
    Philox rng(t.task_seed, 1);
    const double scale = t.separation / std::sqrt(static_cast<double>(t.input_dim));
    for (std::size_t c = 0; c < t.num_classes; ++c) {
        std::vector<double> center(t.input_dim);
        for (double& v : center) v = scale * rng.normal();
        g.centers.push_back(std::move(center));
    }
    if (t.generator == Generator::moon_mixtures) {
        // Two orthonormal directions by Gram-Schmidt.
        Philox prng(t.task_seed, 2);
        g.projection = Matrix(t.input_dim, 2);
        for (std::size_t k = 0; k < 2; ++k) {
            std::vector<double> v(t.input_dim);
            for (double& e : v) e = prng.normal();
            if (k == 1) {
                double dot = 0.0;
                for (std::size_t d = 0; d < t.input_dim; ++d) dot += v[d] * g.projection(d, 0);
                for (std::size_t d = 0; d < t.input_dim; ++d) v[d] -= dot * g.projection(d, 0);
            }
            double norm = 0.0;
            for (double e : v) norm += e * e;
            norm = std::sqrt(norm);
            for (std::size_t d = 0; d < t.input_dim; ++d) g.projection(d, k) = v[d] / norm;
        }
    }
    return g;
}

std::size_t draw_class(Philox& rng, const SyntheticTask& t) {
    if (t.shift.class_prior.empty()) return static_cast<std::size_t>(rng.below(t.num_classes));
    double total = 0.0;
    for (double p : t.shift.class_prior) total += p;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t c = 0; c < t.num_classes; ++c) {
        acc += t.shift.class_prior[c];
        if (u < acc) return c;
    }
    return t.num_classes - 1;
}

Dataset draw(Philox& rng, const SyntheticTask& t, const Geometry& g, std::size_t n) {
    Dataset d;
    d.num_classes = t.num_classes;
    d.x = Matrix(n, t.input_dim);
    d.y.resize(n);
    const double cos_r = std::cos(t.shift.rotation), sin_r = std::sin(t.shift.rotation);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = draw_class(rng, t);
        d.y[i] = static_cast<int>(c);
        auto row = d.x.row(i);
        if (t.generator == Generator::moon_mixtures) {
            // Interleaved half circles, one pair of moons per two classes.
            const double angle = std::numbers::pi * rng.uniform();
            const double shift = 3.0 * static_cast<double>(c / 2);
            const double px = (c % 2 == 0 ? std::cos(angle) : 1.0 - std::cos(angle)) + shift;
            const double py = c % 2 == 0 ? std::sin(angle) : 0.5 - std::sin(angle);
            for (std::size_t k = 0; k < t.input_dim; ++k)
                row[k] = t.separation * (g.projection(k, 0) * px + g.projection(k, 1) * py) + t.noise * rng.normal();
        } else {
            for (std::size_t k = 0; k < t.input_dim; ++k) row[k] = g.centers[c][k] + t.noise * rng.normal();
            if (t.generator == Generator::rotated_blobs) {
                for (std::size_t k = 0; k + 1 < t.input_dim; k += 2) {
                    const double a = row[k], b = row[k + 1];
                    row[k] = cos_r * a - sin_r * b;
                    row[k + 1] = sin_r * a + cos_r * b;
                }
            }
        }
        if (!t.shift.mean_offset.empty())
            for (std::size_t k = 0; k < t.input_dim; ++k) row[k] += t.shift.mean_offset[k];
    }
    return d;
}

}  // namespace

TaskSplits generate(const SyntheticTask& task) {
    task.validate();
    const Geometry g = make_geometry(task);
    Philox rng(task.seed, 7);
    TaskSplits s;
    s.train = draw(rng, task, g, task.train);
    s.val = draw(rng, task, g, task.val);
    s.test = draw(rng, task, g, task.test);
    return s;
}

void PartitionSpec::validate() const {
    if (!(key_fraction > 0.0 && key_fraction < 1.0)) throw ValidationError("key_fraction must lie in (0, 1)");
    if (partition_size == 0) throw ValidationError("partition_size must be >= 1");
}

json to_json(const PartitionSpec& p) {
    return json{{"key_class", p.key_class ? json(*p.key_class) : json("random")},
                {"key_fraction", p.key_fraction},
                {"partition_size", p.partition_size},
                {"seed", p.seed}};
}

PartitionSpec partition_spec_from_json(const json& j) {
    PartitionSpec p;
    try {
        if (j.contains("key_class") && j.at("key_class").is_number_integer()) p.key_class = j.at("key_class").get<int>();
        else if (j.contains("key_class") && j.at("key_class") != "random")
            throw ValidationError("key_class must be an integer or \"random\"");
        p.key_fraction = j.value("key_fraction", p.key_fraction);
        p.partition_size = j.value("partition_size", p.partition_size);
        p.seed = j.value("seed", p.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("partition spec: ") + e.what());
    }
    p.validate();
    return p;
}

Partitions make_noniid_partitions(const Dataset& data, const PartitionSpec& spec) {
    spec.validate();
    data.validate();
    if (data.num_classes < 2) throw ValidationError("partitioning needs at least 2 classes");
    if (data.size() < 2 * spec.partition_size)
        throw ValidationError("dataset has " + std::to_string(data.size()) + " examples, partitioning needs at least " +
                              std::to_string(2 * spec.partition_size));
    Philox rng(spec.seed, 0x9a27);
    Partitions out;
    out.key_class = spec.key_class ? *spec.key_class : static_cast<int>(rng.below(data.num_classes));
    if (out.key_class < 0 || static_cast<std::size_t>(out.key_class) >= data.num_classes)
        throw ValidationError("key_class out of range");

    std::vector<std::size_t> key, first, second;
    for (std::size_t i : rng.permutation(data.size())) {
        if (data.y[i] == out.key_class) key.push_back(i);
        else second.push_back(i);
    }
    const auto n_first = static_cast<std::size_t>(std::llround(spec.key_fraction * static_cast<double>(key.size())));
    first.assign(key.begin(), key.begin() + static_cast<std::ptrdiff_t>(n_first));
    second.insert(second.end(), key.begin() + static_cast<std::ptrdiff_t>(n_first), key.end());
    out.key_in_first = first.size();

    // Move non-key examples out of the larger side, drawn without replacement.
    auto& larger = first.size() > second.size() ? first : second;
    auto& smaller = first.size() > second.size() ? second : first;
    std::vector<std::size_t> movable;
    for (std::size_t pos = 0; pos < larger.size(); ++pos)
        if (data.y[larger[pos]] != out.key_class) movable.push_back(pos);
    const std::size_t to_move = (larger.size() - smaller.size()) / 2;
    if (movable.size() < to_move)
        throw ValidationError("not enough non-key examples to balance the partitions");
    std::vector<bool> moved(larger.size(), false);
    const auto pick = rng.permutation(movable.size());
    for (std::size_t m = 0; m < to_move; ++m) {
        moved[movable[pick[m]]] = true;
        smaller.push_back(larger[movable[pick[m]]]);
    }
    std::vector<std::size_t> kept;
    for (std::size_t pos = 0; pos < larger.size(); ++pos)
        if (!moved[pos]) kept.push_back(larger[pos]);
    larger = std::move(kept);
    if (larger.size() > smaller.size()) larger.pop_back();  // odd total

    auto subsample = [&](std::vector<std::size_t>& part) {
        const auto order = rng.permutation(part.size());
        std::vector<std::size_t> picked;
        for (std::size_t k = 0; k < spec.partition_size; ++k) picked.push_back(part[order[k]]);
        return data.subset(picked);
    };
    out.first = subsample(first);
    out.second = subsample(second);
    return out;
}

}  // namespace regmerge
