#include "memloc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "memloc/rng.hpp"

namespace memloc {

const char* subset_name(Subset s) {
    switch (s) {
        case Subset::clean: return "clean";
        case Subset::probe: return "probe";
        case Subset::all: return "total";
    }
    return "?";
}

std::vector<int> ProbeDataset::feature_shape() const {
    return {inputs.shape.begin() + 1, inputs.shape.end()};
}

std::vector<int> ProbeDataset::subset_ids(Subset s) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
        if (s == Subset::all || (s == Subset::probe) == bool(probe_flags[i]))
            out.push_back(i);
    }
    return out;
}

Tensor ProbeDataset::gather_inputs(const std::vector<int>& ids) const {
    std::vector<int> fs = feature_shape();
    int64_t row = 1;
    for (int e : fs) row *= e;
    std::vector<int> shape{int(ids.size())};
    shape.insert(shape.end(), fs.begin(), fs.end());
    Tensor out = Tensor::zeros(shape, inputs.dtype);
    for (size_t r = 0; r < ids.size(); ++r) {
        int id = ids[r];
        if (id < 0 || id >= size()) throw Error(strcat("gather: bad example id ", id));
        std::copy_n(inputs.data.begin() + int64_t(id) * row, row,
                    out.data.begin() + int64_t(r) * row);
    }
    return out;
}

std::vector<int> ProbeDataset::gather_labels(const std::vector<int>& ids,
                                             bool training) const {
    const auto& src = training ? training_labels : original_labels;
    std::vector<int> out(ids.size());
    for (size_t r = 0; r < ids.size(); ++r) out[r] = src[size_t(ids[r])];
    return out;
}

void ProbeDataset::reshape_inputs(std::vector<int> fs) {
    int64_t row = 1;
    for (int e : fs) row *= e;
    int64_t cur = inputs.numel() / std::max(1, size());
    if (row != cur)
        throw ShapeError(strcat("reshape_inputs: ", shape_str(fs), " has ", row,
                                " elements per row, dataset has ", cur));
    std::vector<int> shape{size()};
    shape.insert(shape.end(), fs.begin(), fs.end());
    inputs.shape = std::move(shape);
}

ProbeDataset ProbeDataset::head(int n) const {
    if (n >= size()) return *this;
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = i;
    ProbeDataset out;
    out.inputs = gather_inputs(ids);
    out.original_labels.assign(original_labels.begin(), original_labels.begin() + n);
    out.training_labels.assign(training_labels.begin(), training_labels.begin() + n);
    out.probe_flags.assign(probe_flags.begin(), probe_flags.begin() + n);
    out.class_count = class_count;
    return out;
}

ScoreFile load_score_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(strcat("cannot open score file '", path, "'"));
    std::string line;
    if (!std::getline(in, line) || line.rfind("id,score", 0) != 0)
        throw Error(strcat("score file '", path, "': missing 'id,score' header"));
    ScoreFile scores;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        int id;
        double score;
        if (std::sscanf(line.c_str(), "%d,%lf", &id, &score) != 2)
            throw Error(strcat("score file '", path, "' line ", lineno, ": bad row"));
        if (score < 0.0 || score > 1.0)
            throw Error(strcat("score file '", path, "' line ", lineno,
                               ": score outside [0,1]"));
        scores[id] = score;
    }
    return scores;
}

ProbeDataset inject_label_noise(ProbeDataset d, double rate, uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError(strcat("noise rate ", rate, " outside [0,1)"));
    int n = d.size();
    int flips = int(std::llround(rate * n));
    d.training_labels = d.original_labels;
    d.probe_flags.assign(n, 0);
    Rng rng(hash_seed(seed, 0x6e6f697365));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (int i = 0; i < flips; ++i) {
        int id = order[i];
        int wrong = int(rng.below(d.class_count - 1));
        if (wrong >= d.original_labels[id]) ++wrong;
        d.training_labels[id] = wrong;
        d.probe_flags[id] = 1;
    }
    return d;
}

ProbeDataset partition_by_score(ProbeDataset d, const ScoreFile& scores, double threshold) {
    d.probe_flags.assign(d.size(), 0);
    for (int i = 0; i < d.size(); ++i) {
        auto it = scores.find(i);
        if (it == scores.end())
            throw Error(strcat("score file lacks example id ", i));
        if (it->second < threshold) d.probe_flags[i] = 1;
    }
    d.training_labels = d.original_labels;
    return d;
}

namespace {

uint32_t read_be32(std::istream& in, const std::string& path, int64_t& offset) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw Error(strcat("IDX file '", path, "': truncated at byte ", offset));
    offset += 4;
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
           uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

ProbeDataset load_idx(const std::string& images_path, const std::string& labels_path,
                      int class_count, bool standardize) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw Error(strcat("cannot open IDX file '", images_path, "'"));
    int64_t off = 0;
    uint32_t magic = read_be32(imgs, images_path, off);
    if (magic != 0x00000803u)
        throw Error(strcat("IDX file '", images_path, "': bad magic 0x", std::hex, magic,
                           " at byte 0 (expected 0x803)"));
    uint32_t n = read_be32(imgs, images_path, off);
    uint32_t h = read_be32(imgs, images_path, off);
    uint32_t w = read_be32(imgs, images_path, off);
    Tensor inputs = Tensor::zeros({int(n), 1, int(h), int(w)}, Dtype::f64);
    std::vector<unsigned char> raw(size_t(n) * h * w);
    if (!imgs.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
        throw Error(strcat("IDX file '", images_path, "': truncated pixel data at byte ",
                           off));
    for (size_t i = 0; i < raw.size(); ++i) inputs.data[i] = raw[i] / 255.0;

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw Error(strcat("cannot open IDX file '", labels_path, "'"));
    int64_t loff = 0;
    uint32_t lmagic = read_be32(labs, labels_path, loff);
    if (lmagic != 0x00000801u)
        throw Error(strcat("IDX file '", labels_path, "': bad magic 0x", std::hex, lmagic,
                           " at byte 0 (expected 0x801)"));
    uint32_t ln = read_be32(labs, labels_path, loff);
    if (ln != n)
        throw Error(strcat("IDX: ", n, " images but ", ln, " labels"));
    std::vector<unsigned char> lraw(ln);
    if (!labs.read(reinterpret_cast<char*>(lraw.data()), std::streamsize(lraw.size())))
        throw Error(strcat("IDX file '", labels_path, "': truncated label data at byte ",
                           loff));

    ProbeDataset d;
    d.class_count = class_count;
    d.original_labels.resize(ln);
    for (uint32_t i = 0; i < ln; ++i) {
        if (lraw[i] >= class_count)
            throw Error(strcat("IDX label ", int(lraw[i]), " outside [0,", class_count,
                               ") at example ", i));
        d.original_labels[i] = lraw[i];
    }
    if (standardize) {
        double mean = 0.0, var = 0.0;
        for (double v : inputs.data) mean += v;
        mean /= double(inputs.data.size());
        for (double v : inputs.data) var += (v - mean) * (v - mean);
        var /= double(inputs.data.size());
        double inv = 1.0 / std::sqrt(var + 1e-8);
        for (auto& v : inputs.data) v = (v - mean) * inv;
    }
    d.inputs = std::move(inputs);
    d.training_labels = d.original_labels;
    d.probe_flags.assign(n, 0);
    return d;
}

void write_idx_images(const std::string& path, const Tensor& images) {
    if (images.shape.size() != 4 || images.shape[1] != 1)
        throw ShapeError(strcat("write_idx_images: need [N,1,H,W], got ",
                                shape_str(images.shape)));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(strcat("cannot write IDX file '", path, "'"));
    write_be32(out, 0x00000803u);
    write_be32(out, uint32_t(images.shape[0]));
    write_be32(out, uint32_t(images.shape[2]));
    write_be32(out, uint32_t(images.shape[3]));
    for (double v : images.data) {
        double c = std::clamp(v, 0.0, 1.0);
        unsigned char b = static_cast<unsigned char>(std::lround(c * 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(strcat("cannot write IDX file '", path, "'"));
    write_be32(out, 0x00000801u);
    write_be32(out, uint32_t(labels.size()));
    for (int l : labels) {
        unsigned char b = static_cast<unsigned char>(l);
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
}

ProbeDataset synth_clusters(int classes, int per_class, int dim, double margin,
                            uint64_t seed) {
    if (margin <= 0.0) throw ConfigError("synth_clusters: margin must be positive");
    Rng rng(hash_seed(seed, 0x73796e7468));
    std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
    for (int c = 0; c < classes; ++c) {
        double norm = 0.0;
        for (int j = 0; j < dim; ++j) {
            means[c][j] = rng.normal();
            norm += means[c][j] * means[c][j];
        }
        norm = std::sqrt(norm);
        double scale = margin / std::sqrt(2.0) / norm;
        for (int j = 0; j < dim; ++j) means[c][j] *= scale;
    }
    int n = classes * per_class;
    ProbeDataset d;
    d.class_count = classes;
    d.inputs = Tensor::zeros({n, dim}, Dtype::f64);
    d.original_labels.resize(n);
    for (int i = 0; i < n; ++i) {
        int c = i % classes;
        d.original_labels[i] = c;
        for (int j = 0; j < dim; ++j)
            d.inputs.data[size_t(i) * dim + j] = means[c][j] + rng.normal();
    }
    d.training_labels = d.original_labels;
    d.probe_flags.assign(n, 0);
    return d;
}

std::vector<std::vector<int>> batches(int n, const BatchPlan& plan, int epoch) {
    if (epoch < 0) throw ConfigError("batches: negative epoch");
    if (plan.batch_size <= 0) throw ConfigError("batches: batch size must be positive");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(hash_seed(plan.shuffle_seed, 0x6261746368, uint64_t(epoch)));
    rng.shuffle(order);
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += plan.batch_size) {
        int end = std::min(n, start + plan.batch_size);
        out.emplace_back(order.begin() + start, order.begin() + end);
    }
    return out;
}

}  // namespace memloc
