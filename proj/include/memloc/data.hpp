#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memloc/tensor.hpp"

namespace memloc {

enum class Subset { clean, probe, all };

const char* subset_name(Subset s);

// Training set with a two-way probe partition. probe_flags marks the tracked
// subset: mislabeled examples after noise injection, or low-score (atypical)
// examples after partition_by_score.
struct ProbeDataset {
    Tensor inputs;  // [N,F] or [N,C,H,W]
    std::vector<int> original_labels;
    std::vector<int> training_labels;
    std::vector<uint8_t> probe_flags;
    int class_count = 0;

    int size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
    std::vector<int> feature_shape() const;  // without the batch dimension
    std::vector<int> subset_ids(Subset s) const;
    Tensor gather_inputs(const std::vector<int>& ids) const;
    std::vector<int> gather_labels(const std::vector<int>& ids, bool training) const;
    void reshape_inputs(std::vector<int> feature_shape);
    // keep only the first n examples
    ProbeDataset head(int n) const;
};

using ScoreFile = std::map<int, double>;

ScoreFile load_score_csv(const std::string& path);

// Flags exactly round(rate*N) examples and resamples each flagged label
// uniformly over the other classes.
ProbeDataset inject_label_noise(ProbeDataset d, double rate, uint64_t seed);

// probe_flags = (score < threshold); labels untouched
ProbeDataset partition_by_score(ProbeDataset d, const ScoreFile& scores, double threshold);

ProbeDataset load_idx(const std::string& images_path, const std::string& labels_path,
                      int class_count = 10, bool standardize = false);

// test fixture / synthetic dataset emission helpers
void write_idx_images(const std::string& path, const Tensor& images);  // [N,1,H,W] in [0,1]
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// Gaussian blobs around class means separated by `margin`.
ProbeDataset synth_clusters(int classes, int per_class, int dim, double margin,
                            uint64_t seed);

struct BatchPlan {
    uint64_t shuffle_seed = 0;
    int batch_size = 512;
};

// One epoch's batches: a seeded permutation of [0,N) cut into batch-size runs.
std::vector<std::vector<int>> batches(int n, const BatchPlan& plan, int epoch);

}  // namespace memloc
