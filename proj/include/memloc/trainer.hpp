#pragma once

#include <functional>
#include <set>

#include "memloc/checkpoint.hpp"
#include "memloc/data.hpp"
#include "memloc/model.hpp"
#include "memloc/optim.hpp"

namespace memloc {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 512;
    OneCycleSchedule schedule;  // schedule.total_epochs must equal epochs
    double momentum = 0.9;
    double weight_decay = 5e-4;
    uint64_t seed = 0;
    DropoutConfig dropout;
    std::set<int> freeze;
    bool bn_update_while_frozen = false;
    Subset train_subset = Subset::all;  // clean-only retraining uses Subset::clean
};

struct EvalResult {
    bool defined = false;  // false = empty subset marker
    double accuracy = 0.0;
    double mean_loss = 0.0;
    int count = 0;
};

struct EpochEval {
    int epoch = 0;
    EvalResult clean, probe;
};

struct LearningCurves {
    std::vector<EpochEval> per_epoch;  // epochs + 1 entries, epoch 0 first
};

struct TrainHooks {
    std::function<void(int epoch, Model&)> on_epoch;  // called at every boundary
};

// Accuracy and mean loss on a subset. Train subsets score against training
// labels; pass use_training_labels=false for held-out evaluation against the
// original labels. Example-tied "before drop" evaluation supplies per-example
// masks through opts.
EvalResult evaluate(Model& m, const ProbeDataset& d, Subset subset,
                    ForwardOptions opts = {}, bool use_training_labels = true);

// Full training loop: one checkpoint per epoch including epoch 0, post-update
// evaluation per epoch, hooks at every epoch boundary.
LearningCurves train(Model& m, const ProbeDataset& d, const TrainConfig& cfg,
                     CheckpointStore* store = nullptr, const TrainHooks& hooks = {});

// Per-parameter gradients of the summed cross-entropy loss over `ids`,
// computed in chunks on a fixed model (eval-mode normalization statistics).
std::map<std::string, Tensor> subset_sum_gradients(Model& m, const ProbeDataset& d,
                                                   const std::vector<int>& ids,
                                                   int chunk = 1024);

}  // namespace memloc
