#include "memloc/optim.hpp"

namespace memloc {

double OneCycleSchedule::lr(int epoch) const {
    if (peak_epoch <= 0 || peak_epoch >= total_epochs)
        throw ConfigError(strcat("one_cycle: need 0 < peak_epoch < total_epochs, got ",
                                 peak_epoch, " / ", total_epochs));
    if (epoch < 0 || epoch >= total_epochs)
        throw ConfigError(strcat("one_cycle: epoch ", epoch, " outside [0,", total_epochs, ")"));
    double lo = peak_lr / div_factor;
    if (epoch <= peak_epoch)
        return lo + (peak_lr - lo) * double(epoch) / double(peak_epoch);
    double end = peak_lr / (div_factor * 100.0);
    double t = double(epoch - peak_epoch) / double(total_epochs - 1 - peak_epoch);
    return peak_lr + (end - peak_lr) * t;
}

void SgdState::step(std::map<std::string, Tensor>& params,
                    const std::map<std::string, Tensor>& grads, double lr) {
    if (lr < 0.0) throw ConfigError("sgd_step: negative learning rate");
    for (auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end())
            throw Error(strcat("sgd_step: gradient for unknown parameter '", name, "'"));
        Tensor& w = it->second;
        if (g.shape != w.shape)
            throw ShapeError(strcat("sgd_step: '", name, "' gradient shape ",
                                    shape_str(g.shape), " vs parameter ", shape_str(w.shape)));
        if (lr == 0.0) continue;
        auto& v = velocity_[name];
        if (v.size() != w.data.size()) v.assign(w.data.size(), 0.0);
        for (size_t i = 0; i < w.data.size(); ++i) {
            v[i] = momentum_ * v[i] + g.data[i] + weight_decay_ * w.data[i];
            w.data[i] -= lr * v[i];
        }
        canonicalize(w.data, w.dtype, "sgd_step");
    }
}

}  // namespace memloc
