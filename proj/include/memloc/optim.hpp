#pragma once

#include <map>
#include <string>

#include "memloc/tensor.hpp"

namespace memloc {

// Linear ramp to peak_lr at peak_epoch, then linear decay down to
// peak_lr / (div_factor * 100) at the final epoch.
struct OneCycleSchedule {
    double peak_lr = 0.1;
    int peak_epoch = 10;
    int total_epochs = 50;
    double div_factor = 25.0;

    double lr(int epoch) const;
};

// SGD with classical momentum and L2 weight decay:
//   v <- momentum * v + g + weight_decay * w ; w <- w - lr * v
// momentum = weight_decay = 0 reduces to w <- w - lr * g.
class SgdState {
public:
    SgdState(double momentum, double weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(std::map<std::string, Tensor>& params,
              const std::map<std::string, Tensor>& grads, double lr);

private:
    double momentum_;
    double weight_decay_;
    std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace memloc
