#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "memloc/tensor.hpp"

namespace memloc {

enum class Reduction { mean, sum };

// How a batch_norm node obtains its statistics.
enum class BnStats {
    batch,  // compute over the batch (training); stats readable afterwards
    given,  // use the provided running mean/var (evaluation)
};

// Reverse-mode tape over a fixed primitive set. Ops evaluate eagerly and
// cache whatever the adjoint needs; reevaluate() re-runs the whole tape
// after rebinding leaves, which is what the finite-difference oracle uses.
class Graph {
public:
    explicit Graph(Dtype dt = Dtype::f64) : dtype_(dt) {}

    int leaf(const std::string& name, const Tensor& value);

    int matmul(int a, int b);
    int conv2d(int x, int w, int stride, int pad);
    int add(int a, int b);  // same shape, or b of shape [C] broadcast over a
    int multiply(int a, int b);
    int relu(int x);
    int max_pool2(int x);  // 2x2, stride 2
    int global_avg_pool(int x);
    int batch_norm(int x, int gamma, int beta, BnStats stats,
                   std::vector<double> mean = {}, std::vector<double> var = {},
                   double eps = 1e-5);
    int flatten(int x);
    // per-unit multiplicative gate, g of shape [C]; differentiable in g
    int gate(int x, int g);
    // constant per-row unit mask of shape [N,C]; not a node input
    int row_mask(int x, std::vector<double> mask);
    int softmax_cross_entropy(int logits, std::vector<int> labels, Reduction red);
    int scale(int x, double c);

    Dtype dtype() const { return dtype_; }
    int node_count() const { return int(nodes_.size()); }
    int find_leaf(const std::string& name) const;  // -1 when absent
    const std::vector<double>& value(int id) const;
    const std::vector<int>& shape(int id) const;
    Tensor value_tensor(int id) const;

    // batch statistics computed by a BnStats::batch node (mean, var)
    std::pair<std::vector<double>, std::vector<double>> bn_batch_stats(int id) const;

    // Gradient of a scalar node w.r.t. every requires_grad leaf.
    std::map<std::string, Tensor> backward(int loss);

    // Rebind leaves by name and recompute every node in topological order.
    void reevaluate(const std::map<std::string, const Tensor*>& bindings);

private:
    enum class Op {
        leaf, matmul, conv2d, add, multiply, relu, max_pool2,
        global_avg_pool, batch_norm, flatten, gate, row_mask,
        softmax_cross_entropy, scale
    };

    struct Node {
        Op op;
        std::vector<int> in;
        std::vector<int> shape;
        std::vector<double> val;
        bool needs_grad = false;
        // leaf
        std::string name;
        // conv
        int stride = 1, pad = 0;
        // scale
        double factor = 1.0;
        // batch_norm
        BnStats stats = BnStats::batch;
        double eps = 1e-5;
        std::vector<double> bn_mean, bn_var, bn_invstd;  // per channel
        // max_pool argmax indices
        std::vector<int64_t> argmax;
        // row_mask constants
        std::vector<double> mask;
        // softmax_cross_entropy
        std::vector<int> labels;
        Reduction red = Reduction::mean;
        std::vector<double> probs;
    };

    int push(Node n, const char* opname);
    void compute(Node& n) const;
    void adjoint(const Node& n, const std::vector<double>& gout,
                 std::vector<std::vector<double>>& gbuf) const;
    const Node& at(int id) const;

    Dtype dtype_;
    std::vector<Node> nodes_;
};

// Central finite differences of a scalar-output graph w.r.t. one leaf.
// f64 only; `step` is the half-width h of (f(x+h)-f(x-h))/2h.
Tensor finite_diff_gradient(Graph& g, int loss, const std::string& leaf_name, double step);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

std::vector<double> softmax_rows(const std::vector<double>& logits, int n, int k);

}  // namespace memloc
