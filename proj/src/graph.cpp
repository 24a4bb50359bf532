#include "memloc/graph.hpp"

#include <algorithm>
#include <cmath>

namespace memloc {

namespace {

int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

// channel count and per-channel element count for [N,C] / [N,C,H,W]
struct ChanLayout {
    int n, c, hw;  // hw = 1 for dense
};

ChanLayout chan_layout(const std::vector<int>& s, const char* who) {
    if (s.size() == 2) return {s[0], s[1], 1};
    if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
    throw ShapeError(strcat(who, ": expected [N,C] or [N,C,H,W], got ", shape_str(s)));
}

}  // namespace

const Graph::Node& Graph::at(int id) const {
    if (id < 0 || id >= int(nodes_.size()))
        throw Error(strcat("invalid node id ", id));
    return nodes_[id];
}

const std::vector<double>& Graph::value(int id) const { return at(id).val; }

int Graph::find_leaf(const std::string& name) const {
    for (size_t id = 0; id < nodes_.size(); ++id)
        if (nodes_[id].op == Op::leaf && nodes_[id].name == name) return int(id);
    return -1;
}
const std::vector<int>& Graph::shape(int id) const { return at(id).shape; }

Tensor Graph::value_tensor(int id) const {
    const Node& n = at(id);
    return Tensor::from(n.shape, n.val, dtype_);
}

std::pair<std::vector<double>, std::vector<double>> Graph::bn_batch_stats(int id) const {
    const Node& n = at(id);
    if (n.op != Op::batch_norm || n.stats != BnStats::batch)
        throw Error("bn_batch_stats: node is not a batch-stats batch_norm");
    return {n.bn_mean, n.bn_var};
}

int Graph::push(Node n, const char* opname) {
    compute(n);
    canonicalize(n.val, dtype_, opname);
    for (int i : n.in)
        if (nodes_[i].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

int Graph::leaf(const std::string& name, const Tensor& value) {
    Node n;
    n.op = Op::leaf;
    n.name = name;
    n.shape = value.shape;
    n.val = value.data;
    n.needs_grad = value.requires_grad;
    canonicalize(n.val, dtype_, "leaf");
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

int Graph::matmul(int a, int b) {
    Node n;
    n.op = Op::matmul;
    n.in = {a, b};
    return push(std::move(n), "matmul");
}

int Graph::conv2d(int x, int w, int stride, int pad) {
    Node n;
    n.op = Op::conv2d;
    n.in = {x, w};
    n.stride = stride;
    n.pad = pad;
    return push(std::move(n), "conv2d");
}

int Graph::add(int a, int b) {
    Node n;
    n.op = Op::add;
    n.in = {a, b};
    return push(std::move(n), "add");
}

int Graph::multiply(int a, int b) {
    Node n;
    n.op = Op::multiply;
    n.in = {a, b};
    return push(std::move(n), "multiply");
}

int Graph::relu(int x) {
    Node n;
    n.op = Op::relu;
    n.in = {x};
    return push(std::move(n), "relu");
}

int Graph::max_pool2(int x) {
    Node n;
    n.op = Op::max_pool2;
    n.in = {x};
    return push(std::move(n), "max_pool2");
}

int Graph::global_avg_pool(int x) {
    Node n;
    n.op = Op::global_avg_pool;
    n.in = {x};
    return push(std::move(n), "global_avg_pool");
}

int Graph::batch_norm(int x, int gamma, int beta, BnStats stats,
                      std::vector<double> mean, std::vector<double> var, double eps) {
    Node n;
    n.op = Op::batch_norm;
    n.in = {x, gamma, beta};
    n.stats = stats;
    n.eps = eps;
    if (stats == BnStats::given) {
        n.bn_mean = std::move(mean);
        n.bn_var = std::move(var);
    }
    return push(std::move(n), "batch_norm");
}

int Graph::flatten(int x) {
    Node n;
    n.op = Op::flatten;
    n.in = {x};
    return push(std::move(n), "flatten");
}

int Graph::gate(int x, int g) {
    Node n;
    n.op = Op::gate;
    n.in = {x, g};
    return push(std::move(n), "gate");
}

int Graph::row_mask(int x, std::vector<double> mask) {
    Node n;
    n.op = Op::row_mask;
    n.in = {x};
    n.mask = std::move(mask);
    return push(std::move(n), "row_mask");
}

int Graph::softmax_cross_entropy(int logits, std::vector<int> labels, Reduction red) {
    Node n;
    n.op = Op::softmax_cross_entropy;
    n.in = {logits};
    n.labels = std::move(labels);
    n.red = red;
    return push(std::move(n), "softmax_cross_entropy");
}

int Graph::scale(int x, double c) {
    Node n;
    n.op = Op::scale;
    n.in = {x};
    n.factor = c;
    return push(std::move(n), "scale");
}

void Graph::compute(Node& n) const {
    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            const Node& a = at(n.in[0]);
            const Node& b = at(n.in[1]);
            if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
                throw ShapeError(strcat("matmul: incompatible shapes ", shape_str(a.shape),
                                        " x ", shape_str(b.shape)));
            int m = a.shape[0], k = a.shape[1], p = b.shape[1];
            n.shape = {m, p};
            n.val.assign(size_t(m) * p, 0.0);
            for (int i = 0; i < m; ++i) {
                const double* arow = &a.val[size_t(i) * k];
                double* orow = &n.val[size_t(i) * p];
                for (int kk = 0; kk < k; ++kk) {
                    double av = arow[kk];
                    if (av == 0.0) continue;
                    const double* brow = &b.val[size_t(kk) * p];
                    for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
                }
            }
            break;
        }
        case Op::conv2d: {
            const Node& x = at(n.in[0]);
            const Node& w = at(n.in[1]);
            if (x.shape.size() != 4 || w.shape.size() != 4 || x.shape[1] != w.shape[1])
                throw ShapeError(strcat("conv2d: incompatible shapes ", shape_str(x.shape),
                                        " * ", shape_str(w.shape)));
            int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
            int s = n.stride, p = n.pad;
            int Ho = (H + 2 * p - kh) / s + 1;
            int Wo = (W + 2 * p - kw) / s + 1;
            if (H + 2 * p < kh || W + 2 * p < kw)
                throw ShapeError(strcat("conv2d: kernel ", shape_str(w.shape),
                                        " larger than padded input ", shape_str(x.shape)));
            n.shape = {N, O, Ho, Wo};
            n.val.assign(size_t(N) * O * Ho * Wo, 0.0);
            for (int b = 0; b < N; ++b)
                for (int o = 0; o < O; ++o) {
                    double* oplane = &n.val[((size_t(b) * O + o) * Ho) * Wo];
                    for (int c = 0; c < C; ++c) {
                        const double* xplane = &x.val[((size_t(b) * C + c) * H) * W];
                        const double* wplane = &w.val[((size_t(o) * C + c) * kh) * kw];
                        for (int i = 0; i < kh; ++i)
                            for (int ho = 0; ho < Ho; ++ho) {
                                int h = ho * s - p + i;
                                if (h < 0 || h >= H) continue;
                                const double* xrow = xplane + size_t(h) * W;
                                const double* wrow = wplane + size_t(i) * kw;
                                double* orow = oplane + size_t(ho) * Wo;
                                for (int wo = 0; wo < Wo; ++wo) {
                                    int base = wo * s - p;
                                    double acc = 0.0;
                                    for (int j = 0; j < kw; ++j) {
                                        int ww = base + j;
                                        if (ww < 0 || ww >= W) continue;
                                        acc += xrow[ww] * wrow[j];
                                    }
                                    orow[wo] += acc;
                                }
                            }
                    }
                }
            break;
        }
        case Op::add: {
            const Node& a = at(n.in[0]);
            const Node& b = at(n.in[1]);
            n.shape = a.shape;
            n.val = a.val;
            if (a.shape == b.shape) {
                for (size_t i = 0; i < n.val.size(); ++i) n.val[i] += b.val[i];
            } else if (b.shape.size() == 1) {
                ChanLayout cl = chan_layout(a.shape, "add");
                if (b.shape[0] != cl.c)
                    throw ShapeError(strcat("add: bias ", shape_str(b.shape),
                                            " does not broadcast over ", shape_str(a.shape)));
                for (int bi = 0; bi < cl.n; ++bi)
                    for (int c = 0; c < cl.c; ++c) {
                        double bv = b.val[c];
                        double* row = &n.val[(size_t(bi) * cl.c + c) * cl.hw];
                        for (int e = 0; e < cl.hw; ++e) row[e] += bv;
                    }
            } else {
                throw ShapeError(strcat("add: incompatible shapes ", shape_str(a.shape), " + ",
                                        shape_str(b.shape)));
            }
            break;
        }
        case Op::multiply: {
            const Node& a = at(n.in[0]);
            const Node& b = at(n.in[1]);
            if (a.shape != b.shape)
                throw ShapeError(strcat("multiply: incompatible shapes ", shape_str(a.shape),
                                        " * ", shape_str(b.shape)));
            n.shape = a.shape;
            n.val = a.val;
            for (size_t i = 0; i < n.val.size(); ++i) n.val[i] *= b.val[i];
            break;
        }
        case Op::relu: {
            const Node& x = at(n.in[0]);
            n.shape = x.shape;
            n.val = x.val;
            for (auto& v : n.val) v = v > 0.0 ? v : 0.0;
            break;
        }
        case Op::max_pool2: {
            const Node& x = at(n.in[0]);
            if (x.shape.size() != 4 || x.shape[2] % 2 || x.shape[3] % 2)
                throw ShapeError(strcat("max_pool2: need [N,C,H,W] with even H,W, got ",
                                        shape_str(x.shape)));
            int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            int Ho = H / 2, Wo = W / 2;
            n.shape = {N, C, Ho, Wo};
            n.val.assign(size_t(N) * C * Ho * Wo, 0.0);
            n.argmax.assign(n.val.size(), 0);
            size_t oi = 0;
            for (int b = 0; b < N; ++b)
                for (int c = 0; c < C; ++c) {
                    const double* plane = &x.val[((size_t(b) * C + c) * H) * W];
                    size_t pbase = ((size_t(b) * C + c) * H) * W;
                    for (int ho = 0; ho < Ho; ++ho)
                        for (int wo = 0; wo < Wo; ++wo, ++oi) {
                            int h0 = 2 * ho, w0 = 2 * wo;
                            double best = plane[size_t(h0) * W + w0];
                            int64_t bi = pbase + size_t(h0) * W + w0;
                            for (int dh = 0; dh < 2; ++dh)
                                for (int dw = 0; dw < 2; ++dw) {
                                    int64_t idx = pbase + size_t(h0 + dh) * W + (w0 + dw);
                                    double v = x.val[idx];
                                    if (v > best) {
                                        best = v;
                                        bi = idx;
                                    }
                                }
                            n.val[oi] = best;
                            n.argmax[oi] = bi;
                        }
                }
            break;
        }
        case Op::global_avg_pool: {
            const Node& x = at(n.in[0]);
            if (x.shape.size() != 4)
                throw ShapeError(strcat("global_avg_pool: need [N,C,H,W], got ",
                                        shape_str(x.shape)));
            int N = x.shape[0], C = x.shape[1];
            int hw = x.shape[2] * x.shape[3];
            n.shape = {N, C};
            n.val.assign(size_t(N) * C, 0.0);
            for (size_t i = 0; i < n.val.size(); ++i) {
                const double* plane = &x.val[i * hw];
                double acc = 0.0;
                for (int e = 0; e < hw; ++e) acc += plane[e];
                n.val[i] = acc / hw;
            }
            break;
        }
        case Op::batch_norm: {
            const Node& x = at(n.in[0]);
            const Node& gm = at(n.in[1]);
            const Node& bt = at(n.in[2]);
            ChanLayout cl = chan_layout(x.shape, "batch_norm");
            if (int(gm.val.size()) != cl.c || int(bt.val.size()) != cl.c)
                throw ShapeError(strcat("batch_norm: gamma/beta size mismatch for ",
                                        shape_str(x.shape)));
            n.shape = x.shape;
            if (n.stats == BnStats::batch) {
                n.bn_mean.assign(cl.c, 0.0);
                n.bn_var.assign(cl.c, 0.0);
                int64_t m = int64_t(cl.n) * cl.hw;
                for (int b = 0; b < cl.n; ++b)
                    for (int c = 0; c < cl.c; ++c) {
                        const double* row = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                        for (int e = 0; e < cl.hw; ++e) n.bn_mean[c] += row[e];
                    }
                for (int c = 0; c < cl.c; ++c) n.bn_mean[c] /= double(m);
                for (int b = 0; b < cl.n; ++b)
                    for (int c = 0; c < cl.c; ++c) {
                        const double* row = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                        for (int e = 0; e < cl.hw; ++e) {
                            double d = row[e] - n.bn_mean[c];
                            n.bn_var[c] += d * d;
                        }
                    }
                for (int c = 0; c < cl.c; ++c) n.bn_var[c] /= double(m);
            } else if (int(n.bn_mean.size()) != cl.c || int(n.bn_var.size()) != cl.c) {
                throw ShapeError("batch_norm: running statistics size mismatch");
            }
            n.bn_invstd.assign(cl.c, 0.0);
            for (int c = 0; c < cl.c; ++c) n.bn_invstd[c] = 1.0 / std::sqrt(n.bn_var[c] + n.eps);
            n.val.assign(x.val.size(), 0.0);
            for (int b = 0; b < cl.n; ++b)
                for (int c = 0; c < cl.c; ++c) {
                    const double* row = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                    double* out = &n.val[(size_t(b) * cl.c + c) * cl.hw];
                    double mu = n.bn_mean[c], is = n.bn_invstd[c];
                    double g = gm.val[c], be = bt.val[c];
                    for (int e = 0; e < cl.hw; ++e) out[e] = g * (row[e] - mu) * is + be;
                }
            break;
        }
        case Op::flatten: {
            const Node& x = at(n.in[0]);
            if (x.shape.empty())
                throw ShapeError("flatten: scalar input");
            int rest = 1;
            for (size_t i = 1; i < x.shape.size(); ++i) rest *= x.shape[i];
            n.shape = {x.shape[0], rest};
            n.val = x.val;
            break;
        }
        case Op::gate: {
            const Node& x = at(n.in[0]);
            const Node& g = at(n.in[1]);
            ChanLayout cl = chan_layout(x.shape, "gate");
            if (g.shape.size() != 1 || g.shape[0] != cl.c)
                throw ShapeError(strcat("gate: gate vector ", shape_str(g.shape),
                                        " does not match ", shape_str(x.shape)));
            n.shape = x.shape;
            n.val = x.val;
            for (int b = 0; b < cl.n; ++b)
                for (int c = 0; c < cl.c; ++c) {
                    double gv = g.val[c];
                    double* row = &n.val[(size_t(b) * cl.c + c) * cl.hw];
                    for (int e = 0; e < cl.hw; ++e) row[e] *= gv;
                }
            break;
        }
        case Op::row_mask: {
            const Node& x = at(n.in[0]);
            ChanLayout cl = chan_layout(x.shape, "row_mask");
            if (int64_t(n.mask.size()) != int64_t(cl.n) * cl.c)
                throw ShapeError(strcat("row_mask: mask size ", n.mask.size(),
                                        " does not match ", shape_str(x.shape)));
            n.shape = x.shape;
            n.val = x.val;
            for (int b = 0; b < cl.n; ++b)
                for (int c = 0; c < cl.c; ++c) {
                    double mv = n.mask[size_t(b) * cl.c + c];
                    double* row = &n.val[(size_t(b) * cl.c + c) * cl.hw];
                    for (int e = 0; e < cl.hw; ++e) row[e] *= mv;
                }
            break;
        }
        case Op::softmax_cross_entropy: {
            const Node& x = at(n.in[0]);
            if (x.shape.size() != 2)
                throw ShapeError(strcat("softmax_cross_entropy: need [N,K] logits, got ",
                                        shape_str(x.shape)));
            int N = x.shape[0], K = x.shape[1];
            if (int(n.labels.size()) != N)
                throw ShapeError(strcat("softmax_cross_entropy: ", n.labels.size(),
                                        " labels for ", N, " rows"));
            n.probs = softmax_rows(x.val, N, K);
            double loss = 0.0;
            for (int i = 0; i < N; ++i) {
                int y = n.labels[i];
                if (y < 0 || y >= K)
                    throw Error(strcat("softmax_cross_entropy: label ", y, " out of range [0,",
                                       K, ")"));
                loss -= std::log(std::max(n.probs[size_t(i) * K + y], 1e-300));
            }
            if (n.red == Reduction::mean) loss /= N;
            n.shape = {};
            n.val = {loss};
            break;
        }
        case Op::scale: {
            const Node& x = at(n.in[0]);
            n.shape = x.shape;
            n.val = x.val;
            for (auto& v : n.val) v *= n.factor;
            break;
        }
    }
}

void Graph::adjoint(const Node& n, const std::vector<double>& gout,
                    std::vector<std::vector<double>>& gbuf) const {
    auto want = [&](int id) -> std::vector<double>* {
        const Node& in = nodes_[id];
        if (!in.needs_grad) return nullptr;
        if (gbuf[id].empty()) gbuf[id].assign(in.val.size(), 0.0);
        return &gbuf[id];
    };
    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            const Node& a = nodes_[n.in[0]];
            const Node& b = nodes_[n.in[1]];
            int m = a.shape[0], k = a.shape[1], p = b.shape[1];
            if (auto* ga = want(n.in[0])) {
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = &b.val[size_t(kk) * p];
                        const double* grow = &gout[size_t(i) * p];
                        double acc = 0.0;
                        for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
                        (*ga)[size_t(i) * k + kk] += acc;
                    }
            }
            if (auto* gb = want(n.in[1])) {
                for (int i = 0; i < m; ++i) {
                    const double* arow = &a.val[size_t(i) * k];
                    const double* grow = &gout[size_t(i) * p];
                    for (int kk = 0; kk < k; ++kk) {
                        double av = arow[kk];
                        if (av == 0.0) continue;
                        double* brow = &(*gb)[size_t(kk) * p];
                        for (int j = 0; j < p; ++j) brow[j] += av * grow[j];
                    }
                }
            }
            break;
        }
        case Op::conv2d: {
            const Node& x = nodes_[n.in[0]];
            const Node& w = nodes_[n.in[1]];
            int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
            int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
            int s = n.stride, p = n.pad;
            int Ho = n.shape[2], Wo = n.shape[3];
            auto* gx = want(n.in[0]);
            auto* gw = want(n.in[1]);
            for (int b = 0; b < N; ++b)
                for (int o = 0; o < O; ++o) {
                    const double* gplane = &gout[((size_t(b) * O + o) * Ho) * Wo];
                    for (int c = 0; c < C; ++c) {
                        const double* xplane = &x.val[((size_t(b) * C + c) * H) * W];
                        const double* wplane = &w.val[((size_t(o) * C + c) * kh) * kw];
                        double* gxplane = gx ? &(*gx)[((size_t(b) * C + c) * H) * W] : nullptr;
                        double* gwplane = gw ? &(*gw)[((size_t(o) * C + c) * kh) * kw] : nullptr;
                        for (int i = 0; i < kh; ++i)
                            for (int ho = 0; ho < Ho; ++ho) {
                                int h = ho * s - p + i;
                                if (h < 0 || h >= H) continue;
                                const double* grow = gplane + size_t(ho) * Wo;
                                const double* xrow = xplane + size_t(h) * W;
                                const double* wrow = wplane + size_t(i) * kw;
                                double* gxrow = gxplane ? gxplane + size_t(h) * W : nullptr;
                                double* gwrow = gwplane ? gwplane + size_t(i) * kw : nullptr;
                                for (int wo = 0; wo < Wo; ++wo) {
                                    double gv = grow[wo];
                                    if (gv == 0.0) continue;
                                    int base = wo * s - p;
                                    for (int j = 0; j < kw; ++j) {
                                        int ww = base + j;
                                        if (ww < 0 || ww >= W) continue;
                                        if (gxrow) gxrow[ww] += gv * wrow[j];
                                        if (gwrow) gwrow[j] += gv * xrow[ww];
                                    }
                                }
                            }
                    }
                }
            break;
        }
        case Op::add: {
            const Node& a = nodes_[n.in[0]];
            const Node& b = nodes_[n.in[1]];
            if (auto* ga = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i];
            if (auto* gb = want(n.in[1])) {
                if (a.shape == b.shape) {
                    for (size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i];
                } else {
                    ChanLayout cl = chan_layout(a.shape, "add");
                    for (int bi = 0; bi < cl.n; ++bi)
                        for (int c = 0; c < cl.c; ++c) {
                            const double* row = &gout[(size_t(bi) * cl.c + c) * cl.hw];
                            double acc = 0.0;
                            for (int e = 0; e < cl.hw; ++e) acc += row[e];
                            (*gb)[c] += acc;
                        }
                }
            }
            break;
        }
        case Op::multiply: {
            const Node& a = nodes_[n.in[0]];
            const Node& b = nodes_[n.in[1]];
            if (auto* ga = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) (*ga)[i] += gout[i] * b.val[i];
            if (auto* gb = want(n.in[1]))
                for (size_t i = 0; i < gout.size(); ++i) (*gb)[i] += gout[i] * a.val[i];
            break;
        }
        case Op::relu: {
            const Node& x = nodes_[n.in[0]];
            if (auto* gx = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i)
                    if (x.val[i] > 0.0) (*gx)[i] += gout[i];
            break;
        }
        case Op::max_pool2: {
            if (auto* gx = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) (*gx)[size_t(n.argmax[i])] += gout[i];
            break;
        }
        case Op::global_avg_pool: {
            const Node& x = nodes_[n.in[0]];
            int hw = x.shape[2] * x.shape[3];
            if (auto* gx = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) {
                    double gv = gout[i] / hw;
                    double* plane = &(*gx)[i * size_t(hw)];
                    for (int e = 0; e < hw; ++e) plane[e] += gv;
                }
            break;
        }
        case Op::batch_norm: {
            const Node& x = nodes_[n.in[0]];
            const Node& gm = nodes_[n.in[1]];
            ChanLayout cl = chan_layout(x.shape, "batch_norm");
            auto* gx = want(n.in[0]);
            auto* gg = want(n.in[1]);
            auto* gb = want(n.in[2]);
            int64_t m = int64_t(cl.n) * cl.hw;
            std::vector<double> sum_dy(cl.c, 0.0), sum_dy_xhat(cl.c, 0.0);
            for (int b = 0; b < cl.n; ++b)
                for (int c = 0; c < cl.c; ++c) {
                    const double* grow = &gout[(size_t(b) * cl.c + c) * cl.hw];
                    const double* xrow = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                    double mu = n.bn_mean[c], is = n.bn_invstd[c];
                    for (int e = 0; e < cl.hw; ++e) {
                        sum_dy[c] += grow[e];
                        sum_dy_xhat[c] += grow[e] * (xrow[e] - mu) * is;
                    }
                }
            if (gg)
                for (int c = 0; c < cl.c; ++c) (*gg)[c] += sum_dy_xhat[c];
            if (gb)
                for (int c = 0; c < cl.c; ++c) (*gb)[c] += sum_dy[c];
            if (gx) {
                for (int b = 0; b < cl.n; ++b)
                    for (int c = 0; c < cl.c; ++c) {
                        const double* grow = &gout[(size_t(b) * cl.c + c) * cl.hw];
                        const double* xrow = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                        double* gxrow = &(*gx)[(size_t(b) * cl.c + c) * cl.hw];
                        double mu = n.bn_mean[c], is = n.bn_invstd[c];
                        double g = gm.val[c];
                        if (n.stats == BnStats::batch) {
                            for (int e = 0; e < cl.hw; ++e) {
                                double xhat = (xrow[e] - mu) * is;
                                gxrow[e] += g * is / double(m) *
                                            (double(m) * grow[e] - sum_dy[c] -
                                             xhat * sum_dy_xhat[c]);
                            }
                        } else {
                            for (int e = 0; e < cl.hw; ++e) gxrow[e] += g * is * grow[e];
                        }
                    }
            }
            break;
        }
        case Op::flatten: {
            if (auto* gx = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) (*gx)[i] += gout[i];
            break;
        }
        case Op::gate: {
            const Node& x = nodes_[n.in[0]];
            const Node& g = nodes_[n.in[1]];
            ChanLayout cl = chan_layout(x.shape, "gate");
            auto* gx = want(n.in[0]);
            auto* gg = want(n.in[1]);
            for (int b = 0; b < cl.n; ++b)
                for (int c = 0; c < cl.c; ++c) {
                    const double* grow = &gout[(size_t(b) * cl.c + c) * cl.hw];
                    const double* xrow = &x.val[(size_t(b) * cl.c + c) * cl.hw];
                    if (gx) {
                        double gv = g.val[c];
                        double* gxrow = &(*gx)[(size_t(b) * cl.c + c) * cl.hw];
                        for (int e = 0; e < cl.hw; ++e) gxrow[e] += grow[e] * gv;
                    }
                    if (gg) {
                        double acc = 0.0;
                        for (int e = 0; e < cl.hw; ++e) acc += grow[e] * xrow[e];
                        (*gg)[c] += acc;
                    }
                }
            break;
        }
        case Op::row_mask: {
            const Node& x = nodes_[n.in[0]];
            ChanLayout cl = chan_layout(x.shape, "row_mask");
            if (auto* gx = want(n.in[0]))
                for (int b = 0; b < cl.n; ++b)
                    for (int c = 0; c < cl.c; ++c) {
                        double mv = n.mask[size_t(b) * cl.c + c];
                        const double* grow = &gout[(size_t(b) * cl.c + c) * cl.hw];
                        double* gxrow = &(*gx)[(size_t(b) * cl.c + c) * cl.hw];
                        for (int e = 0; e < cl.hw; ++e) gxrow[e] += grow[e] * mv;
                    }
            break;
        }
        case Op::softmax_cross_entropy: {
            const Node& x = nodes_[n.in[0]];
            int N = x.shape[0], K = x.shape[1];
            double g = gout[0];
            if (n.red == Reduction::mean) g /= N;
            if (auto* gx = want(n.in[0]))
                for (int i = 0; i < N; ++i) {
                    const double* prow = &n.probs[size_t(i) * K];
                    double* gxrow = &(*gx)[size_t(i) * K];
                    int y = n.labels[i];
                    for (int k = 0; k < K; ++k)
                        gxrow[k] += g * (prow[k] - (k == y ? 1.0 : 0.0));
                }
            break;
        }
        case Op::scale: {
            if (auto* gx = want(n.in[0]))
                for (size_t i = 0; i < gout.size(); ++i) (*gx)[i] += n.factor * gout[i];
            break;
        }
    }
}

std::map<std::string, Tensor> Graph::backward(int loss) {
    const Node& ln = at(loss);
    if (ln.val.size() != 1)
        throw Error(strcat("backward: loss node has ", ln.val.size(), " elements, need scalar"));
    std::vector<std::vector<double>> gbuf(nodes_.size());
    gbuf[loss].assign(1, 1.0);
    for (int id = loss; id >= 0; --id) {
        const Node& n = nodes_[id];
        if (!n.needs_grad || gbuf[id].empty()) continue;
        adjoint(n, gbuf[id], gbuf);
    }
    std::map<std::string, Tensor> out;
    for (size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op != Op::leaf || !n.needs_grad) continue;
        if (gbuf[id].empty()) gbuf[id].assign(n.val.size(), 0.0);
        canonicalize(gbuf[id], dtype_, "backward");
        out[n.name] = Tensor::from(n.shape, std::move(gbuf[id]), dtype_);
    }
    return out;
}

void Graph::reevaluate(const std::map<std::string, const Tensor*>& bindings) {
    for (auto& n : nodes_) {
        if (n.op == Op::leaf) {
            auto it = bindings.find(n.name);
            if (it != bindings.end()) {
                if (it->second->shape != n.shape)
                    throw ShapeError(strcat("reevaluate: leaf '", n.name, "' shape changed"));
                n.val = it->second->data;
                canonicalize(n.val, dtype_, "leaf");
            }
            continue;
        }
        compute(n);
        canonicalize(n.val, dtype_, "reevaluate");
    }
}

Tensor finite_diff_gradient(Graph& g, int loss, const std::string& leaf_name, double step) {
    if (g.dtype() != Dtype::f64)
        throw Error("finite_diff_gradient: f64 graphs only");
    if (step <= 0.0)
        throw Error("finite_diff_gradient: step must be positive");
    if (g.value(loss).size() != 1)
        throw Error("finite_diff_gradient: loss node must be scalar");
    int leaf_id = g.find_leaf(leaf_name);
    if (leaf_id < 0)
        throw Error(strcat("finite_diff_gradient: no leaf named '", leaf_name, "'"));
    Tensor base = g.value_tensor(leaf_id);
    Tensor grad = Tensor::zeros(base.shape, Dtype::f64);
    Tensor probe = base;
    std::map<std::string, const Tensor*> bind{{leaf_name, &probe}};
    for (size_t i = 0; i < base.data.size(); ++i) {
        probe.data[i] = base.data[i] + step;
        g.reevaluate(bind);
        double fp = g.value(loss)[0];
        probe.data[i] = base.data[i] - step;
        g.reevaluate(bind);
        double fm = g.value(loss)[0];
        probe.data[i] = base.data[i];
        grad.data[i] = (fp - fm) / (2.0 * step);
    }
    g.reevaluate(bind);
    return grad;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw Error(strcat("cosine_similarity: length mismatch ", a.size(), " vs ", b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw Error("cosine_similarity: undefined for zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> softmax_rows(const std::vector<double>& logits, int n, int k) {
    std::vector<double> out(logits.size());
    for (int i = 0; i < n; ++i) {
        const double* row = &logits[size_t(i) * k];
        double* orow = &out[size_t(i) * k];
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < k; ++j) orow[j] /= z;
    }
    return out;
}

}  // namespace memloc
