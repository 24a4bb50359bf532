#include <doctest.h>

#include <cmath>

#include "memloc/graph.hpp"
#include "memloc/optim.hpp"
#include "memloc/rng.hpp"

using namespace memloc;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false) {
    Tensor t = Tensor::randn(std::move(shape), 1.0, rng);
    t.requires_grad = requires_grad;
    return t;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    REQUIRE(a.data.size() == b.data.size());
    double worst = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), 1e-6});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

// scalar loss over a small MLP: sce(relu(x W1 + b1) W2 + b2)
struct ToyMlp {
    Graph g;
    int loss;
    ToyMlp(Rng& rng, int n, int in, int hid, int k, Reduction red = Reduction::mean)
        : g(Dtype::f64) {
        int x = g.leaf("x", rand_tensor({n, in}, rng));
        int w1 = g.leaf("w1", rand_tensor({in, hid}, rng, true));
        int b1 = g.leaf("b1", rand_tensor({hid}, rng, true));
        int w2 = g.leaf("w2", rand_tensor({hid, k}, rng, true));
        int b2 = g.leaf("b2", rand_tensor({k}, rng, true));
        int h = g.relu(g.add(g.matmul(x, w1), b1));
        int logits = g.add(g.matmul(h, w2), b2);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = int(rng.below(k));
        loss = g.softmax_cross_entropy(logits, labels, red);
    }
};

}  // namespace

TEST_CASE("relu definition") {
    Graph g;
    Tensor x = Tensor::from({3}, {-1.0, 0.0, 2.0});
    int r = g.relu(g.leaf("x", x));
    CHECK(g.value(r) == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("softmax cross entropy of uniform logits is ln(K)") {
    Graph g;
    int logits = g.leaf("z", Tensor::zeros({1, 10}));
    int l = g.softmax_cross_entropy(logits, {7}, Reduction::mean);
    CHECK(g.value(l)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("conv2d all-ones 3x3 valid") {
    Graph g;
    int x = g.leaf("x", Tensor::full({1, 1, 3, 3}, 1.0));
    int w = g.leaf("w", Tensor::full({1, 1, 3, 3}, 1.0));
    int y = g.conv2d(x, w, 1, 0);
    CHECK(g.shape(y) == std::vector<int>{1, 1, 1, 1});
    CHECK(g.value(y)[0] == doctest::Approx(9.0));
}

TEST_CASE("backward of x^2 at 3") {
    Graph g;
    Tensor x = Tensor::from({1, 1}, {3.0});
    x.requires_grad = true;
    int xn = g.leaf("x", x);
    int y = g.multiply(xn, xn);  // single-element node, valid loss
    auto grads = g.backward(y);
    CHECK(grads.at("x").data[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("finite difference oracle on x^2") {
    Graph g;
    Tensor x = Tensor::from({1, 1}, {3.0});
    x.requires_grad = true;
    int xn = g.leaf("x", x);
    int y = g.multiply(xn, xn);
    Tensor fd = finite_diff_gradient(g, y, "x", 1e-5);
    CHECK(fd.data[0] == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("finite difference rejects f32") {
    Graph g(Dtype::f32);
    Tensor x = Tensor::from({1, 1}, {3.0}, Dtype::f32);
    x.requires_grad = true;
    int y = g.multiply(g.leaf("x", x), g.leaf("x2", x));
    CHECK_THROWS_AS(finite_diff_gradient(g, y, "x", 1e-5), Error);
}

TEST_CASE("matmul bilinear form gradient matches analytic") {
    Rng rng(11);
    Graph g;
    Tensor a = rand_tensor({1, 6}, rng);
    Tensor m = rand_tensor({6, 6}, rng, true);
    Tensor b = rand_tensor({6, 1}, rng);
    int an = g.leaf("a", a);
    int mn = g.leaf("m", m);
    int bn = g.leaf("b", b);
    int y = g.matmul(g.matmul(an, mn), bn);  // scalar a M b
    auto grads = g.backward(y);
    // d(aMb)/dM = a^T b^T
    Tensor expect = Tensor::zeros({6, 6});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) expect.data[i * 6 + j] = a.data[i] * b.data[j];
    CHECK(max_rel_err(grads.at("m"), expect) < 1e-7);
    Tensor fd = finite_diff_gradient(g, y, "m", 1e-5);
    CHECK(max_rel_err(fd, expect) < 1e-7);
}

TEST_CASE("2-layer MLP gradients match finite differences") {
    Rng rng(5);
    ToyMlp t(rng, 4, 5, 7, 3);
    auto grads = t.g.backward(t.loss);
    for (const char* name : {"w1", "b1", "w2", "b2"}) {
        Tensor fd = finite_diff_gradient(t.g, t.loss, name, 1e-5);
        CHECK_MESSAGE(max_rel_err(grads.at(name), fd) < 1e-4, name);
    }
}

TEST_CASE("batch-norm gradients match finite differences (train and eval stats)") {
    Rng rng(21);
    for (bool train : {true, false}) {
        Graph g;
        int x = g.leaf("x", rand_tensor({6, 4}, rng, true));
        int gm = g.leaf("gamma", rand_tensor({4}, rng, true));
        int bt = g.leaf("beta", rand_tensor({4}, rng, true));
        int y = train ? g.batch_norm(x, gm, bt, BnStats::batch)
                      : g.batch_norm(x, gm, bt, BnStats::given,
                                     {0.1, -0.2, 0.3, 0.0}, {1.0, 0.5, 2.0, 1.5});
        std::vector<int> labels = {0, 1, 2, 3, 0, 1};
        int l = g.softmax_cross_entropy(y, labels, Reduction::sum);
        auto grads = g.backward(l);
        for (const char* name : {"x", "gamma", "beta"}) {
            Tensor fd = finite_diff_gradient(g, l, name, 1e-5);
            CHECK_MESSAGE(max_rel_err(grads.at(name), fd) < 1e-4,
                          name << (train ? " train" : " eval"));
        }
    }
}

TEST_CASE("conv + pool + gap pipeline gradients match finite differences") {
    Rng rng(31);
    Graph g;
    int x = g.leaf("x", rand_tensor({2, 2, 6, 6}, rng));
    int w = g.leaf("w", rand_tensor({3, 2, 3, 3}, rng, true));
    int b = g.leaf("b", rand_tensor({3}, rng, true));
    int gt = g.leaf("gt", rand_tensor({3}, rng, true));
    int y = g.gate(g.relu(g.add(g.conv2d(x, w, 1, 1), b)), gt);
    int p = g.global_avg_pool(g.max_pool2(y));
    int l = g.softmax_cross_entropy(p, {0, 2}, Reduction::mean);
    auto grads = g.backward(l);
    for (const char* name : {"w", "b", "gt"}) {
        Tensor fd = finite_diff_gradient(g, l, name, 1e-5);
        CHECK_MESSAGE(max_rel_err(grads.at(name), fd) < 1e-4, name);
    }
}

TEST_CASE("sum-loss gradient is additive over batches") {
    Rng rng(7);
    // same params, two disjoint batches vs their union
    Tensor w = rand_tensor({5, 3}, rng, true);
    Tensor xa = rand_tensor({3, 5}, rng);
    Tensor xb = rand_tensor({2, 5}, rng);
    Tensor xu = Tensor::zeros({5, 5});
    for (int i = 0; i < 15; ++i) xu.data[i] = xa.data[i];
    for (int i = 0; i < 10; ++i) xu.data[15 + i] = xb.data[i];
    std::vector<int> la = {0, 1, 2}, lb = {2, 0}, lu = {0, 1, 2, 2, 0};
    auto grad_of = [&](const Tensor& x, const std::vector<int>& labels) {
        Graph g;
        int l = g.softmax_cross_entropy(g.matmul(g.leaf("x", x), g.leaf("w", w)),
                                        labels, Reduction::sum);
        return g.backward(l).at("w");
    };
    Tensor ga = grad_of(xa, la), gb = grad_of(xb, lb), gu = grad_of(xu, lu);
    for (size_t i = 0; i < gu.data.size(); ++i)
        CHECK(std::abs(gu.data[i] - (ga.data[i] + gb.data[i])) < 1e-8);
}

TEST_CASE("shape errors name the primitive") {
    Graph g;
    int a = g.leaf("a", Tensor::zeros({2, 3}));
    int b = g.leaf("b", Tensor::zeros({4, 2}));
    CHECK_THROWS_WITH_AS(g.matmul(a, b),
                         doctest::Contains("matmul"), ShapeError);
    CHECK_THROWS_AS(g.multiply(a, b), ShapeError);
}

TEST_CASE("non-finite values raise a numeric fault") {
    Graph g;
    int a = g.leaf("a", Tensor::full({1, 2}, 1e308));
    CHECK_THROWS_AS(g.add(a, a), NumericFault);
}

TEST_CASE("cosine similarity") {
    std::vector<double> v = {1.0, -2.0, 3.0};
    std::vector<double> nv = {-1.0, 2.0, -3.0};
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_similarity(v, nv) == doctest::Approx(-1.0).epsilon(1e-12));
    Rng rng(3);
    std::vector<double> a(1000), b(1000);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < 1000; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    CHECK(cosine_similarity(a, b) ==
          doctest::Approx(dot / std::sqrt(na * nb)).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_similarity({0.0, 0.0}, {1.0, 1.0}), Error);
}

TEST_CASE("one-cycle schedule") {
    OneCycleSchedule s;
    CHECK(s.lr(10) == doctest::Approx(0.1));
    CHECK(s.lr(0) == doctest::Approx(0.004));
    CHECK(s.lr(5) == doctest::Approx(0.052));
    CHECK_THROWS_AS(s.lr(50), ConfigError);
    CHECK_THROWS_AS(s.lr(-1), ConfigError);
    // continuous piecewise-linear, maximized exactly at the peak
    double prev = s.lr(0);
    for (int e = 1; e < 50; ++e) {
        double cur = s.lr(e);
        CHECK(cur > 0.0);
        if (e <= 10) CHECK(cur > prev);
        else CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("sgd step") {
    std::map<std::string, Tensor> p{{"w", Tensor::from({1}, {1.0})}};
    std::map<std::string, Tensor> g{{"w", Tensor::from({1}, {2.0})}};
    SgdState sgd(0.0, 0.0);
    sgd.step(p, g, 0.1);
    CHECK(p.at("w").data[0] == doctest::Approx(0.8).epsilon(1e-15));

    // lr = 0 leaves parameters bitwise unchanged
    std::map<std::string, Tensor> p2{{"w", Tensor::from({1}, {0.123456789})}};
    double before = p2.at("w").data[0];
    SgdState sgd2(0.9, 5e-4);
    sgd2.step(p2, g, 0.0);
    CHECK(p2.at("w").data[0] == before);

    // momentum recurrence over two steps:
    // v1 = g, w1 = w0 - lr g ; v2 = mu g + g, w2 = w1 - lr v2
    std::map<std::string, Tensor> p3{{"w", Tensor::from({1}, {1.0})}};
    SgdState sgd3(0.9, 0.0);
    sgd3.step(p3, g, 0.1);
    sgd3.step(p3, g, 0.1);
    double expect = 1.0 - 0.1 * 2.0 - 0.1 * (0.9 * 2.0 + 2.0);
    CHECK(p3.at("w").data[0] == doctest::Approx(expect).epsilon(1e-15));

    std::map<std::string, Tensor> bad{{"w", Tensor::from({2}, {1.0, 1.0})}};
    CHECK_THROWS_AS(sgd.step(bad, g, 0.1), ShapeError);
}

TEST_CASE("forward determinism") {
    auto run = [] {
        Rng rng(123);
        ToyMlp t(rng, 8, 6, 9, 4);
        auto grads = t.g.backward(t.loss);
        return std::pair{t.g.value(t.loss)[0], grads.at("w1").data};
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}
