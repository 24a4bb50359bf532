#include "memloc/tensor.hpp"

#include <cmath>

namespace memloc {

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw ConfigError(strcat("unknown dtype '", s, "' (expected f32 or f64)"));
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

static int64_t check_shape(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError(strcat("non-positive extent in shape ", shape_str(shape)));
        n *= e;
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, Dtype dt) {
    Tensor t;
    int64_t n = check_shape(shape);
    t.shape = std::move(shape);
    t.dtype = dt;
    t.data.assign(size_t(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double v, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    for (auto& x : t.data) x = v;
    t.round_to_dtype();
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, Dtype dt) {
    int64_t n = check_shape(shape);
    if (int64_t(values.size()) != n)
        throw ShapeError(strcat("data length ", values.size(), " does not match shape ",
                                shape_str(shape)));
    Tensor t;
    t.shape = std::move(shape);
    t.dtype = dt;
    t.data = std::move(values);
    t.round_to_dtype();
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, Rng& rng, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    for (auto& x : t.data) x = stddev * rng.normal();
    t.round_to_dtype();
    return t;
}

void Tensor::round_to_dtype() {
    if (dtype == Dtype::f32)
        for (auto& x : data) x = double(float(x));
}

void canonicalize(std::vector<double>& v, Dtype dt, const char* where) {
    if (dt == Dtype::f32) {
        for (auto& x : v) {
            x = double(float(x));
            if (!std::isfinite(x))
                throw NumericFault(strcat("non-finite value produced by ", where));
        }
    } else {
        for (auto& x : v)
            if (!std::isfinite(x))
                throw NumericFault(strcat("non-finite value produced by ", where));
    }
}

}  // namespace memloc
