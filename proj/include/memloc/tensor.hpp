#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memloc/common.hpp"
#include "memloc/rng.hpp"

namespace memloc {

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }
Dtype dtype_from_name(const std::string& s);

// Values are held as double regardless of dtype; f32 tensors round every
// stored value through float so that checkpoints serialize bitwise.
struct Tensor {
    std::vector<int> shape;
    Dtype dtype = Dtype::f64;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty or same length as data

    Tensor() = default;

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }

    static Tensor zeros(std::vector<int> shape, Dtype dt = Dtype::f64);
    static Tensor full(std::vector<int> shape, double v, Dtype dt = Dtype::f64);
    static Tensor from(std::vector<int> shape, std::vector<double> values, Dtype dt = Dtype::f64);
    static Tensor randn(std::vector<int> shape, double stddev, Rng& rng, Dtype dt = Dtype::f64);

    void alloc_grad() { grad.assign(data.size(), 0.0); }
    void round_to_dtype();

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

std::string shape_str(const std::vector<int>& s);

// Throws NumericFault naming `where` on any NaN/Inf; rounds through float
// when dt is f32.
void canonicalize(std::vector<double>& v, Dtype dt, const char* where);

}  // namespace memloc
