#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "memloc/graph.hpp"
#include "memloc/tensor.hpp"

namespace memloc {

enum class LayerKind { dense, conv, norm, relu, pool, gap, flatten };

const char* layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& s);

struct LayerDesc {
    LayerKind kind;
    int out = 0;  // dense out width / conv out channels
    int kernel = 3, stride = 1, pad = 1;
    std::string group;  // empty = the layer is its own group
};

struct ModelSpec {
    std::vector<int> input_shape;  // {F} or {C,H,W}
    std::vector<LayerDesc> layers;
    int class_count = 10;
    uint64_t init_seed = 0;
    Dtype dtype = Dtype::f32;

    std::string serialize() const;  // canonical form, digest input
    uint64_t digest() const { return fnv1a64(serialize()); }
};

// Resolved per-layer shape info; layer index == descriptor index.
struct LayerInfo {
    LayerKind kind;
    std::vector<int> in_shape, out_shape;  // without the batch dimension
    int units = 0;        // dense out / conv out channels, else 0
    int unit_offset = -1; // offset into the flat unit enumeration
    bool auto_flatten = false;  // 4-d input flattened before this dense layer
};

struct UnitId {
    int layer;
    int unit;
    auto operator<=>(const UnitId&) const = default;
};

struct Model {
    ModelSpec spec;
    std::vector<LayerInfo> info;
    std::map<std::string, Tensor> params;   // stable catalog order
    std::map<std::string, Tensor> buffers;  // norm running statistics
    std::vector<uint8_t> frozen;            // per layer
    std::map<std::string, std::vector<uint8_t>> sparse_keep;  // empty = dense

    Dtype dtype() const { return spec.dtype; }
    int total_units() const;
    int64_t param_count() const;
    std::vector<std::string> layer_param_names(int layer) const;
    std::string layer_label(int layer) const;
    int last_dense_layer() const;
    std::vector<int> unit_layers() const;  // layers with units, in order
};

std::vector<LayerInfo> resolve_layers(const ModelSpec& spec);
Model build_model(const ModelSpec& spec, uint64_t seed);

std::vector<UnitId> list_units(const Model& m);

struct GateSet {
    std::vector<double> g;  // aligned with list_units order, values in [0,1]
};

GateSet all_ones_gates(const Model& m);
GateSet zero_unit(GateSet gates, const Model& m, UnitId id);
int active_unit_count(const GateSet& g);

// -- example-tied dropout --------------------------------------------------

struct ExampleTiedSpec {
    double p_gen = 0.4;
    double p_mem = 0.1;
    uint64_t seed = 0;
    int example_count = 0;
};

// fixed generalization set: floor(p_gen * U) units, identical every pass
std::vector<uint8_t> etd_gen_mask(const ExampleTiedSpec& s, int layer, int units);
// gen set plus floor(p_mem * U) units hashed from (seed, layer, example id)
std::vector<uint8_t> etd_row_mask(const ExampleTiedSpec& s, int layer, int units,
                                  int example_id);

// -- static sparse masking -------------------------------------------------

// keep-fraction mask over dense/conv weight tensors; exact count per tensor
std::map<std::string, std::vector<uint8_t>> make_sparse_mask(const Model& m, double s,
                                                             uint64_t seed);
void apply_sparse_mask(Model& m, std::map<std::string, std::vector<uint8_t>> mask);
void mask_tensor_map(const std::map<std::string, std::vector<uint8_t>>& mask,
                     std::map<std::string, Tensor>& tensors);

// -- forward ---------------------------------------------------------------

enum class Mode { train, eval };

struct DropoutConfig {
    enum class Kind { none, standard, example_tied };
    Kind kind = Kind::none;
    double p = 0.0;  // standard dropout drop probability
    ExampleTiedSpec etd;
    bool drop_mem = false;  // eval-time removal of the whole mem pool
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    const GateSet* gates = nullptr;
    DropoutConfig dropout;
    const std::vector<int>* example_ids = nullptr;
    uint64_t dropout_seed = 0;  // standard dropout draw, vary per batch
    bool update_bn = false;     // train-mode running statistics update
    bool bn_update_while_frozen = false;
};

struct ForwardResult {
    Graph graph;
    int logits = -1;
    std::vector<int> gate_leaves;  // node id of "gate.L<i>" per unit layer, or -1
};

ForwardResult forward(Model& m, const Tensor& x, const ForwardOptions& opt);

// convenience: eval-mode logits as a tensor
Tensor predict_logits(Model& m, const Tensor& x, const ForwardOptions& opt);

void reinit_layer(Model& m, int layer, const std::map<std::string, Tensor>& source);

}  // namespace memloc
