#include "memloc/model.hpp"

#include <algorithm>
#include <cmath>

#include "memloc/rng.hpp"

namespace memloc {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv: return "conv";
        case LayerKind::norm: return "norm";
        case LayerKind::relu: return "relu";
        case LayerKind::pool: return "pool";
        case LayerKind::gap: return "gap";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

LayerKind layer_kind_from_name(const std::string& s) {
    for (LayerKind k : {LayerKind::dense, LayerKind::conv, LayerKind::norm, LayerKind::relu,
                        LayerKind::pool, LayerKind::gap, LayerKind::flatten})
        if (s == layer_kind_name(k)) return k;
    throw ConfigError(strcat("unknown layer kind '", s, "'"));
}

std::string ModelSpec::serialize() const {
    std::string s = strcat("memloc-spec-v1;input=", shape_str(input_shape),
                           ";classes=", class_count, ";seed=", init_seed,
                           ";dtype=", dtype_name(dtype));
    for (size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& l = layers[i];
        s += strcat(";L", i, "=", layer_kind_name(l.kind));
        if (l.kind == LayerKind::dense) s += strcat("(o=", l.out, ")");
        if (l.kind == LayerKind::conv)
            s += strcat("(o=", l.out, ",k=", l.kernel, ",s=", l.stride, ",p=", l.pad, ")");
        if (!l.group.empty()) s += strcat("[g=", l.group, "]");
    }
    return s;
}

std::vector<LayerInfo> resolve_layers(const ModelSpec& spec) {
    if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3)
        throw ConfigError(strcat("model spec: input shape must be {F} or {C,H,W}, got ",
                                 shape_str(spec.input_shape)));
    if (spec.layers.empty()) throw ConfigError("model spec: no layers");
    std::vector<LayerInfo> out;
    std::vector<int> cur = spec.input_shape;
    int unit_offset = 0;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        LayerInfo li;
        li.kind = l.kind;
        li.in_shape = cur;
        switch (l.kind) {
            case LayerKind::dense: {
                if (cur.size() == 3) {
                    li.auto_flatten = true;
                    cur = {cur[0] * cur[1] * cur[2]};
                    li.in_shape = cur;
                }
                if (l.out <= 0)
                    throw ConfigError(strcat("layer ", i, ": dense width must be positive"));
                cur = {l.out};
                li.units = l.out;
                li.unit_offset = unit_offset;
                unit_offset += l.out;
                break;
            }
            case LayerKind::conv: {
                if (cur.size() != 3)
                    throw ConfigError(strcat("layer ", i, ": conv on non-image shape ",
                                             shape_str(cur)));
                int H = cur[1], W = cur[2];
                int Ho = (H + 2 * l.pad - l.kernel) / l.stride + 1;
                int Wo = (W + 2 * l.pad - l.kernel) / l.stride + 1;
                if (l.out <= 0 || Ho <= 0 || Wo <= 0)
                    throw ConfigError(strcat("layer ", i, ": conv does not fit input ",
                                             shape_str(cur)));
                cur = {l.out, Ho, Wo};
                li.units = l.out;
                li.unit_offset = unit_offset;
                unit_offset += l.out;
                break;
            }
            case LayerKind::norm:
                break;  // shape preserved
            case LayerKind::relu:
                break;
            case LayerKind::pool: {
                if (cur.size() != 3 || cur[1] % 2 || cur[2] % 2)
                    throw ConfigError(strcat("layer ", i, ": pool needs even image dims, got ",
                                             shape_str(cur)));
                cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            }
            case LayerKind::gap: {
                if (cur.size() != 3)
                    throw ConfigError(strcat("layer ", i, ": gap on non-image shape ",
                                             shape_str(cur)));
                cur = {cur[0]};
                break;
            }
            case LayerKind::flatten: {
                int n = 1;
                for (int e : cur) n *= e;
                cur = {n};
                break;
            }
        }
        li.out_shape = cur;
        out.push_back(std::move(li));
    }
    const LayerDesc& last = spec.layers.back();
    if (last.kind != LayerKind::dense || last.out != spec.class_count)
        throw ConfigError(strcat("model spec: final layer must be dense with width ",
                                 spec.class_count, " (the single output head)"));
    return out;
}

int Model::total_units() const {
    int n = 0;
    for (const auto& li : info) n += li.units;
    return n;
}

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const auto& [k, t] : params) n += t.numel();
    return n;
}

std::vector<std::string> Model::layer_param_names(int layer) const {
    std::string prefix = strcat("L", layer, ".");
    std::vector<std::string> out;
    for (const auto& [k, t] : params)
        if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
}

std::string Model::layer_label(int layer) const {
    return strcat("L", layer, ".", layer_kind_name(info[layer].kind));
}

int Model::last_dense_layer() const {
    for (int i = int(info.size()) - 1; i >= 0; --i)
        if (info[i].kind == LayerKind::dense) return i;
    return -1;
}

std::vector<int> Model::unit_layers() const {
    std::vector<int> out;
    for (int i = 0; i < int(info.size()); ++i)
        if (info[i].units > 0) out.push_back(i);
    return out;
}

Model build_model(const ModelSpec& spec_in, uint64_t seed) {
    ModelSpec spec = spec_in;
    spec.init_seed = seed;
    Model m;
    m.info = resolve_layers(spec);
    m.spec = spec;
    m.frozen.assign(spec.layers.size(), 0);
    Dtype dt = spec.dtype;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& l = spec.layers[i];
        const LayerInfo& li = m.info[i];
        Rng rng(hash_seed(seed, 0x1717, i));
        std::string p = strcat("L", i, ".");
        if (l.kind == LayerKind::dense) {
            int fan_in = li.in_shape[0];
            m.params[p + "weight"] =
                Tensor::randn({fan_in, l.out}, std::sqrt(2.0 / fan_in), rng, dt);
            m.params[p + "bias"] = Tensor::zeros({l.out}, dt);
        } else if (l.kind == LayerKind::conv) {
            int c = li.in_shape[0];
            int fan_in = c * l.kernel * l.kernel;
            m.params[p + "weight"] =
                Tensor::randn({l.out, c, l.kernel, l.kernel}, std::sqrt(2.0 / fan_in), rng, dt);
            m.params[p + "bias"] = Tensor::zeros({l.out}, dt);
        } else if (l.kind == LayerKind::norm) {
            int c = li.in_shape[0];
            m.params[p + "gamma"] = Tensor::full({c}, 1.0, dt);
            m.params[p + "beta"] = Tensor::zeros({c}, dt);
            m.buffers[p + "running_mean"] = Tensor::zeros({c}, dt);
            m.buffers[p + "running_var"] = Tensor::full({c}, 1.0, dt);
        }
    }
    return m;
}

std::vector<UnitId> list_units(const Model& m) {
    std::vector<UnitId> out;
    for (int i = 0; i < int(m.info.size()); ++i)
        for (int u = 0; u < m.info[i].units; ++u) out.push_back({i, u});
    return out;
}

GateSet all_ones_gates(const Model& m) {
    GateSet g;
    g.g.assign(m.total_units(), 1.0);
    return g;
}

GateSet zero_unit(GateSet gates, const Model& m, UnitId id) {
    if (id.layer < 0 || id.layer >= int(m.info.size()) || m.info[id.layer].units == 0 ||
        id.unit < 0 || id.unit >= m.info[id.layer].units)
        throw Error(strcat("zero_unit: invalid unit (", id.layer, ",", id.unit, ")"));
    if (int(gates.g.size()) != m.total_units())
        throw Error(strcat("zero_unit: gate set size ", gates.g.size(), " vs ",
                           m.total_units(), " units"));
    gates.g[m.info[id.layer].unit_offset + id.unit] = 0.0;
    return gates;
}

int active_unit_count(const GateSet& g) {
    int n = 0;
    for (double v : g.g)
        if (v != 0.0) ++n;
    return n;
}

std::vector<uint8_t> etd_gen_mask(const ExampleTiedSpec& s, int layer, int units) {
    int k = int(std::floor(s.p_gen * units));
    Rng rng(hash_seed(s.seed, 0x6e67, layer));
    std::vector<uint8_t> mask(units, 0);
    for (int u : rng.sample_without_replacement(units, k)) mask[u] = 1;
    return mask;
}

std::vector<uint8_t> etd_row_mask(const ExampleTiedSpec& s, int layer, int units,
                                  int example_id) {
    if (example_id < 0 || example_id >= s.example_count)
        throw Error(strcat("example-tied dropout: example id ", example_id,
                           " outside [0,", s.example_count, ")"));
    std::vector<uint8_t> mask = etd_gen_mask(s, layer, units);
    std::vector<int> pool;
    for (int u = 0; u < units; ++u)
        if (!mask[u]) pool.push_back(u);
    int k = int(std::floor(s.p_mem * units));
    Rng rng(hash_seed(s.seed, 0x6d65, layer, uint64_t(example_id)));
    for (int idx : rng.sample_without_replacement(int(pool.size()), k)) mask[pool[idx]] = 1;
    return mask;
}

std::map<std::string, std::vector<uint8_t>> make_sparse_mask(const Model& m, double s,
                                                             uint64_t seed) {
    if (s < 0.0 || s > 1.0) throw ConfigError("sparse mask: keep fraction outside [0,1]");
    std::map<std::string, std::vector<uint8_t>> mask;
    for (const auto& [name, t] : m.params) {
        if (name.find(".weight") == std::string::npos) continue;
        int64_t n = t.numel();
        int64_t keep = int64_t(std::llround(s * double(n)));
        std::vector<uint8_t> km(size_t(n), 0);
        Rng rng(hash_seed(seed, 0x7370, fnv1a64(name)));
        for (int idx : rng.sample_without_replacement(int(n), int(keep))) km[idx] = 1;
        mask[name] = std::move(km);
    }
    return mask;
}

void mask_tensor_map(const std::map<std::string, std::vector<uint8_t>>& mask,
                     std::map<std::string, Tensor>& tensors) {
    for (const auto& [name, km] : mask) {
        auto it = tensors.find(name);
        if (it == tensors.end()) continue;
        Tensor& t = it->second;
        if (t.data.size() != km.size())
            throw ShapeError(strcat("sparse mask: size mismatch on '", name, "'"));
        for (size_t i = 0; i < km.size(); ++i)
            if (!km[i]) t.data[i] = 0.0;
    }
}

void apply_sparse_mask(Model& m, std::map<std::string, std::vector<uint8_t>> mask) {
    for (const auto& [name, km] : mask) {
        auto it = m.params.find(name);
        if (it == m.params.end())
            throw Error(strcat("sparse mask: unknown parameter '", name, "'"));
        if (it->second.data.size() != km.size())
            throw ShapeError(strcat("sparse mask: size mismatch on '", name, "'"));
    }
    mask_tensor_map(mask, m.params);
    m.sparse_keep = std::move(mask);
}

namespace {

std::vector<double> standard_dropout_mask(int rows, int units, double p, uint64_t seed,
                                          int layer) {
    Rng rng(hash_seed(seed, 0x6472, layer));
    std::vector<double> mask(size_t(rows) * units, 0.0);
    double scale = 1.0 / (1.0 - p);
    for (auto& v : mask)
        if (rng.uniform() >= p) v = scale;
    return mask;
}

}  // namespace

ForwardResult forward(Model& m, const Tensor& x, const ForwardOptions& opt) {
    std::vector<int> expect = m.spec.input_shape;
    if (x.shape.size() != expect.size() + 1 ||
        !std::equal(expect.begin(), expect.end(), x.shape.begin() + 1))
        throw ShapeError(strcat("forward: input ", shape_str(x.shape),
                                " does not match spec input ", shape_str(expect)));
    int rows = x.shape[0];
    const bool train = opt.mode == Mode::train;
    const DropoutConfig& drop = opt.dropout;
    const bool etd_active = drop.kind == DropoutConfig::Kind::example_tied;
    if (etd_active && train && !opt.example_ids)
        throw Error("forward: example-tied dropout requires example ids in train mode");
    if (opt.example_ids && int(opt.example_ids->size()) != rows)
        throw Error(strcat("forward: ", opt.example_ids->size(), " example ids for ", rows,
                           " rows"));
    if (opt.gates && int(opt.gates->g.size()) != m.total_units())
        throw Error(strcat("forward: gate set size ", opt.gates->g.size(), " vs ",
                           m.total_units(), " units"));

    ForwardResult res{Graph(m.dtype()), -1, {}};
    Graph& g = res.graph;
    int cur = g.leaf("input", x);
    const int last_dense = m.last_dense_layer();
    int pending_unit_layer = -1;

    // frozen layers keep requires_grad off so backward skips them
    auto param_leaf = [&](int layer, const std::string& name) {
        Tensor t = m.params.at(name);
        t.requires_grad = !m.frozen[layer];
        return g.leaf(name, t);
    };

    auto flush_unit_layer = [&](int layer) {
        const LayerInfo& li = m.info[layer];
        if (opt.gates) {
            Tensor gt = Tensor::zeros({li.units}, m.dtype());
            for (int u = 0; u < li.units; ++u)
                gt.data[u] = opt.gates->g[li.unit_offset + u];
            gt.requires_grad = true;
            int gleaf = g.leaf(strcat("gate.L", layer), gt);
            res.gate_leaves.push_back(gleaf);
            cur = g.gate(cur, gleaf);
        } else {
            res.gate_leaves.push_back(-1);
        }
        if (layer == last_dense) return;  // no dropout after the output head
        if (drop.kind == DropoutConfig::Kind::standard && train && drop.p > 0.0) {
            cur = g.row_mask(cur, standard_dropout_mask(rows, li.units, drop.p,
                                                        opt.dropout_seed, layer));
        } else if (etd_active) {
            if (drop.drop_mem) {
                std::vector<uint8_t> gen = etd_gen_mask(drop.etd, layer, li.units);
                std::vector<double> mask(size_t(rows) * li.units, 0.0);
                for (int r = 0; r < rows; ++r)
                    for (int u = 0; u < li.units; ++u)
                        mask[size_t(r) * li.units + u] = gen[u] ? 1.0 : 0.0;
                cur = g.row_mask(cur, std::move(mask));
            } else if (opt.example_ids) {
                std::vector<double> mask(size_t(rows) * li.units, 0.0);
                for (int r = 0; r < rows; ++r) {
                    std::vector<uint8_t> rm =
                        etd_row_mask(drop.etd, layer, li.units, (*opt.example_ids)[r]);
                    for (int u = 0; u < li.units; ++u)
                        mask[size_t(r) * li.units + u] = rm[u] ? 1.0 : 0.0;
                }
                cur = g.row_mask(cur, std::move(mask));
            }
            // eval without ids and without drop_mem: full network
        }
    };

    for (int i = 0; i < int(m.info.size()); ++i) {
        const LayerInfo& li = m.info[i];
        std::string p = strcat("L", i, ".");
        switch (li.kind) {
            case LayerKind::dense: {
                if (li.auto_flatten) cur = g.flatten(cur);
                int w = param_leaf(i, p + "weight");
                int b = param_leaf(i, p + "bias");
                cur = g.add(g.matmul(cur, w), b);
                pending_unit_layer = i;
                break;
            }
            case LayerKind::conv: {
                const LayerDesc& l = m.spec.layers[i];
                int w = param_leaf(i, p + "weight");
                int b = param_leaf(i, p + "bias");
                cur = g.add(g.conv2d(cur, w, l.stride, l.pad), b);
                pending_unit_layer = i;
                break;
            }
            case LayerKind::norm: {
                int gm = param_leaf(i, p + "gamma");
                int bt = param_leaf(i, p + "beta");
                if (train) {
                    cur = g.batch_norm(cur, gm, bt, BnStats::batch);
                    bool allowed = !m.frozen[i] || opt.bn_update_while_frozen;
                    if (opt.update_bn && allowed) {
                        auto [mean, var] = g.bn_batch_stats(cur);
                        Tensor& rm = m.buffers.at(p + "running_mean");
                        Tensor& rv = m.buffers.at(p + "running_var");
                        for (size_t c = 0; c < mean.size(); ++c) {
                            rm.data[c] = 0.9 * rm.data[c] + 0.1 * mean[c];
                            rv.data[c] = 0.9 * rv.data[c] + 0.1 * var[c];
                        }
                        rm.round_to_dtype();
                        rv.round_to_dtype();
                    }
                } else {
                    cur = g.batch_norm(cur, gm, bt, BnStats::given,
                                       m.buffers.at(p + "running_mean").data,
                                       m.buffers.at(p + "running_var").data);
                }
                break;
            }
            case LayerKind::relu:
                cur = g.relu(cur);
                break;
            case LayerKind::pool:
                cur = g.max_pool2(cur);
                break;
            case LayerKind::gap:
                cur = g.global_avg_pool(cur);
                break;
            case LayerKind::flatten:
                cur = g.flatten(cur);
                break;
        }
        bool next_attached = i + 1 < int(m.info.size()) &&
                             (m.info[i + 1].kind == LayerKind::norm ||
                              m.info[i + 1].kind == LayerKind::relu);
        if (pending_unit_layer >= 0 && !next_attached) {
            flush_unit_layer(pending_unit_layer);
            pending_unit_layer = -1;
        }
    }
    res.logits = cur;
    return res;
}

Tensor predict_logits(Model& m, const Tensor& x, const ForwardOptions& opt) {
    ForwardResult r = forward(m, x, opt);
    return r.graph.value_tensor(r.logits);
}

void reinit_layer(Model& m, int layer, const std::map<std::string, Tensor>& source) {
    for (const std::string& name : m.layer_param_names(layer)) {
        auto it = source.find(name);
        if (it == source.end())
            throw Error(strcat("reinit_layer: source lacks '", name, "'"));
        if (it->second.shape != m.params.at(name).shape)
            throw ShapeError(strcat("reinit_layer: shape mismatch on '", name, "'"));
        m.params[name] = it->second;
    }
}

}  // namespace memloc
