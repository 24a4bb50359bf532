#include "memloc/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace memloc {

namespace {

void append_values(std::string& blob, const Tensor& t) {
    if (t.dtype == Dtype::f32) {
        for (double v : t.data) {
            float f = float(v);
            blob.append(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    } else {
        for (double v : t.data)
            blob.append(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}

Tensor read_values(const std::string& blob, size_t offset, const std::vector<int>& shape,
                   Dtype dt, const std::string& name) {
    Tensor t = Tensor::zeros(shape, dt);
    size_t width = dt == Dtype::f32 ? 4 : 8;
    if (offset + t.data.size() * width > blob.size())
        throw Error(strcat("checkpoint blob truncated reading '", name, "'"));
    const char* p = blob.data() + offset;
    for (auto& v : t.data) {
        if (dt == Dtype::f32) {
            float f;
            std::memcpy(&f, p, 4);
            v = double(f);
            p += 4;
        } else {
            std::memcpy(&v, p, 8);
            p += 8;
        }
    }
    return t;
}

void atomic_write(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(strcat("cannot write '", tmp.string(), "'"));
        out.write(content.data(), std::streamsize(content.size()));
        if (!out) throw Error(strcat("short write to '", tmp.string(), "'"));
    }
    fs::rename(tmp, path);
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

CheckpointStore::CheckpointStore(std::string dir, uint64_t spec_digest)
    : dir_(std::move(dir)), spec_digest_(spec_digest) {
    fs::create_directories(dir_);
}

CheckpointStore CheckpointStore::open(const std::string& dir) {
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.rfind("manifest_", 0) == 0 && name.ends_with(".json")) {
            std::ifstream in(e.path());
            json j = json::parse(in);
            return CheckpointStore(dir, std::stoull(j.at("spec_digest").get<std::string>(),
                                                    nullptr, 16));
        }
    }
    throw Error(strcat("no checkpoints found in '", dir, "'"));
}

std::string CheckpointStore::manifest_path(int epoch) const {
    return (fs::path(dir_) / strcat("manifest_", epoch, ".json")).string();
}

std::string CheckpointStore::blob_path(int epoch) const {
    return (fs::path(dir_) / strcat("weights_", epoch, ".bin")).string();
}

bool CheckpointStore::has(int epoch) const { return fs::exists(manifest_path(epoch)); }

std::vector<int> CheckpointStore::epochs() const {
    std::vector<int> out;
    for (const auto& e : fs::directory_iterator(dir_)) {
        std::string name = e.path().filename().string();
        if (name.rfind("manifest_", 0) == 0 && name.ends_with(".json"))
            out.push_back(std::stoi(name.substr(9)));
    }
    std::sort(out.begin(), out.end());
    return out;
}

int CheckpointStore::last_epoch() const {
    auto e = epochs();
    if (e.empty()) throw Error(strcat("no checkpoints in '", dir_, "'"));
    return e.back();
}

void CheckpointStore::save(const Model& m, int epoch) {
    if (has(epoch))
        throw Error(strcat("checkpoint for epoch ", epoch, " already exists in '", dir_, "'"));
    if (m.spec.digest() != spec_digest_)
        throw Error("checkpoint save: model spec digest does not match store");
    std::string blob;
    json catalog = json::array();
    auto emit = [&](const std::map<std::string, Tensor>& tensors, const char* kind) {
        for (const auto& [name, t] : tensors) {
            catalog.push_back({{"name", name},
                               {"kind", kind},
                               {"shape", t.shape},
                               {"dtype", dtype_name(t.dtype)},
                               {"offset", blob.size()},
                               {"count", t.data.size()}});
            append_values(blob, t);
        }
    };
    emit(m.params, "param");
    emit(m.buffers, "buffer");
    json manifest = {{"version", 1},
                     {"spec_digest", hex64(spec_digest_)},
                     {"epoch", epoch},
                     {"tensors", catalog}};
    atomic_write(blob_path(epoch), blob);
    atomic_write(manifest_path(epoch), manifest.dump(2) + "\n");
}

CheckpointStore::Snapshot CheckpointStore::load(int epoch) const {
    if (!has(epoch))
        throw Error(strcat("no checkpoint for epoch ", epoch, " in '", dir_, "'"));
    std::ifstream min(manifest_path(epoch));
    json manifest = json::parse(min);
    if (std::stoull(manifest.at("spec_digest").get<std::string>(), nullptr, 16) !=
        spec_digest_)
        throw Error(strcat("checkpoint epoch ", epoch, ": spec digest mismatch"));
    std::ifstream bin(blob_path(epoch), std::ios::binary);
    if (!bin) throw Error(strcat("missing blob '", blob_path(epoch), "'"));
    std::string blob((std::istreambuf_iterator<char>(bin)),
                     std::istreambuf_iterator<char>());
    Snapshot snap;
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name");
        Tensor t = read_values(blob, entry.at("offset").get<size_t>(),
                               entry.at("shape").get<std::vector<int>>(),
                               dtype_from_name(entry.at("dtype")), name);
        if (entry.at("kind") == "param")
            snap.params[name] = std::move(t);
        else
            snap.buffers[name] = std::move(t);
    }
    return snap;
}

void CheckpointStore::load_into(Model& m, int epoch) const {
    if (m.spec.digest() != spec_digest_)
        throw Error("checkpoint load: model spec digest does not match store");
    Snapshot snap = load(epoch);
    for (auto& [name, t] : snap.params) {
        auto it = m.params.find(name);
        if (it == m.params.end())
            throw Error(strcat("checkpoint load: unexpected tensor '", name, "'"));
        it->second = std::move(t);
    }
    for (auto& [name, t] : snap.buffers) m.buffers.at(name) = std::move(t);
}

}  // namespace memloc
