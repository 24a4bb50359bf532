#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memloc/model.hpp"

namespace memloc {

// Per-epoch snapshots: manifest_<epoch>.json + weights_<epoch>.bin in catalog
// order (params then buffers, name-sorted). Values are little-endian f32 or
// f64 per tensor dtype; writes are temp-file + rename.
class CheckpointStore {
public:
    CheckpointStore(std::string dir, uint64_t spec_digest);
    static CheckpointStore open(const std::string& dir);  // digest read from disk

    void save(const Model& m, int epoch);

    struct Snapshot {
        std::map<std::string, Tensor> params;
        std::map<std::string, Tensor> buffers;
    };
    Snapshot load(int epoch) const;
    void load_into(Model& m, int epoch) const;

    bool has(int epoch) const;
    std::vector<int> epochs() const;
    int last_epoch() const;
    const std::string& dir() const { return dir_; }
    uint64_t spec_digest() const { return spec_digest_; }

private:
    std::string manifest_path(int epoch) const;
    std::string blob_path(int epoch) const;

    std::string dir_;
    uint64_t spec_digest_;
};

}  // namespace memloc
