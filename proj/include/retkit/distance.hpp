#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "retkit/core.hpp"

namespace retkit {

/// Work-unit shape for tiled distance computation. Defaults keep one tile at
/// roughly 16 MB of float32 output.
struct TileSpec {
    std::int64_t query_block = 1024;
    std::int64_t gallery_block = 4096;

    void validate() const {
        if (query_block < 1 || gallery_block < 1)
            throw ValidationError("tile blocks must be >= 1");
    }
};

enum class Backing { InMemory, DiskSpilled };

/// Immutable query x gallery distance matrix, either resident in RAM or
/// random-accessed from a spill file without loading it. All entries are
/// non-negative. Safe to share across threads after construction.
///
/// Spill layout: `<name>.dist` holds n_queries*n_gallery float32 values,
/// row-major little-endian, plus a `<name>.dist.json` sidecar header.
class DistanceStore {
public:
    DistanceStore() = default;

    static DistanceStore from_values(std::vector<float> values, std::int64_t n_queries,
                                     std::int64_t n_gallery, DistanceMetric metric);

    /// Opens a spilled store. `path` names the payload (`.dist`) file.
    static DistanceStore open(const std::filesystem::path& path);

    /// Writes payload + sidecar for an in-memory store (temp file, then rename).
    void spill_to(const std::filesystem::path& path) const;

    float at(std::int64_t q, std::int64_t g) const;
    /// Copies row q (n_gallery values) into out.
    void read_row(std::int64_t q, float* out) const;

    std::int64_t n_queries() const { return n_queries_; }
    std::int64_t n_gallery() const { return n_gallery_; }
    DistanceMetric metric() const { return metric_; }
    Backing backing() const { return backing_; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::int64_t n_queries_ = 0;
    std::int64_t n_gallery_ = 0;
    DistanceMetric metric_ = DistanceMetric::Euclidean;
    Backing backing_ = Backing::InMemory;
    std::vector<float> values_;            // in-memory backing
    std::shared_ptr<class SpillFile> file_; // disk backing
    std::filesystem::path path_;
};

/// Pairwise distances between every query and gallery row, computed tile by
/// tile so peak memory stays at one query block regardless of gallery size.
/// Each entry is a single-shot double-precision reduction, so the stored
/// bytes do not depend on TileSpec, thread count, or backing.
///
/// euclidean = unsquared L2; cosine = 1 - dot (requires both sets normalized);
/// round-off below zero is clamped to 0.
DistanceStore compute_distances(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                DistanceMetric metric, const TileSpec& tiles = {},
                                Backing backing = Backing::InMemory,
                                const std::optional<std::filesystem::path>& spill_path = {},
                                int threads = 1);

/// Per-query ranking prefix: gallery indices ordered by ascending distance,
/// ties broken by ascending gallery row.
struct RankedResult {
    std::int64_t query_row = 0;
    std::vector<std::int64_t> ranked_gallery;
    std::vector<float> distances;
};

/// Smallest-k extraction per query; deterministic tie-break by gallery row.
std::vector<RankedResult> topk_per_query(const DistanceStore& store, std::int64_t k,
                                         int threads = 1);

} // namespace retkit
