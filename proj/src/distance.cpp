#include "retkit/distance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <fcntl.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "retkit/parallel.hpp"

namespace retkit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Spill file access
// ---------------------------------------------------------------------------

/// Read-only handle over a spill payload. pread keeps concurrent row reads
/// safe without per-thread file handles.
class SpillFile {
public:
    explicit SpillFile(const std::filesystem::path& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) throw IoError("cannot open spill file: " + path.string());
    }
    ~SpillFile() {
        if (fd_ >= 0) ::close(fd_);
    }
    SpillFile(const SpillFile&) = delete;
    SpillFile& operator=(const SpillFile&) = delete;

    void read_exact(std::uint64_t offset, void* out, std::size_t bytes) const {
        auto* dst = static_cast<char*>(out);
        while (bytes > 0) {
            const ssize_t got = ::pread(fd_, dst, bytes, static_cast<off_t>(offset));
            if (got <= 0)
                throw IoError("short read from spill file: " + path_.string());
            dst += got;
            offset += static_cast<std::uint64_t>(got);
            bytes -= static_cast<std::size_t>(got);
        }
    }

    std::uint64_t size() const {
        const off_t end = ::lseek(fd_, 0, SEEK_END);
        if (end < 0) throw IoError("cannot stat spill file: " + path_.string());
        return static_cast<std::uint64_t>(end);
    }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& payload) {
    return std::filesystem::path(payload.string() + ".json");
}

void write_sidecar(const std::filesystem::path& payload, std::int64_t n_queries,
                   std::int64_t n_gallery, DistanceMetric metric) {
    json header = {{"version", 1},
                   {"n_queries", n_queries},
                   {"n_gallery", n_gallery},
                   {"metric", to_string(metric)},
                   {"element", "f32"}};
    std::ofstream out(sidecar_path(payload), std::ios::trunc);
    if (!out) throw IoError("cannot write spill sidecar: " + sidecar_path(payload).string());
    out << header.dump(2) << '\n';
    if (!out) throw IoError("failed while writing spill sidecar: " + sidecar_path(payload).string());
}

} // namespace

DistanceStore DistanceStore::from_values(std::vector<float> values, std::int64_t n_queries,
                                         std::int64_t n_gallery, DistanceMetric metric) {
    if (static_cast<std::int64_t>(values.size()) != n_queries * n_gallery)
        throw ValidationError("DistanceStore: value count does not match n_queries * n_gallery");
    DistanceStore s;
    s.n_queries_ = n_queries;
    s.n_gallery_ = n_gallery;
    s.metric_ = metric;
    s.backing_ = Backing::InMemory;
    s.values_ = std::move(values);
    return s;
}

DistanceStore DistanceStore::open(const std::filesystem::path& path) {
    std::ifstream side(sidecar_path(path));
    if (!side) throw IoError("cannot open spill sidecar: " + sidecar_path(path).string());
    json header;
    try {
        side >> header;
    } catch (const json::exception& e) {
        throw ValidationError(sidecar_path(path).string() + ": malformed sidecar: " + e.what());
    }
    DistanceStore s;
    try {
        s.n_queries_ = header.at("n_queries").get<std::int64_t>();
        s.n_gallery_ = header.at("n_gallery").get<std::int64_t>();
        s.metric_ = metric_from_string(header.at("metric").get<std::string>());
    } catch (const json::exception& e) {
        throw ValidationError(sidecar_path(path).string() + ": missing sidecar field: " + e.what());
    }
    s.backing_ = Backing::DiskSpilled;
    s.path_ = path;
    s.file_ = std::make_shared<SpillFile>(path);
    const std::uint64_t expected =
        static_cast<std::uint64_t>(s.n_queries_) * static_cast<std::uint64_t>(s.n_gallery_) * sizeof(float);
    if (s.file_->size() != expected)
        throw ValidationError(path.string() + ": payload size " + std::to_string(s.file_->size()) +
                              " does not match header (expected " + std::to_string(expected) + ")");
    return s;
}

void DistanceStore::spill_to(const std::filesystem::path& path) const {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open spill file for writing: " + tmp.string());
        if (backing_ == Backing::InMemory) {
            out.write(reinterpret_cast<const char*>(values_.data()),
                      static_cast<std::streamsize>(values_.size() * sizeof(float)));
        } else {
            std::vector<float> row(static_cast<std::size_t>(n_gallery_));
            for (std::int64_t q = 0; q < n_queries_; ++q) {
                read_row(q, row.data());
                out.write(reinterpret_cast<const char*>(row.data()),
                          static_cast<std::streamsize>(row.size() * sizeof(float)));
            }
        }
        if (!out) throw IoError("failed while writing spill file: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot finalize spill file " + path.string() + ": " + ec.message());
    write_sidecar(path, n_queries_, n_gallery_, metric_);
}

float DistanceStore::at(std::int64_t q, std::int64_t g) const {
    if (q < 0 || q >= n_queries_ || g < 0 || g >= n_gallery_)
        throw ValidationError("DistanceStore: index out of range");
    if (backing_ == Backing::InMemory)
        return values_[static_cast<std::size_t>(q * n_gallery_ + g)];
    float v = 0.0f;
    file_->read_exact(static_cast<std::uint64_t>(q * n_gallery_ + g) * sizeof(float), &v, sizeof(v));
    return v;
}

void DistanceStore::read_row(std::int64_t q, float* out) const {
    if (q < 0 || q >= n_queries_)
        throw ValidationError("DistanceStore: query index out of range");
    if (backing_ == Backing::InMemory) {
        const float* src = values_.data() + static_cast<std::size_t>(q * n_gallery_);
        std::copy(src, src + n_gallery_, out);
        return;
    }
    file_->read_exact(static_cast<std::uint64_t>(q * n_gallery_) * sizeof(float), out,
                      static_cast<std::size_t>(n_gallery_) * sizeof(float));
}

// ---------------------------------------------------------------------------
// Tiled computation
// ---------------------------------------------------------------------------

namespace {

inline float entry_distance(const MatrixF& queries, const MatrixF& gallery, std::int64_t q,
                            std::int64_t g, DistanceMetric metric) {
    const float* x = queries.data() + q * queries.cols();
    const float* y = gallery.data() + g * gallery.cols();
    const Eigen::Index dim = queries.cols();
    double acc = 0.0;
    if (metric == DistanceMetric::Euclidean) {
        for (Eigen::Index c = 0; c < dim; ++c) {
            const double d = static_cast<double>(x[c]) - static_cast<double>(y[c]);
            acc += d * d;
        }
        return static_cast<float>(std::sqrt(acc));
    }
    for (Eigen::Index c = 0; c < dim; ++c)
        acc += static_cast<double>(x[c]) * static_cast<double>(y[c]);
    const double d = 1.0 - acc;
    return d < 0.0 ? 0.0f : static_cast<float>(d);
}

} // namespace

DistanceStore compute_distances(const EmbeddingSet& queries, const EmbeddingSet& gallery,
                                DistanceMetric metric, const TileSpec& tiles, Backing backing,
                                const std::optional<std::filesystem::path>& spill_path,
                                int threads) {
    tiles.validate();
    if (queries.dim() != gallery.dim())
        throw ValidationError("compute_distances: dim mismatch (" + std::to_string(queries.dim()) +
                              " vs " + std::to_string(gallery.dim()) + ")");
    if (metric == DistanceMetric::Cosine && !(queries.normalized && gallery.normalized))
        throw ValidationError("compute_distances: cosine metric requires both sets normalized");
    if (backing == Backing::DiskSpilled && !spill_path)
        throw ValidationError("compute_distances: disk backing requires a spill path");

    const std::int64_t n_q = queries.rows();
    const std::int64_t n_g = gallery.rows();

    std::ofstream out;
    std::filesystem::path tmp;
    std::vector<float> full;
    if (backing == Backing::DiskSpilled) {
        tmp = spill_path->string() + ".tmp";
        out.open(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open spill file for writing: " + tmp.string());
    } else {
        full.resize(static_cast<std::size_t>(n_q * n_g));
    }

    std::vector<float> block(static_cast<std::size_t>(std::min(tiles.query_block, std::max<std::int64_t>(n_q, 1)) * n_g));
    for (std::int64_t q0 = 0; q0 < n_q; q0 += tiles.query_block) {
        const std::int64_t q1 = std::min(n_q, q0 + tiles.query_block);
        const std::int64_t rows = q1 - q0;
        // gallery tiles within this query block are independent work units
        const std::int64_t n_tiles = (n_g + tiles.gallery_block - 1) / tiles.gallery_block;
        parallel_for(static_cast<std::size_t>(n_tiles), threads, [&](std::size_t t0, std::size_t t1) {
            for (std::size_t t = t0; t < t1; ++t) {
                const std::int64_t g0 = static_cast<std::int64_t>(t) * tiles.gallery_block;
                const std::int64_t g1 = std::min(n_g, g0 + tiles.gallery_block);
                for (std::int64_t q = q0; q < q1; ++q)
                    for (std::int64_t g = g0; g < g1; ++g)
                        block[static_cast<std::size_t>((q - q0) * n_g + g)] =
                            entry_distance(queries.matrix, gallery.matrix, q, g, metric);
            }
        });
        if (backing == Backing::DiskSpilled) {
            out.write(reinterpret_cast<const char*>(block.data()),
                      static_cast<std::streamsize>(static_cast<std::size_t>(rows * n_g) * sizeof(float)));
            if (!out) throw IoError("failed while appending to spill file: " + tmp.string());
        } else {
            std::copy(block.begin(), block.begin() + static_cast<std::ptrdiff_t>(rows * n_g),
                      full.begin() + static_cast<std::ptrdiff_t>(q0 * n_g));
        }
    }

    if (backing == Backing::DiskSpilled) {
        out.flush();
        if (!out) throw IoError("failed while flushing spill file: " + tmp.string());
        out.close();
        std::error_code ec;
        std::filesystem::rename(tmp, *spill_path, ec);
        if (ec)
            throw IoError("cannot finalize spill file " + spill_path->string() + ": " + ec.message());
        write_sidecar(*spill_path, n_q, n_g, metric);
        return DistanceStore::open(*spill_path);
    }
    return DistanceStore::from_values(std::move(full), n_q, n_g, metric);
}

// ---------------------------------------------------------------------------
// Top-k
// ---------------------------------------------------------------------------

std::vector<RankedResult> topk_per_query(const DistanceStore& store, std::int64_t k, int threads) {
    if (k < 1 || k > store.n_gallery())
        throw ValidationError("topk_per_query: k must lie in [1, n_gallery]");
    const std::int64_t n_q = store.n_queries();
    const std::int64_t n_g = store.n_gallery();
    std::vector<RankedResult> results(static_cast<std::size_t>(n_q));
    parallel_for(static_cast<std::size_t>(n_q), threads, [&](std::size_t qa, std::size_t qb) {
        std::vector<float> row(static_cast<std::size_t>(n_g));
        std::vector<std::int64_t> order(static_cast<std::size_t>(n_g));
        for (std::size_t q = qa; q < qb; ++q) {
            store.read_row(static_cast<std::int64_t>(q), row.data());
            std::iota(order.begin(), order.end(), std::int64_t{0});
            const auto cmp = [&row](std::int64_t a, std::int64_t b) {
                const float da = row[static_cast<std::size_t>(a)];
                const float db = row[static_cast<std::size_t>(b)];
                return da != db ? da < db : a < b;
            };
            std::partial_sort(order.begin(), order.begin() + k, order.end(), cmp);
            RankedResult& r = results[q];
            r.query_row = static_cast<std::int64_t>(q);
            r.ranked_gallery.assign(order.begin(), order.begin() + k);
            r.distances.resize(static_cast<std::size_t>(k));
            for (std::int64_t i = 0; i < k; ++i)
                r.distances[static_cast<std::size_t>(i)] =
                    row[static_cast<std::size_t>(r.ranked_gallery[static_cast<std::size_t>(i)])];
        }
    });
    return results;
}

} // namespace retkit
