#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "retkit/errors.hpp"

namespace retkit {

/// Row-major float32 matrix; matches the on-disk embedding layout.
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Domain { Query, Gallery };

const char* to_string(Domain d);
Domain domain_from_string(const std::string& s);

/// One catalogue entry: ties a matrix row to its retrieval metadata.
/// `product` is the ground-truth key: a query matches a gallery row iff the
/// products are equal. `category` drives the constrained evaluation protocol.
struct ItemRecord {
    std::string id;
    std::string product;
    std::string category;
    Domain domain = Domain::Gallery;
    std::int64_t row = 0;
};

/// Embeddings plus the aligned item metadata. After attach_records the record
/// at index i describes matrix row i.
struct EmbeddingSet {
    MatrixF matrix;
    std::vector<ItemRecord> records;
    bool normalized = false;

    std::int64_t rows() const { return matrix.rows(); }
    std::int64_t dim() const { return matrix.cols(); }
};

enum class DistanceMetric { Euclidean, Cosine };

const char* to_string(DistanceMetric m);
DistanceMetric metric_from_string(const std::string& s);

enum class ConstraintMode { None, ByCategory };

/// k-reciprocal re-ranking parameters (consumed by the rerank module).
struct RerankParams {
    int k1 = 20;        // neighborhood size
    int k2 = 6;         // local query expansion size
    double lambda = 0.3; // weight of the original distance in the final mix

    void validate(std::int64_t n_total) const;
};

/// Evaluation switches shared by the metrics engine and the CLI.
struct EvalConfig {
    DistanceMetric metric = DistanceMetric::Euclidean;
    std::vector<int> k_values = {1, 10, 20, 50};
    ConstraintMode constrained = ConstraintMode::None;
    std::optional<RerankParams> rerank;

    void validate() const; // k_values ascending, all >= 1
};

// ---------------------------------------------------------------------------
// Manifest I/O (JSON lines, one object per row)
// ---------------------------------------------------------------------------

/// Parses a JSONL manifest. Records are returned in file order. Rejects
/// malformed lines (with line number), duplicate ids, duplicate row indices
/// and unknown domain values.
std::vector<ItemRecord> load_manifest(const std::filesystem::path& path);

void save_manifest(const std::vector<ItemRecord>& records, const std::filesystem::path& path);

/// Reorders records so records[i].row == i and checks they exactly cover
/// [0, matrix.rows()). Throws ValidationError otherwise.
EmbeddingSet attach_records(MatrixF matrix, std::vector<ItemRecord> records);

/// Non-fatal issues in a query/gallery pair (e.g. a query product with no
/// gallery match). One human-readable line per issue.
std::vector<std::string> validate_retrieval_sets(const EmbeddingSet& queries,
                                                 const EmbeddingSet& gallery);

// ---------------------------------------------------------------------------
// Embedding file I/O
//
// Little-endian layout: magic "EMB1", u32 version = 1, u64 n_rows, u32 dim,
// u8 element type code (0 = float32), 4 reserved zero bytes. The header is
// exactly 25 bytes and is followed by n_rows*dim elements, row-major.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kEmbeddingHeaderBytes = 25;

MatrixF read_embeddings(const std::filesystem::path& path);
void write_embeddings(const MatrixF& matrix, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Returns a copy whose rows have unit L2 norm and sets the normalized flag.
/// Rows with norm below 1e-12 are rejected (the row index is reported).
EmbeddingSet l2_normalize(const EmbeddingSet& set);

/// Row-wise normalization of a bare matrix; same contract as above.
MatrixF l2_normalize_rows(const MatrixF& matrix);

} // namespace retkit
