#include "retkit/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace retkit {

using nlohmann::json;

const char* to_string(Domain d) {
    return d == Domain::Query ? "query" : "gallery";
}

Domain domain_from_string(const std::string& s) {
    if (s == "query") return Domain::Query;
    if (s == "gallery") return Domain::Gallery;
    throw ValidationError("unknown domain value: '" + s + "' (expected 'query' or 'gallery')");
}

const char* to_string(DistanceMetric m) {
    return m == DistanceMetric::Euclidean ? "euclidean" : "cosine";
}

DistanceMetric metric_from_string(const std::string& s) {
    if (s == "euclidean") return DistanceMetric::Euclidean;
    if (s == "cosine") return DistanceMetric::Cosine;
    throw ValidationError("unknown distance metric: '" + s + "'");
}

void RerankParams::validate(std::int64_t n_total) const {
    if (k1 < 1) throw ValidationError("rerank: k1 must be >= 1");
    if (k2 < 1 || k2 > k1) throw ValidationError("rerank: k2 must satisfy 1 <= k2 <= k1");
    if (lambda < 0.0 || lambda > 1.0) throw ValidationError("rerank: lambda must lie in [0, 1]");
    if (n_total > 0 && k1 >= n_total)
        throw ValidationError("rerank: k1 must be smaller than n_queries + n_gallery");
}

void EvalConfig::validate() const {
    if (k_values.empty()) throw ValidationError("eval: k_values must not be empty");
    for (std::size_t i = 0; i < k_values.size(); ++i) {
        if (k_values[i] < 1) throw ValidationError("eval: k_values must all be >= 1");
        if (i > 0 && k_values[i] <= k_values[i - 1])
            throw ValidationError("eval: k_values must be strictly ascending");
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

std::vector<ItemRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());

    std::vector<ItemRecord> records;
    std::unordered_set<std::string> seen_ids;
    std::unordered_set<std::int64_t> seen_rows;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": malformed manifest line: " + e.what());
        }
        ItemRecord rec;
        try {
            rec.id = obj.at("id").get<std::string>();
            rec.product = obj.at("product").get<std::string>();
            rec.category = obj.at("category").get<std::string>();
            rec.domain = domain_from_string(obj.at("domain").get<std::string>());
            rec.row = obj.at("row").get<std::int64_t>();
        } catch (const ValidationError&) {
            throw;
        } catch (const json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": missing or mistyped field: " + e.what());
        }
        if (rec.product.empty())
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": product must be non-empty");
        if (!seen_ids.insert(rec.id).second)
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": duplicate id '" + rec.id + "'");
        if (!seen_rows.insert(rec.row).second)
            throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                                  ": duplicate row index " + std::to_string(rec.row));
        records.push_back(std::move(rec));
    }
    return records;
}

void save_manifest(const std::vector<ItemRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open manifest for writing: " + path.string());
    for (const auto& rec : records) {
        json obj = {{"id", rec.id},
                    {"product", rec.product},
                    {"category", rec.category},
                    {"domain", to_string(rec.domain)},
                    {"row", rec.row}};
        out << obj.dump() << '\n';
    }
    if (!out) throw IoError("failed while writing manifest: " + path.string());
}

EmbeddingSet attach_records(MatrixF matrix, std::vector<ItemRecord> records) {
    const auto n = matrix.rows();
    if (static_cast<std::int64_t>(records.size()) != n)
        throw ValidationError("attach_records: " + std::to_string(records.size()) +
                              " records for " + std::to_string(n) + " matrix rows");
    std::vector<ItemRecord> ordered(records.size());
    std::vector<bool> filled(records.size(), false);
    for (auto& rec : records) {
        if (rec.row < 0 || rec.row >= n)
            throw ValidationError("attach_records: row index " + std::to_string(rec.row) +
                                  " outside [0, " + std::to_string(n) + ")");
        if (filled[static_cast<std::size_t>(rec.row)])
            throw ValidationError("attach_records: duplicate row index " + std::to_string(rec.row));
        filled[static_cast<std::size_t>(rec.row)] = true;
        ordered[static_cast<std::size_t>(rec.row)] = std::move(rec);
    }
    EmbeddingSet set;
    set.matrix = std::move(matrix);
    set.records = std::move(ordered);
    return set;
}

std::vector<std::string> validate_retrieval_sets(const EmbeddingSet& queries,
                                                 const EmbeddingSet& gallery) {
    std::vector<std::string> issues;
    std::unordered_set<std::string> gallery_products;
    for (const auto& rec : gallery.records) gallery_products.insert(rec.product);
    for (const auto& rec : queries.records) {
        if (!gallery_products.count(rec.product))
            issues.push_back("query '" + rec.id + "' (product '" + rec.product +
                             "') has no gallery match");
    }
    if (queries.dim() != gallery.dim())
        issues.push_back("embedding dims differ: queries " + std::to_string(queries.dim()) +
                         " vs gallery " + std::to_string(gallery.dim()));
    return issues;
}

// ---------------------------------------------------------------------------
// Embedding files
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint8_t kElementF32 = 0;

template <typename T>
void put_le(std::string& buf, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<T>(v);
}

} // namespace

MatrixF read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embedding file: " + path.string());

    unsigned char header[kEmbeddingHeaderBytes];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (static_cast<std::size_t>(in.gcount()) != sizeof(header))
        throw ValidationError(path.string() + ": truncated header (expected " +
                              std::to_string(sizeof(header)) + " bytes, got " +
                              std::to_string(in.gcount()) + ")");
    if (std::memcmp(header, kMagic, 4) != 0)
        throw ValidationError(path.string() + ": bad magic (not an embedding file)");
    const auto version = get_le<std::uint32_t>(header + 4);
    if (version != 1)
        throw ValidationError(path.string() + ": unsupported version " + std::to_string(version));
    const auto n_rows = get_le<std::uint64_t>(header + 8);
    const auto dim = get_le<std::uint32_t>(header + 16);
    const auto elem = header[20];
    if (elem != kElementF32)
        throw ValidationError(path.string() + ": unsupported element-type code " +
                              std::to_string(static_cast<int>(elem)));
    if (dim == 0) throw ValidationError(path.string() + ": dim must be >= 1");

    MatrixF matrix(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(dim));
    const std::uint64_t expected = n_rows * static_cast<std::uint64_t>(dim) * sizeof(float);
    in.read(reinterpret_cast<char*>(matrix.data()), static_cast<std::streamsize>(expected));
    const auto got = static_cast<std::uint64_t>(in.gcount());
    if (got != expected)
        throw ValidationError(path.string() + ": truncated payload (expected " +
                              std::to_string(expected) + " bytes, got " + std::to_string(got) + ")");
    // trailing garbage is also a corruption signal
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0)
        throw ValidationError(path.string() + ": trailing bytes after payload");
    return matrix;
}

void write_embeddings(const MatrixF& matrix, const std::filesystem::path& path) {
    if (matrix.rows() == 0 || matrix.cols() == 0)
        throw ValidationError("write_embeddings: matrix must be non-empty");

    std::string header;
    header.reserve(kEmbeddingHeaderBytes);
    header.append(kMagic, 4);
    put_le<std::uint32_t>(header, 1);
    put_le<std::uint64_t>(header, static_cast<std::uint64_t>(matrix.rows()));
    put_le<std::uint32_t>(header, static_cast<std::uint32_t>(matrix.cols()));
    header.push_back(static_cast<char>(kElementF32));
    header.append(4, '\0');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open embedding file for writing: " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(matrix.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(matrix.size())));
    if (!out) throw IoError("failed while writing embedding file: " + path.string());
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

MatrixF l2_normalize_rows(const MatrixF& matrix) {
    MatrixF out(matrix.rows(), matrix.cols());
    for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
        double sq = 0.0;
        for (Eigen::Index c = 0; c < matrix.cols(); ++c) {
            const double v = matrix(r, c);
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm < 1e-12)
            throw ValidationError("l2_normalize: row " + std::to_string(r) +
                                  " has near-zero norm");
        const double inv = 1.0 / norm;
        for (Eigen::Index c = 0; c < matrix.cols(); ++c)
            out(r, c) = static_cast<float>(matrix(r, c) * inv);
    }
    return out;
}

EmbeddingSet l2_normalize(const EmbeddingSet& set) {
    EmbeddingSet out;
    out.matrix = l2_normalize_rows(set.matrix);
    out.records = set.records;
    out.normalized = true;
    return out;
}

} // namespace retkit
