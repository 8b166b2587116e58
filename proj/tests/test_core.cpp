#include "doctest.h"

#include <cmath>
#include <fstream>

#include "retkit/core.hpp"
#include "test_util.hpp"

using namespace retkit;
using rk_test::TempDir;

namespace {

std::vector<ItemRecord> synth_records(int n) {
    std::vector<ItemRecord> records;
    Rng rng(41);
    for (int i = 0; i < n; ++i) {
        ItemRecord rec;
        rec.id = "item-" + std::to_string(i);
        rec.product = "prod-" + std::to_string(rng.uniform_int(97));
        rec.category = "cat-" + std::to_string(rng.uniform_int(7));
        rec.domain = rng.uniform() < 0.3 ? Domain::Query : Domain::Gallery;
        rec.row = i;
        records.push_back(std::move(rec));
    }
    return records;
}

} // namespace

TEST_CASE("manifest: three valid lines load in order") {
    TempDir dir("manifest");
    {
        std::ofstream out(dir / "m.jsonl");
        out << R"({"id":"a","product":"p1","category":"dresses","domain":"query","row":0})" << "\n";
        out << R"({"id":"b","product":"p2","category":"dresses","domain":"gallery","row":1})" << "\n";
        out << R"({"id":"c","product":"p1","category":"tops","domain":"gallery","row":2})" << "\n";
    }
    const auto records = load_manifest(dir / "m.jsonl");
    REQUIRE(records.size() == 3);
    CHECK(records[0].id == "a");
    CHECK(records[1].product == "p2");
    CHECK(records[2].category == "tops");
    CHECK(records[0].domain == Domain::Query);
    CHECK(records[2].row == 2);
}

TEST_CASE("manifest: duplicate rows, duplicate ids and bad domains are rejected") {
    TempDir dir("manifest-bad");
    SUBCASE("duplicate row") {
        std::ofstream(dir / "m.jsonl")
            << R"({"id":"a","product":"p","category":"c","domain":"query","row":0})" << "\n"
            << R"({"id":"b","product":"p","category":"c","domain":"query","row":0})" << "\n";
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), ValidationError);
    }
    SUBCASE("duplicate id") {
        std::ofstream(dir / "m.jsonl")
            << R"({"id":"a","product":"p","category":"c","domain":"query","row":0})" << "\n"
            << R"({"id":"a","product":"p","category":"c","domain":"query","row":1})" << "\n";
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), ValidationError);
    }
    SUBCASE("unknown domain") {
        std::ofstream(dir / "m.jsonl")
            << R"({"id":"a","product":"p","category":"c","domain":"street","row":0})" << "\n";
        CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), ValidationError);
    }
    SUBCASE("malformed line reports the line number") {
        std::ofstream(dir / "m.jsonl")
            << R"({"id":"a","product":"p","category":"c","domain":"query","row":0})" << "\n"
            << "{oops\n";
        try {
            load_manifest(dir / "m.jsonl");
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(":2") != std::string::npos);
        }
    }
    SUBCASE("missing file is an IoError") {
        CHECK_THROWS_AS(load_manifest(dir / "absent.jsonl"), IoError);
    }
}

TEST_CASE("manifest: 1000-record round-trip is the identity") {
    TempDir dir("manifest-rt");
    const auto records = synth_records(1000);
    save_manifest(records, dir / "m.jsonl");
    const auto loaded = load_manifest(dir / "m.jsonl");
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].id == records[i].id);
        CHECK(loaded[i].product == records[i].product);
        CHECK(loaded[i].category == records[i].category);
        CHECK(loaded[i].domain == records[i].domain);
        CHECK(loaded[i].row == records[i].row);
    }
}

TEST_CASE("embedding file: 1x1 matrix [0.5] writes a 25-byte header + 4 payload bytes") {
    TempDir dir("emb-layout");
    MatrixF m(1, 1);
    m(0, 0) = 0.5f;
    write_embeddings(m, dir / "one.emb");
    const std::string bytes = rk_test::read_file(dir / "one.emb");
    REQUIRE(bytes.size() == 29);
    CHECK(bytes.substr(0, 4) == "EMB1");
    // version 1, n_rows 1, dim 1, element code 0, reserved zeros
    const unsigned char expected_header[21] = {1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0,
                                               0, 1, 0, 0, 0, 0, 0, 0, 0, 0};
    for (int i = 0; i < 21; ++i)
        CHECK(static_cast<unsigned char>(bytes[4 + i]) == expected_header[i]);
    float payload = 0.0f;
    std::memcpy(&payload, bytes.data() + 25, 4);
    CHECK(payload == 0.5f);
}

TEST_CASE("embedding file: round-trip is bit-exact") {
    TempDir dir("emb-rt");
    const MatrixF m = rk_test::random_matrix(7, 10000, 128);
    write_embeddings(m, dir / "big.emb");
    const MatrixF back = read_embeddings(dir / "big.emb");
    REQUIRE(back.rows() == m.rows());
    REQUIRE(back.cols() == m.cols());
    CHECK(std::memcmp(m.data(), back.data(), sizeof(float) * m.size()) == 0);
}

TEST_CASE("embedding file: corruption is detected") {
    TempDir dir("emb-bad");
    const MatrixF m = rk_test::random_matrix(11, 8, 4);
    write_embeddings(m, dir / "e.emb");

    SUBCASE("one byte truncated") {
        std::string bytes = rk_test::read_file(dir / "e.emb");
        bytes.pop_back();
        std::ofstream(dir / "t.emb", std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_embeddings(dir / "t.emb"), ValidationError);
    }
    SUBCASE("bad magic") {
        std::string bytes = rk_test::read_file(dir / "e.emb");
        bytes[0] = 'X';
        std::ofstream(dir / "t.emb", std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_embeddings(dir / "t.emb"), ValidationError);
    }
    SUBCASE("unsupported element type") {
        std::string bytes = rk_test::read_file(dir / "e.emb");
        bytes[20] = 3;
        std::ofstream(dir / "t.emb", std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_embeddings(dir / "t.emb"), ValidationError);
    }
    SUBCASE("empty matrix is rejected on write") {
        CHECK_THROWS_AS(write_embeddings(MatrixF(0, 4), dir / "x.emb"), ValidationError);
    }
}

TEST_CASE("l2_normalize: 3-4-5 triangle") {
    EmbeddingSet set;
    set.matrix = MatrixF(1, 2);
    set.matrix << 3.0f, 4.0f;
    const EmbeddingSet out = l2_normalize(set);
    CHECK(out.normalized);
    CHECK(out.matrix(0, 0) == doctest::Approx(0.6).epsilon(1e-7));
    CHECK(out.matrix(0, 1) == doctest::Approx(0.8).epsilon(1e-7));
}

TEST_CASE("l2_normalize: idempotent, scale-invariant, unit norms") {
    EmbeddingSet set;
    set.matrix = rk_test::random_matrix(3, 64, 16);
    const EmbeddingSet once = l2_normalize(set);
    for (Eigen::Index r = 0; r < once.matrix.rows(); ++r) {
        const double norm = once.matrix.row(r).cast<double>().norm();
        CHECK(norm > 1.0 - 1e-6);
        CHECK(norm < 1.0 + 1e-6);
    }
    const EmbeddingSet twice = l2_normalize(once);
    EmbeddingSet scaled;
    scaled.matrix = set.matrix * 37.5f;
    const EmbeddingSet from_scaled = l2_normalize(scaled);
    for (Eigen::Index r = 0; r < once.matrix.rows(); ++r)
        for (Eigen::Index c = 0; c < once.matrix.cols(); ++c) {
            CHECK(std::abs(twice.matrix(r, c) - once.matrix(r, c)) < 1e-6);
            CHECK(std::abs(from_scaled.matrix(r, c) - once.matrix(r, c)) < 1e-6);
        }
}

TEST_CASE("l2_normalize: near-zero row reports its index") {
    EmbeddingSet set;
    set.matrix = MatrixF::Zero(3, 4);
    set.matrix.row(0).setConstant(1.0f);
    set.matrix.row(2).setConstant(2.0f);
    try {
        l2_normalize(set);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
}

TEST_CASE("attach_records: reorders by row and rejects inconsistencies") {
    MatrixF m = rk_test::random_matrix(23, 3, 2);
    std::vector<ItemRecord> records;
    for (int i = 2; i >= 0; --i)
        records.push_back({"id" + std::to_string(i), "p", "c", Domain::Gallery, i});
    const EmbeddingSet set = attach_records(m, records);
    CHECK(set.records[0].id == "id0");
    CHECK(set.records[2].id == "id2");

    records.pop_back();
    CHECK_THROWS_AS(attach_records(m, records), ValidationError);
    records.push_back({"idx", "p", "c", Domain::Gallery, 5});
    CHECK_THROWS_AS(attach_records(m, records), ValidationError);
}

TEST_CASE("validate_retrieval_sets flags queries without gallery matches") {
    EmbeddingSet queries, gallery;
    queries.matrix = rk_test::random_matrix(1, 2, 3);
    queries.records = {{"q0", "lonely", "c", Domain::Query, 0}, {"q1", "match", "c", Domain::Query, 1}};
    gallery.matrix = rk_test::random_matrix(2, 1, 3);
    gallery.records = {{"g0", "match", "c", Domain::Gallery, 0}};
    const auto issues = validate_retrieval_sets(queries, gallery);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].find("lonely") != std::string::npos);
}
