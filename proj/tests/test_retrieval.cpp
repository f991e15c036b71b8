#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "deltanet/retrieval.hpp"

using namespace deltanet;

namespace {

SyntheticConfig corpus_config(int patients, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.patients = patients;
  cfg.multi_visit_fraction = 0.4;
  cfg.seed = seed;
  return cfg;
}

// Independent oracle: score every candidate, full sort, take k.
std::vector<RetrievalHit> brute_force_topk(const FeatureIndex& index,
                                           const std::vector<double>& query, std::size_t k,
                                           const std::string& exclude_exam,
                                           const std::string& exclude_patient) {
  std::vector<RetrievalHit> all;
  for (const auto& e : index.entries()) {
    if (e.exam_id == exclude_exam) continue;
    if (!exclude_patient.empty() && e.patient_id == exclude_patient) continue;
    double dot = 0, nq = 0, ne = 0;
    for (std::size_t i = 0; i < query.size(); ++i) {
      dot += query[i] * e.embedding[i];
      nq += query[i] * query[i];
      ne += e.embedding[i] * e.embedding[i];
    }
    all.push_back({e.exam_id, e.patient_id, dot / (std::sqrt(nq) * std::sqrt(ne))});
  }
  std::stable_sort(all.begin(), all.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.exam_id < b.exam_id;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace

TEST_CASE("pixel features: determinism, unit norm, discrimination, blank fallback") {
  auto records = generate_synthetic(corpus_config(12, 3));
  auto f1 = extract_features_pixel(records[0].image);
  auto f2 = extract_features_pixel(records[0].image);
  CHECK(f1.values == f2.values);
  CHECK_FALSE(f1.degenerate);

  double norm = 0;
  for (double v : f1.values) norm += v * v;
  CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);

  // Two structurally different images are not near-duplicates.
  double best = -1.0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].labels == records[0].labels) continue;
    best = std::max(best, cosine(f1.values, extract_features_pixel(records[i].image).values));
  }
  CHECK(best < 0.99);

  ImageGrid blank;
  blank.channels = 1;
  blank.height = 16;
  blank.width = 16;
  blank.values.assign(256, 0.42);  // constant image: zero after standardization
  auto fb = extract_features_pixel(blank);
  CHECK(fb.degenerate);
  CHECK(fb.values[0] == 1.0);
}

TEST_CASE("encoder features: unit norm via frozen conv encoder") {
  std::mt19937_64 rng(5);
  ConvEncoderConfig cfg;
  cfg.in_channels = 1;
  cfg.height = 32;
  cfg.width = 32;
  cfg.hidden_channels = 4;
  cfg.stages = 3;
  cfg.out_dim = 16;
  ConvEncoder<double> enc(cfg, rng);
  auto records = generate_synthetic(corpus_config(4, 7));
  auto f = extract_features_encoder(records[0].image, enc);
  double norm = 0;
  for (double v : f.values) norm += v * v;
  CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
  CHECK(f.values.size() == 16);
}

TEST_CASE("cosine: identity, orthogonality, random oracle, zero vector") {
  std::vector<double> v{0.3, -0.4, 0.5};
  CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine({1, 0}, {0, 1}) == 0.0);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(8), b(8);
    for (auto& x : a) x = dist(rng);
    for (auto& x : b) x = dist(rng);
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < 8; ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    CHECK(cosine(a, b) ==
          doctest::Approx(dot / (std::sqrt(na) * std::sqrt(nb))).epsilon(1e-12));
  }
  CHECK_THROWS_AS(cosine({0, 0}, {1, 0}), UsageError);
}

TEST_CASE("retrieval matches the brute-force oracle on a 500-exam index") {
  auto records = generate_synthetic(corpus_config(400, 13));
  REQUIRE(records.size() >= 500);
  records.resize(500);
  auto split = split_patients(records, 13);
  auto index = build_index(records, split, FeatureProvider::Pixel, nullptr);

  int queried = 0;
  for (const auto& r : records) {
    if (split.part_of(r.patient_id) != PatientSplit::Part::Test) continue;
    auto features = extract_features_pixel(r.image);
    for (std::size_t k : {std::size_t(1), std::size_t(3), std::size_t(10)}) {
      auto mine = index.query(features.values, k, r.exam_id, r.patient_id);
      auto oracle = brute_force_topk(index, features.values, k, r.exam_id, r.patient_id);
      REQUIRE(mine.hits.size() == oracle.size());
      for (std::size_t i = 0; i < oracle.size(); ++i) {
        CHECK(mine.hits[i].exam_id == oracle[i].exam_id);
        CHECK(mine.hits[i].similarity == doctest::Approx(oracle[i].similarity).epsilon(1e-12));
      }
    }
    ++queried;
    if (queried >= 40) break;
  }
  CHECK(queried > 0);
}

TEST_CASE("retrieval: exact duplicate of another patient ranks first with similarity 1") {
  auto records = generate_synthetic(corpus_config(30, 17));
  // Clone a training exam's image into a fresh query "patient".
  auto split = split_patients(records, 17);
  const ExamRecord* train_exam = nullptr;
  for (const auto& r : records)
    if (split.part_of(r.patient_id) == PatientSplit::Part::Train) {
      train_exam = &r;
      break;
    }
  REQUIRE(train_exam != nullptr);
  auto index = build_index(records, split, FeatureProvider::Pixel, nullptr);
  auto features = extract_features_pixel(train_exam->image);
  auto result = index.query(features.values, 1, "query_exam", std::nullopt);
  REQUIRE(result.hits.size() == 1);
  CHECK(result.hits[0].exam_id == train_exam->exam_id);
  CHECK(result.hits[0].similarity == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("retrieval: ties break by ascending exam id") {
  FeatureIndex index("pixel", 2, 0);
  index.add({"b_exam", "p1", {1.0, 0.0}});
  index.add({"a_exam", "p2", {1.0, 0.0}});
  index.add({"c_exam", "p3", {0.0, 1.0}});
  auto result = index.query({1.0, 0.0}, 2, "", std::nullopt);
  REQUIRE(result.hits.size() == 2);
  CHECK(result.hits[0].exam_id == "a_exam");
  CHECK(result.hits[1].exam_id == "b_exam");
}

TEST_CASE("retrieval: k beyond index size returns everything with a warning flag") {
  FeatureIndex index("pixel", 2, 0);
  index.add({"x", "p1", {1.0, 0.0}});
  index.add({"y", "p2", {0.0, 1.0}});
  auto result = index.query({1.0, 0.0}, 10, "", std::nullopt);
  CHECK(result.hits.size() == 2);
  CHECK(result.truncated);
}

TEST_CASE("retrieval: leakage guard and scale invariance") {
  auto records = generate_synthetic(corpus_config(60, 19));
  auto split = split_patients(records, 19);
  auto index = build_index(records, split, FeatureProvider::Pixel, nullptr);

  // No validation/test exam id can ever be returned: they are not indexed.
  for (const auto& e : index.entries())
    CHECK(split.part_of(e.patient_id) == PatientSplit::Part::Train);

  for (const auto& r : records) {
    if (split.part_of(r.patient_id) == PatientSplit::Part::Train) continue;
    auto features = extract_features_pixel(r.image);
    auto result = index.query(features.values, 5, r.exam_id, r.patient_id);
    for (const auto& hit : result.hits)
      CHECK(split.part_of(hit.patient_id) == PatientSplit::Part::Train);

    // Positive scaling of the query cannot change the ranking.
    auto scaled = features.values;
    for (auto& v : scaled) v *= 37.5;
    auto result2 = index.query(scaled, 5, r.exam_id, r.patient_id);
    REQUIRE(result.hits.size() == result2.hits.size());
    for (std::size_t i = 0; i < result.hits.size(); ++i)
      CHECK(result.hits[i].exam_id == result2.hits[i].exam_id);
  }
}

TEST_CASE("index snapshot round trip reproduces identical query results") {
  namespace fs = std::filesystem;
  auto records = generate_synthetic(corpus_config(40, 23));
  auto split = split_patients(records, 23);
  auto index = build_index(records, split, FeatureProvider::Pixel, nullptr);

  const auto path = fs::temp_directory_path() / "deltanet_index_test.dnix";
  index.save(path);
  auto reloaded = FeatureIndex::load(path);
  CHECK(reloaded.provider_tag() == index.provider_tag());
  CHECK(reloaded.dim() == index.dim());
  CHECK(reloaded.split_fingerprint() == index.split_fingerprint());
  REQUIRE(reloaded.size() == index.size());

  auto features = extract_features_pixel(records[0].image);
  auto a = index.query(features.values, 7, records[0].exam_id, std::nullopt);
  auto b = reloaded.query(features.values, 7, records[0].exam_id, std::nullopt);
  REQUIRE(a.hits.size() == b.hits.size());
  for (std::size_t i = 0; i < a.hits.size(); ++i) {
    CHECK(a.hits[i].exam_id == b.hits[i].exam_id);
    CHECK(a.hits[i].similarity == b.hits[i].similarity);  // bit-exact
  }
  fs::remove(path);
}

TEST_CASE("history_conditions: ordering, boundary, single condition") {
  std::vector<ExamRecord> records;
  auto mk = [&](const std::string& id, const std::string& pid, int visit) {
    ExamRecord r;
    r.exam_id = id;
    r.patient_id = pid;
    r.visit_index = visit;
    r.report = {"x", "."};
    records.push_back(r);
  };
  mk("t1", "pa", 0);
  mk("t2", "pa", 1);
  mk("t3", "pa", 2);
  mk("t4", "pa", 3);
  mk("u1", "pb", 0);

  auto h = history_conditions(records, "pa", 3, 3);
  REQUIRE(h.conditions.size() == 3);
  CHECK(h.conditions[0]->exam_id == "t3");
  CHECK(h.conditions[1]->exam_id == "t2");
  CHECK(h.conditions[2]->exam_id == "t1");
  for (const auto* c : h.conditions) CHECK(c->visit_index < 3);

  CHECK(history_conditions(records, "pb", 0, 3).empty());

  auto one = history_conditions(records, "pa", 1, 1);
  REQUIRE(one.conditions.size() == 1);
  CHECK(one.conditions[0]->exam_id == "t1");
}
