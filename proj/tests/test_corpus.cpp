#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "deltanet/corpus.hpp"

using namespace deltanet;

namespace {

ExamRecord make_exam(const std::string& id, const std::string& pid, int visit,
                     std::vector<std::string> report) {
  ExamRecord r;
  r.exam_id = id;
  r.patient_id = pid;
  r.visit_index = visit;
  r.image.channels = 1;
  r.image.height = 8;
  r.image.width = 8;
  r.image.values.assign(64, 0.25);
  r.report = std::move(report);
  return r;
}

// Sentences are "."-terminated token runs.
std::vector<std::string> sentences_of(const std::vector<std::string>& report) {
  std::vector<std::string> out;
  std::string cur;
  for (const auto& tok : report) {
    cur += tok + " ";
    if (tok == ".") {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("vocabulary: counting, threshold, determinism") {
  auto a = make_exam("e1", "p1", 0, {"cough", "and", "fever", "."});
  auto b = make_exam("e2", "p2", 0, {"cough", "and", "fever", "."});
  auto vocab = Vocabulary::build({&a, &b});
  // 4 reserved + 4 unique tokens.
  CHECK(vocab.size() == 8);
  CHECK(vocab.id_of(Vocabulary::kPad) == kPadId);
  CHECK(vocab.id_of(Vocabulary::kBos) == kBosId);
  CHECK(vocab.id_of(Vocabulary::kEos) == kEosId);
  CHECK(vocab.id_of(Vocabulary::kUnk) == kUnkId);

  auto c = make_exam("e3", "p3", 0, {"cough", "cough", "rare"});
  auto thresholded = Vocabulary::build({&c}, 2);
  CHECK(thresholded.id_of("cough") != kUnkId);
  CHECK(thresholded.id_of("rare") == kUnkId);

  auto again = Vocabulary::build({&a, &b});
  CHECK(again.tokens() == vocab.tokens());
  CHECK(again.fingerprint() == vocab.fingerprint());
  CHECK_THROWS_AS(Vocabulary::build({}), UsageError);
}

TEST_CASE("encode/decode: round trip, boundaries, unknown words") {
  auto a = make_exam("e1", "p1", 0, {"mild", "opacity", "."});
  auto vocab = Vocabulary::build({&a});
  auto ids = vocab.encode({"mild", "opacity", "."});
  CHECK(ids.front() == kBosId);
  CHECK(ids.back() == kEosId);
  CHECK(vocab.decode(ids) == std::vector<std::string>{"mild", "opacity", "."});

  auto empty = vocab.encode({});
  CHECK(empty == std::vector<int>{kBosId, kEosId});

  auto unk = vocab.encode({"zebra"});
  CHECK(unk[1] == kUnkId);
  CHECK(vocab.decode(unk) == std::vector<std::string>{Vocabulary::kUnk});
}

TEST_CASE("pad_report: arithmetic, boundary, rejection") {
  auto [ids, mask] = pad_report({5, 6, 7}, 5);
  CHECK(ids == std::vector<int>{5, 6, 7, 0, 0});
  CHECK(mask == std::vector<std::uint8_t>{1, 1, 1, 0, 0});

  auto [exact, exact_mask] = pad_report({5, 6, 7}, 3);
  CHECK(exact == std::vector<int>{5, 6, 7});
  CHECK(exact_mask == std::vector<std::uint8_t>{1, 1, 1});

  CHECK_THROWS_AS(pad_report({1, 2, 3, 4}, 3), DimensionError);
}

TEST_CASE("split_patients: 7:1:2 at patient granularity, deterministic") {
  std::vector<ExamRecord> records;
  for (int p = 0; p < 100; ++p) {
    const std::string pid = "p" + std::to_string(p);
    records.push_back(make_exam(pid + "_v0", pid, 0, {"x", "."}));
    if (p % 3 == 0) records.push_back(make_exam(pid + "_v1", pid, 1, {"x", "."}));
  }
  auto split = split_patients(records, 7);
  CHECK(split.train.size() == 70);
  CHECK(split.validation.size() == 10);
  CHECK(split.test.size() == 20);

  // Every exam of a patient lands in one split.
  for (const auto& r : records) {
    const int member = static_cast<int>(split.train.count(r.patient_id)) +
                       static_cast<int>(split.validation.count(r.patient_id)) +
                       static_cast<int>(split.test.count(r.patient_id));
    CHECK(member == 1);
  }

  auto split2 = split_patients(records, 7);
  CHECK(split2.train == split.train);
  CHECK(split2.test == split.test);
  auto split3 = split_patients(records, 8);
  CHECK(split3.train != split.train);

  std::vector<ExamRecord> few(records.begin(), records.begin() + 5);
  CHECK_THROWS_AS(split_patients(few, 1), UsageError);
}

TEST_CASE("synthetic: zero change keeps reports identical, zero noise keeps images equal") {
  SyntheticConfig cfg;
  cfg.patients = 40;
  cfg.multi_visit_fraction = 1.0;
  cfg.max_visits = 3;
  cfg.change_prob = 0.0;
  cfg.noise_level = 0.0;
  cfg.seed = 5;
  auto records = generate_synthetic(cfg);
  std::map<std::string, std::vector<const ExamRecord*>> by_patient;
  for (const auto& r : records) by_patient[r.patient_id].push_back(&r);
  for (const auto& [pid, exams] : by_patient) {
    for (std::size_t i = 1; i < exams.size(); ++i) {
      CHECK(exams[i]->report == exams[0]->report);
      CHECK(exams[i]->image.values == exams[0]->image.values);
    }
  }
}

TEST_CASE("synthetic: deterministic under seed") {
  SyntheticConfig cfg;
  cfg.patients = 20;
  cfg.seed = 11;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].exam_id == b[i].exam_id);
    CHECK(a[i].report == b[i].report);
    CHECK(a[i].image.values == b[i].image.values);
  }
}

TEST_CASE("synthetic ground truth: report sentence iff label iff region signal") {
  SyntheticConfig cfg;
  cfg.patients = 60;
  cfg.seed = 13;
  auto records = generate_synthetic(cfg);
  const auto& nouns = finding_templates().nouns;
  int present_total = 0;
  for (const auto& r : records) {
    for (int f = 0; f < cfg.findings; ++f) {
      const auto& noun = nouns[static_cast<std::size_t>(f)];
      const bool labeled =
          std::find(r.labels.begin(), r.labels.end(), noun) != r.labels.end();
      const bool worded =
          std::find(r.report.begin(), r.report.end(), noun) != r.report.end();
      CHECK(labeled == worded);

      const auto region = finding_region(f, cfg.findings, cfg.image_size);
      double mean = 0.0;
      int count = 0;
      for (auto y = region.y0; y < region.y1; ++y)
        for (auto x = region.x0; x < region.x1; ++x) {
          mean += r.image.at(0, y, x);
          ++count;
        }
      mean /= count;
      // Separability: noise on the region mean is far below half of the
      // weakest presence intensity.
      const double threshold = 0.5 * finding_intensity(0, cfg.severities);
      CHECK((mean > threshold) == labeled);
      present_total += labeled ? 1 : 0;
    }
  }
  CHECK(present_total > 0);
}

TEST_CASE("synthetic: shared-sentence fraction tracks 1 - change probability") {
  SyntheticConfig cfg;
  cfg.patients = 1000;
  cfg.multi_visit_fraction = 1.0;
  cfg.max_visits = 2;
  cfg.change_prob = 0.3;
  cfg.seed = 17;
  auto records = generate_synthetic(cfg);
  std::map<std::string, std::vector<const ExamRecord*>> by_patient;
  for (const auto& r : records) by_patient[r.patient_id].push_back(&r);

  double shared_sum = 0.0;
  int pairs = 0;
  const std::vector<std::string> fallback{"no", "acute", "findings", "."};
  for (const auto& [pid, exams] : by_patient) {
    for (std::size_t i = 0; i + 1 < exams.size(); ++i) {
      if (exams[i]->report == fallback) continue;
      auto s0 = sentences_of(exams[i]->report);
      auto s1 = sentences_of(exams[i + 1]->report);
      std::multiset<std::string> next(s1.begin(), s1.end());
      int shared = 0;
      for (const auto& s : s0) {
        auto it = next.find(s);
        if (it != next.end()) {
          ++shared;
          next.erase(it);
        }
      }
      shared_sum += static_cast<double>(shared) / static_cast<double>(s0.size());
      ++pairs;
    }
  }
  REQUIRE(pairs > 500);
  const double mean_shared = shared_sum / pairs;
  CHECK(std::abs(mean_shared - (1.0 - cfg.change_prob)) <= 0.02);
}

TEST_CASE("synthetic: full re-draw leaves only chance-level overlap") {
  SyntheticConfig cfg;
  cfg.patients = 1000;
  cfg.multi_visit_fraction = 1.0;
  cfg.max_visits = 2;
  cfg.change_prob = 1.0;
  cfg.seed = 19;
  auto records = generate_synthetic(cfg);
  std::map<std::string, std::vector<const ExamRecord*>> by_patient;
  for (const auto& r : records) by_patient[r.patient_id].push_back(&r);

  double shared_sum = 0.0;
  int pairs = 0;
  const std::vector<std::string> fallback{"no", "acute", "findings", "."};
  for (const auto& [pid, exams] : by_patient) {
    for (std::size_t i = 0; i + 1 < exams.size(); ++i) {
      if (exams[i]->report == fallback) continue;
      auto s0 = sentences_of(exams[i]->report);
      auto s1 = sentences_of(exams[i + 1]->report);
      std::multiset<std::string> next(s1.begin(), s1.end());
      int shared = 0;
      for (const auto& s : s0) {
        auto it = next.find(s);
        if (it != next.end()) {
          ++shared;
          next.erase(it);
        }
      }
      shared_sum += static_cast<double>(shared) / static_cast<double>(s0.size());
      ++pairs;
    }
  }
  const double mean_shared = shared_sum / pairs;
  // Chance: an independent re-draw reproduces a present finding's sentence
  // with probability presence_prob / severities.
  const double chance = cfg.presence_prob / cfg.severities;
  CHECK(std::abs(mean_shared - chance) <= 0.02);
}

TEST_CASE("manifest: round trip, duplicate ids, missing payloads, bad lines") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "deltanet_corpus_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto manifest = dir / "corpus.manifest";

  SyntheticConfig cfg;
  cfg.patients = 12;
  cfg.seed = 23;
  auto records = generate_synthetic(cfg);
  records[0].labels = {};  // empty label list round-trips
  save_manifest(records, manifest);
  auto loaded = load_manifest(manifest);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].exam_id == records[i].exam_id);
    CHECK(loaded[i].patient_id == records[i].patient_id);
    CHECK(loaded[i].visit_index == records[i].visit_index);
    CHECK(loaded[i].report == records[i].report);
    CHECK(loaded[i].labels == records[i].labels);
    CHECK(loaded[i].image.values == records[i].image.values);
  }

  // Save twice: byte-identical manifests.
  const auto manifest2 = dir / "corpus2.manifest";
  save_manifest(records, manifest2);
  std::ifstream f1(manifest), f2(manifest2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  // Duplicate exam id is rejected at load.
  auto dup = records;
  dup.push_back(dup.front());
  dup.back().visit_index = 99;
  save_manifest(dup, dir / "dup.manifest");
  CHECK_THROWS_WITH_AS(load_manifest(dir / "dup.manifest"), doctest::Contains("duplicate"),
                       IoError);

  // Missing image payload names the exam.
  fs::remove(fs::path(manifest.string() + ".images") / (records[0].exam_id + ".grid"));
  CHECK_THROWS_WITH_AS(load_manifest(manifest), doctest::Contains(records[0].exam_id.c_str()),
                       IoError);

  // Malformed line reports its number.
  const auto bad = dir / "bad.manifest";
  std::ofstream os(bad);
  os << "# deltanet-manifest v1\nonly_two\tfields\n";
  os.close();
  CHECK_THROWS_WITH_AS(load_manifest(bad), doctest::Contains("line 2"), IoError);

  fs::remove_all(dir);
}

TEST_CASE("label extraction finds finding nouns in generated text") {
  auto labels = extract_labels({"mild", "opacity", "seen", "at", "left", "apex", ".",
                                "severe", "edema", "seen", "at", "right", "hilum", "."});
  CHECK(labels == std::vector<std::string>{"opacity", "edema"});
}
