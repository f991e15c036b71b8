#pragma once

// Dataset model: exam records, vocabulary, padding, patient-level splits,
// and a synthetic multi-visit corpus generator built so that consecutive
// reports share most of their content and every finding leaves a
// recoverable localized trace in the image.

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "deltanet/error.hpp"
#include "deltanet/model.hpp"

namespace deltanet {

struct ImageGrid {
  Eigen::Index channels = 1;
  Eigen::Index height = 32;
  Eigen::Index width = 32;
  std::vector<double> values;  // row-major, channel-major

  Eigen::Index numel() const { return channels * height * width; }
  double& at(Eigen::Index c, Eigen::Index y, Eigen::Index x) {
    return values[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  double at(Eigen::Index c, Eigen::Index y, Eigen::Index x) const {
    return values[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  TensorD tensor() const {
    return TensorD::from_values({channels, height, width}, values, false);
  }
};

struct ExamRecord {
  std::string exam_id;
  std::string patient_id;
  int visit_index = 0;
  ImageGrid image;
  std::vector<std::string> report;  // whitespace tokens
  std::vector<std::string> labels;  // optional finding labels
};

class Vocabulary {
public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";

  // Deterministic id assignment: reserved 0..3, then frequency-descending
  // with lexicographic tie-break. Tokens under `min_frequency` map to UNK.
  static Vocabulary build(const std::vector<const ExamRecord*>& training_records,
                          int min_frequency = 1);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id_of(const std::string& token) const;
  const std::string& token_of(int id) const;

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  std::uint64_t fingerprint() const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

std::pair<std::vector<int>, std::vector<std::uint8_t>> pad_report(const std::vector<int>& ids,
                                                                  std::size_t fixed_length);

struct PatientSplit {
  std::unordered_set<std::string> train;
  std::unordered_set<std::string> validation;
  std::unordered_set<std::string> test;

  enum class Part { Train, Validation, Test };
  Part part_of(const std::string& patient_id) const;
};

// 7:1:2 split at patient granularity, deterministic under the seed.
PatientSplit split_patients(const std::vector<ExamRecord>& records, std::uint64_t seed);

struct SyntheticConfig {
  int patients = 300;
  double multi_visit_fraction = 0.4;
  int max_visits = 4;  // multi-visit patients draw 2..max_visits uniformly
  int findings = 5;
  int severities = 8;
  double presence_prob = 0.32;
  double change_prob = 0.3;   // per-visit, per-finding independent re-draw
  double noise_level = 0.05;  // Gaussian pixel noise
  Eigen::Index image_size = 32;
  std::uint64_t seed = 1;

  void validate() const {
    if (patients < 1 || findings < 1 || severities < 1 || image_size < 8 ||
        max_visits < 1)
      throw UsageError("synthetic config: sizes must be positive");
    if (change_prob < 0.0 || change_prob > 1.0 || presence_prob < 0.0 ||
        presence_prob > 1.0 || multi_visit_fraction < 0.0 || multi_visit_fraction > 1.0)
      throw UsageError("synthetic config: probabilities must lie in [0,1]");
    if (noise_level < 0.0) throw UsageError("synthetic config: negative noise level");
  }
};

// Template inventory shared by the generator, the label extractor, and the
// image-separability checks.
struct FindingTemplates {
  std::vector<std::string> nouns;      // one per finding
  std::vector<std::string> regions;    // two-token region phrase per finding
  std::vector<std::string> severity;   // one adjective per severity level
  std::vector<std::string> sentence(int finding, int severity_level) const;
};

const FindingTemplates& finding_templates();

// Rectangular image region written by one finding; the mean intensity over
// it is the recoverable presence statistic.
struct FindingRegion {
  Eigen::Index y0, y1, x0, x1;  // half-open
};
FindingRegion finding_region(int finding, int findings_total, Eigen::Index image_size);

// Intensity a present finding adds over its region.
double finding_intensity(int severity, int severities);

std::vector<ExamRecord> generate_synthetic(const SyntheticConfig& cfg);

// Label sets for clinical-efficacy scoring: the finding nouns present in a
// token sequence.
std::vector<std::string> extract_labels(const std::vector<std::string>& tokens);

void save_manifest(const std::vector<ExamRecord>& records,
                   const std::filesystem::path& manifest_path);
std::vector<ExamRecord> load_manifest(const std::filesystem::path& manifest_path);

}  // namespace deltanet
