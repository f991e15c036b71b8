#pragma once

// Conditional-exam selection: patient self-history and cross-patient top-k
// cosine retrieval over visual embeddings, sourced strictly from the
// training split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deltanet/corpus.hpp"
#include "deltanet/layers.hpp"

namespace deltanet {

enum class FeatureProvider { Pixel, Encoder };

inline const char* to_string(FeatureProvider p) {
  return p == FeatureProvider::Pixel ? "pixel" : "encoder";
}

struct FeatureVector {
  std::vector<double> values;  // unit L2 norm
  bool degenerate = false;     // blank input mapped to the first basis direction
};

// Pixel provider: average-pool to a fixed grid, standardize, flatten,
// normalize. Encoder provider: mean-pooled frozen ConvEncoder features.
FeatureVector extract_features_pixel(const ImageGrid& image, Eigen::Index grid = 16);
FeatureVector extract_features_encoder(const ImageGrid& image,
                                       const ConvEncoder<double>& encoder);

double cosine(const std::vector<double>& u, const std::vector<double>& v);

struct RetrievalHit {
  std::string exam_id;
  std::string patient_id;
  double similarity = 0.0;
};

struct RetrievalResult {
  std::vector<RetrievalHit> hits;  // similarity-descending, ties by exam id
  bool truncated = false;          // k exceeded the index size
};

class FeatureIndex {
public:
  struct Entry {
    std::string exam_id;
    std::string patient_id;
    std::vector<double> embedding;  // unit norm
  };

  FeatureIndex() = default;
  FeatureIndex(std::string provider_tag, Eigen::Index dim, std::uint64_t split_fingerprint);

  void add(Entry entry);
  std::size_t size() const { return entries_.size(); }
  Eigen::Index dim() const { return dim_; }
  const std::string& provider_tag() const { return provider_tag_; }
  std::uint64_t split_fingerprint() const { return split_fingerprint_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Exhaustive scan; excludes the query exam id and, when
  // `exclude_patient` is set, every exam of that patient.
  RetrievalResult query(const std::vector<double>& features, std::size_t k,
                        const std::string& exclude_exam_id,
                        const std::optional<std::string>& exclude_patient) const;

  void save(const std::filesystem::path& path) const;
  static FeatureIndex load(const std::filesystem::path& path);

private:
  std::string provider_tag_;
  Eigen::Index dim_ = 0;
  std::uint64_t split_fingerprint_ = 0;
  std::vector<Entry> entries_;
};

// Fingerprint of the training-exam id set, used to tie an index to a split.
std::uint64_t split_fingerprint(const std::vector<std::string>& training_exam_ids);

// Build an index over the training split only.
FeatureIndex build_index(const std::vector<ExamRecord>& records, const PatientSplit& split,
                         FeatureProvider provider, const ConvEncoder<double>* encoder);

// Up to L most recent visits of the patient strictly before the target,
// most recent first. An empty result directs the caller to retrieval.
struct HistoryResult {
  std::vector<const ExamRecord*> conditions;
  bool empty() const { return conditions.empty(); }
};
HistoryResult history_conditions(const std::vector<ExamRecord>& records,
                                 const std::string& patient_id, int target_visit, int limit);

}  // namespace deltanet
