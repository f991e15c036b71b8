#include "deltanet/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace deltanet {

namespace {

void l2_normalize(std::vector<double>& v, bool& degenerate) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {
    // Blank input: fall back to the first basis direction and flag it.
    std::fill(v.begin(), v.end(), 0.0);
    if (!v.empty()) v[0] = 1.0;
    degenerate = true;
    return;
  }
  for (double& x : v) x /= norm;
}

}  // namespace

FeatureVector extract_features_pixel(const ImageGrid& image, Eigen::Index grid) {
  FeatureVector out;
  out.values.assign(static_cast<std::size_t>(grid * grid), 0.0);
  // Average-pool each channel onto the grid, then average channels.
  for (Eigen::Index gy = 0; gy < grid; ++gy) {
    for (Eigen::Index gx = 0; gx < grid; ++gx) {
      const Eigen::Index y0 = gy * image.height / grid;
      const Eigen::Index y1 = std::max<Eigen::Index>(y0 + 1, (gy + 1) * image.height / grid);
      const Eigen::Index x0 = gx * image.width / grid;
      const Eigen::Index x1 = std::max<Eigen::Index>(x0 + 1, (gx + 1) * image.width / grid);
      double acc = 0.0;
      Eigen::Index count = 0;
      for (Eigen::Index c = 0; c < image.channels; ++c)
        for (Eigen::Index y = y0; y < y1 && y < image.height; ++y)
          for (Eigen::Index x = x0; x < x1 && x < image.width; ++x) {
            acc += image.at(c, y, x);
            ++count;
          }
      out.values[static_cast<std::size_t>(gy * grid + gx)] =
          count ? acc / static_cast<double>(count) : 0.0;
    }
  }
  // Standardize before normalizing so global brightness drops out.
  double mean = 0.0;
  for (double v : out.values) mean += v;
  mean /= static_cast<double>(out.values.size());
  double var = 0.0;
  for (double& v : out.values) {
    v -= mean;
    var += v * v;
  }
  var /= static_cast<double>(out.values.size());
  if (var > 1e-18)
    for (double& v : out.values) v /= std::sqrt(var);
  l2_normalize(out.values, out.degenerate);
  return out;
}

FeatureVector extract_features_encoder(const ImageGrid& image,
                                       const ConvEncoder<double>& encoder) {
  FeatureVector out;
  auto pooled = mean_pool_rows(encoder.encode(image.tensor()));
  out.values.assign(pooled.values().data(), pooled.values().data() + pooled.numel());
  l2_normalize(out.values, out.degenerate);
  return out;
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size())
    throw DimensionError("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  double nu = 0.0, nv = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    nu += u[i] * u[i];
    nv += v[i] * v[i];
    dot += u[i] * v[i];
  }
  if (nu < 1e-24 || nv < 1e-24) throw UsageError("cosine: zero vector");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

FeatureIndex::FeatureIndex(std::string provider_tag, Eigen::Index dim,
                           std::uint64_t fingerprint)
    : provider_tag_(std::move(provider_tag)), dim_(dim), split_fingerprint_(fingerprint) {}

void FeatureIndex::add(Entry entry) {
  if (static_cast<Eigen::Index>(entry.embedding.size()) != dim_)
    throw DimensionError("index: embedding of dim " + std::to_string(entry.embedding.size()) +
                         " vs index dim " + std::to_string(dim_));
  double norm = 0.0;
  for (double v : entry.embedding) norm += v * v;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-9)
    throw UsageError("index: embedding for " + entry.exam_id + " is not unit norm");
  entries_.push_back(std::move(entry));
}

RetrievalResult FeatureIndex::query(const std::vector<double>& features, std::size_t k,
                                    const std::string& exclude_exam_id,
                                    const std::optional<std::string>& exclude_patient) const {
  if (k < 1) throw UsageError("retrieve: k must be at least 1");
  std::vector<RetrievalHit> hits;
  hits.reserve(entries_.size());
  for (const auto& e : entries_) {
    if (e.exam_id == exclude_exam_id) continue;
    if (exclude_patient && e.patient_id == *exclude_patient) continue;
    hits.push_back({e.exam_id, e.patient_id, cosine(features, e.embedding)});
  }
  std::sort(hits.begin(), hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.exam_id < b.exam_id;
  });
  RetrievalResult result;
  result.truncated = hits.size() < k;
  if (hits.size() > k) hits.resize(k);
  result.hits = std::move(hits);
  return result;
}

namespace {
constexpr char kIndexMagic[8] = {'D', 'N', 'I', 'X', '0', '0', '0', '1'};

void write_string(std::ofstream& os, const std::string& s) {
  const std::uint32_t n = static_cast<std::uint32_t>(s.size());
  os.write(reinterpret_cast<const char*>(&n), sizeof(n));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is) {
  std::uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}
}  // namespace

void FeatureIndex::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write index " + path.string());
  os.write(kIndexMagic, sizeof(kIndexMagic));
  write_string(os, provider_tag_);
  const std::uint64_t dim = static_cast<std::uint64_t>(dim_);
  os.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  os.write(reinterpret_cast<const char*>(&split_fingerprint_), sizeof(split_fingerprint_));
  const std::uint64_t count = entries_.size();
  os.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& e : entries_) {
    write_string(os, e.exam_id);
    write_string(os, e.patient_id);
    os.write(reinterpret_cast<const char*>(e.embedding.data()),
             static_cast<std::streamsize>(e.embedding.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing index " + path.string());
}

FeatureIndex FeatureIndex::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open index " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0)
    throw IoError("not an index snapshot: " + path.string());
  const std::string tag = read_string(is);
  std::uint64_t dim = 0, fingerprint = 0, count = 0;
  is.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  is.read(reinterpret_cast<char*>(&fingerprint), sizeof(fingerprint));
  is.read(reinterpret_cast<char*>(&count), sizeof(count));
  FeatureIndex index(tag, static_cast<Eigen::Index>(dim), fingerprint);
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.exam_id = read_string(is);
    e.patient_id = read_string(is);
    e.embedding.resize(dim);
    is.read(reinterpret_cast<char*>(e.embedding.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    index.entries_.push_back(std::move(e));
  }
  if (!is) throw IoError("truncated index snapshot " + path.string());
  return index;
}

std::uint64_t split_fingerprint(const std::vector<std::string>& training_exam_ids) {
  auto ids = training_exam_ids;
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& id : ids) {
    for (char c : id) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    h ^= '\n';
    h *= 0x100000001b3ull;
  }
  return h;
}

FeatureIndex build_index(const std::vector<ExamRecord>& records, const PatientSplit& split,
                         FeatureProvider provider, const ConvEncoder<double>* encoder) {
  if (provider == FeatureProvider::Encoder && encoder == nullptr)
    throw UsageError("build_index: encoder provider needs a frozen encoder");
  std::vector<std::string> train_ids;
  for (const auto& r : records)
    if (split.part_of(r.patient_id) == PatientSplit::Part::Train)
      train_ids.push_back(r.exam_id);

  Eigen::Index dim = 0;
  std::optional<FeatureIndex> index;
  for (const auto& r : records) {
    if (split.part_of(r.patient_id) != PatientSplit::Part::Train) continue;
    FeatureVector f = provider == FeatureProvider::Pixel
                          ? extract_features_pixel(r.image)
                          : extract_features_encoder(r.image, *encoder);
    if (!index) {
      dim = static_cast<Eigen::Index>(f.values.size());
      index.emplace(to_string(provider), dim, split_fingerprint(train_ids));
    }
    index->add({r.exam_id, r.patient_id, std::move(f.values)});
  }
  if (!index) throw UsageError("build_index: no training exams");
  return std::move(*index);
}

HistoryResult history_conditions(const std::vector<ExamRecord>& records,
                                 const std::string& patient_id, int target_visit, int limit) {
  if (limit < 1) throw UsageError("history_conditions: limit must be at least 1");
  std::vector<const ExamRecord*> prior;
  for (const auto& r : records)
    if (r.patient_id == patient_id && r.visit_index < target_visit) prior.push_back(&r);
  std::sort(prior.begin(), prior.end(), [](const ExamRecord* a, const ExamRecord* b) {
    return a->visit_index > b->visit_index;  // most recent first
  });
  if (static_cast<int>(prior.size()) > limit) prior.resize(static_cast<std::size_t>(limit));
  return {std::move(prior)};
}

}  // namespace deltanet
