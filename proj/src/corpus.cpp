#include "deltanet/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace deltanet {

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

Vocabulary Vocabulary::build(const std::vector<const ExamRecord*>& training_records,
                             int min_frequency) {
  if (training_records.empty())
    throw UsageError("vocabulary: empty training corpus");
  std::map<std::string, long> counts;
  for (const auto* rec : training_records)
    for (const auto& tok : rec->report) ++counts[tok];

  std::vector<std::pair<std::string, long>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.id_to_token_ = {kPad, kBos, kEos, kUnk};
  for (const auto& [tok, count] : ordered)
    if (count >= min_frequency) v.id_to_token_.push_back(tok);
  for (int i = 0; i < static_cast<int>(v.id_to_token_.size()); ++i)
    v.token_to_id_[v.id_to_token_[i]] = i;
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size())
    throw IndexError("vocabulary: id " + std::to_string(id) + " outside size " +
                     std::to_string(size()));
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(kBosId);
  for (const auto& w : words) ids.push_back(id_of(w));
  ids.push_back(kEosId);
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> words;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    words.push_back(token_of(id));
  }
  return words;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& tok : id_to_token_) {
    h = fnv1a(h, tok.data(), tok.size());
    h = fnv1a(h, "\n", 1);
  }
  return h;
}

std::pair<std::vector<int>, std::vector<std::uint8_t>> pad_report(const std::vector<int>& ids,
                                                                  std::size_t fixed_length) {
  if (ids.size() > fixed_length)
    throw DimensionError("pad_report: length " + std::to_string(ids.size()) +
                         " exceeds fixed length " + std::to_string(fixed_length));
  std::vector<int> padded = ids;
  padded.resize(fixed_length, kPadId);
  std::vector<std::uint8_t> mask(fixed_length, 0);
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = 1;
  return {padded, mask};
}

PatientSplit::Part PatientSplit::part_of(const std::string& patient_id) const {
  if (train.count(patient_id)) return Part::Train;
  if (validation.count(patient_id)) return Part::Validation;
  if (test.count(patient_id)) return Part::Test;
  throw IndexError("split: unknown patient " + patient_id);
}

PatientSplit split_patients(const std::vector<ExamRecord>& records, std::uint64_t seed) {
  std::vector<std::string> patients;
  std::unordered_set<std::string> seen;
  for (const auto& r : records)
    if (seen.insert(r.patient_id).second) patients.push_back(r.patient_id);
  std::sort(patients.begin(), patients.end());
  if (patients.size() < 10)
    throw UsageError("split: need at least 10 patients, got " +
                     std::to_string(patients.size()));

  std::mt19937_64 rng(seed);
  for (std::size_t i = patients.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> dist(0, i);
    std::swap(patients[i], patients[dist(rng)]);
  }
  const std::size_t n = patients.size();
  const std::size_t n_val = n / 10;
  const std::size_t n_test = n / 5;
  PatientSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_val)
      split.validation.insert(patients[i]);
    else if (i < n_val + n_test)
      split.test.insert(patients[i]);
    else
      split.train.insert(patients[i]);
  }
  return split;
}

const FindingTemplates& finding_templates() {
  static const FindingTemplates t{
      {"opacity", "consolidation", "effusion", "nodule", "fibrosis", "edema",
       "atelectasis", "infiltrate"},
      {"left apex", "right apex", "left base", "right base", "left hilum", "right hilum",
       "cardiac border", "costophrenic angle"},
      {"minimal", "trace", "mild", "slight", "borderline", "moderate", "patchy",
       "prominent", "marked", "severe", "extensive", "diffuse"},
  };
  return t;
}

std::vector<std::string> FindingTemplates::sentence(int finding, int severity_level) const {
  const auto& noun = nouns[static_cast<std::size_t>(finding) % nouns.size()];
  const auto& region = regions[static_cast<std::size_t>(finding) % regions.size()];
  const auto& adj = severity[static_cast<std::size_t>(severity_level) % severity.size()];
  // Severity sits mid-sentence so that every 4-gram of the sentence spans it.
  std::vector<std::string> words;
  std::istringstream is(region);
  std::string part;
  while (is >> part) words.push_back(part);
  words.push_back("shows");
  words.push_back(adj);
  words.push_back(noun);
  words.push_back(".");
  return words;
}

int finding_extent_levels(int severities) { return std::max(1, severities / 2); }

int finding_extent_level(int severity, int severities) {
  const int levels = finding_extent_levels(severities);
  return std::min(levels - 1, severity * levels / severities);
}

double finding_intensity(int severity, int severities) {
  // Expected region-mean statistic. Severity renders as the filled extent
  // of the region (which survives feature standardization), coarsened so
  // that neighbouring severities share one extent and pixels identify
  // severity only partially.
  const int levels = finding_extent_levels(severities);
  return 0.9 * static_cast<double>(finding_extent_level(severity, severities) + 1) /
         static_cast<double>(levels);
}

FindingRegion finding_region(int finding, int findings_total, Eigen::Index image_size) {
  const int cols = 2;
  const int rows = (findings_total + cols - 1) / cols;
  const Eigen::Index bh = image_size / rows;
  const Eigen::Index bw = image_size / cols;
  const Eigen::Index by = (finding / cols) * bh;
  const Eigen::Index bx = (finding % cols) * bw;
  // Inner margin keeps neighbouring regions' receptive fields separable.
  return {by + 1, by + bh - 1, bx + 1, bx + bw - 1};
}

namespace {

struct FindingState {
  bool present = false;
  int severity = 0;
};

std::vector<std::string> render_report(const std::vector<FindingState>& state) {
  std::vector<std::string> words;
  for (std::size_t f = 0; f < state.size(); ++f) {
    if (!state[f].present) continue;
    auto s = finding_templates().sentence(static_cast<int>(f), state[f].severity);
    words.insert(words.end(), s.begin(), s.end());
  }
  if (words.empty()) words = {"no", "acute", "findings", "."};
  return words;
}

ImageGrid render_image(const std::vector<FindingState>& state, const SyntheticConfig& cfg,
                       std::mt19937_64& rng) {
  ImageGrid img;
  img.channels = 1;
  img.height = cfg.image_size;
  img.width = cfg.image_size;
  img.values.assign(static_cast<std::size_t>(img.numel()), 0.0);
  for (std::size_t f = 0; f < state.size(); ++f) {
    if (!state[f].present) continue;
    const auto region = finding_region(static_cast<int>(f), cfg.findings, cfg.image_size);
    const int levels = finding_extent_levels(cfg.severities);
    const int level = finding_extent_level(state[f].severity, cfg.severities);
    const Eigen::Index rows = region.y1 - region.y0;
    const Eigen::Index fill =
        std::max<Eigen::Index>(1, rows * (level + 1) / levels);
    for (Eigen::Index y = region.y0; y < region.y0 + fill; ++y)
      for (Eigen::Index x = region.x0; x < region.x1; ++x) img.at(0, y, x) += 0.9;
  }
  if (cfg.noise_level > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_level);
    for (auto& v : img.values) v += noise(rng);
  }
  return img;
}

}  // namespace

std::vector<ExamRecord> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> severity_draw(0, cfg.severities - 1);

  std::vector<ExamRecord> records;
  for (int p = 0; p < cfg.patients; ++p) {
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%04d", p);
    int visits = 1;
    if (unit(rng) < cfg.multi_visit_fraction && cfg.max_visits > 1) {
      std::uniform_int_distribution<int> extra(2, cfg.max_visits);
      visits = extra(rng);
    }
    std::vector<FindingState> state(static_cast<std::size_t>(cfg.findings));
    for (auto& f : state) {
      f.present = unit(rng) < cfg.presence_prob;
      f.severity = severity_draw(rng);
    }
    for (int v = 0; v < visits; ++v) {
      if (v > 0) {
        // Independent re-draw per finding with the configured probability;
        // the new state may coincide with the old one.
        for (auto& f : state) {
          if (unit(rng) < cfg.change_prob) {
            f.present = unit(rng) < cfg.presence_prob;
            f.severity = severity_draw(rng);
          }
        }
      }
      ExamRecord rec;
      char eid[24];
      std::snprintf(eid, sizeof(eid), "%s_v%02d", pid, v);
      rec.exam_id = eid;
      rec.patient_id = pid;
      rec.visit_index = v;
      rec.report = render_report(state);
      rec.image = render_image(state, cfg, rng);
      for (std::size_t f = 0; f < state.size(); ++f)
        if (state[f].present)
          rec.labels.push_back(
              finding_templates().nouns[f % finding_templates().nouns.size()]);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

std::vector<std::string> extract_labels(const std::vector<std::string>& tokens) {
  const auto& nouns = finding_templates().nouns;
  std::vector<std::string> out;
  for (const auto& noun : nouns)
    if (std::find(tokens.begin(), tokens.end(), noun) != tokens.end()) out.push_back(noun);
  return out;
}

namespace {

std::filesystem::path image_dir_for(const std::filesystem::path& manifest_path) {
  auto dir = manifest_path;
  dir += ".images";
  return dir;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

}  // namespace

void save_manifest(const std::vector<ExamRecord>& records,
                   const std::filesystem::path& manifest_path) {
  const auto img_dir = image_dir_for(manifest_path);
  std::filesystem::create_directories(img_dir);
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError("cannot write manifest " + manifest_path.string());
  mf << "# deltanet-manifest v1\n";
  char buf[64];
  for (const auto& rec : records) {
    const auto img_name = rec.exam_id + ".grid";
    std::ofstream imf(img_dir / img_name);
    if (!imf) throw IoError("cannot write image payload for exam " + rec.exam_id);
    imf << rec.image.channels << " " << rec.image.height << " " << rec.image.width << "\n";
    for (std::size_t i = 0; i < rec.image.values.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", rec.image.values[i]);
      imf << buf << ((i + 1) % static_cast<std::size_t>(rec.image.width) == 0 ? '\n' : ' ');
    }
    mf << rec.exam_id << '\t' << rec.patient_id << '\t' << rec.visit_index << '\t'
       << img_name << '\t';
    for (std::size_t i = 0; i < rec.report.size(); ++i)
      mf << (i ? " " : "") << rec.report[i];
    mf << '\t';
    for (std::size_t i = 0; i < rec.labels.size(); ++i)
      mf << (i ? " " : "") << rec.labels[i];
    mf << '\n';
  }
}

std::vector<ExamRecord> load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw IoError("cannot open manifest " + manifest_path.string());
  const auto img_dir = image_dir_for(manifest_path);
  std::vector<ExamRecord> records;
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, std::unordered_set<int>> visits_per_patient;
  std::string line;
  int line_no = 0;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 6)
      throw IoError("manifest line " + std::to_string(line_no) + ": expected 6 fields, got " +
                    std::to_string(fields.size()));
    ExamRecord rec;
    rec.exam_id = fields[0];
    rec.patient_id = fields[1];
    try {
      rec.visit_index = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw IoError("manifest line " + std::to_string(line_no) + ": bad visit index '" +
                    fields[2] + "'");
    }
    if (!ids.insert(rec.exam_id).second)
      throw IoError("manifest line " + std::to_string(line_no) + ": duplicate exam id " +
                    rec.exam_id);
    if (!visits_per_patient[rec.patient_id].insert(rec.visit_index).second)
      throw IoError("manifest line " + std::to_string(line_no) + ": duplicate visit " +
                    std::to_string(rec.visit_index) + " for patient " + rec.patient_id);
    rec.report = split_ws(fields[4]);
    if (rec.report.empty())
      throw IoError("manifest line " + std::to_string(line_no) + ": empty report for exam " +
                    rec.exam_id);
    rec.labels = split_ws(fields[5]);

    const auto img_path = img_dir / fields[3];
    std::ifstream imf(img_path);
    if (!imf)
      throw IoError("manifest line " + std::to_string(line_no) + ": missing image payload " +
                    img_path.string() + " for exam " + rec.exam_id);
    Eigen::Index c = 0, h = 0, w = 0;
    if (!(imf >> c >> h >> w) || c < 1 || h < 1 || w < 1)
      throw IoError("image payload " + img_path.string() + ": bad shape header");
    rec.image.channels = c;
    rec.image.height = h;
    rec.image.width = w;
    rec.image.values.resize(static_cast<std::size_t>(c * h * w));
    for (auto& v : rec.image.values)
      if (!(imf >> v))
        throw IoError("image payload " + img_path.string() + ": truncated values");
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace deltanet
