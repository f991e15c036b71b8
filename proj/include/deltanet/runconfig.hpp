#pragma once

// Key=value run configuration: one declarative file per run plus flag
// overrides (flags > file > defaults). The same serialization embeds the
// model configuration into checkpoints.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "deltanet/corpus.hpp"
#include "deltanet/model.hpp"
#include "deltanet/retrieval.hpp"

namespace deltanet {

using KvMap = std::map<std::string, std::string>;

KvMap parse_kv(const std::string& text);
std::string serialize_kv(const KvMap& kv);
KvMap load_kv_file(const std::filesystem::path& path);

// 64-bit FNV-1a over the canonical serialization; identifies a run setup.
std::uint64_t kv_fingerprint(const KvMap& kv);

KvMap to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const KvMap& kv);

KvMap to_kv(const SyntheticConfig& cfg);
SyntheticConfig synthetic_config_from_kv(const KvMap& kv);

enum class ConditionSource { SelfHistory, Retrieved };

inline const char* to_string(ConditionSource s) {
  return s == ConditionSource::SelfHistory ? "self" : "others";
}

struct TrainingOptions {
  double lr = 5e-4;
  int batch_size = 32;
  int epochs = 100;
  int patience = 10;
  int min_token_frequency = 1;
};

struct RetrievalOptions {
  FeatureProvider provider = FeatureProvider::Pixel;
  int k = 3;
  ConditionSource source = ConditionSource::Retrieved;
  bool exclude_same_patient = true;
};

// Everything a CLI command needs; parsed from file + flags.
struct RunConfig {
  std::string command;
  std::filesystem::path manifest;
  std::filesystem::path out_dir = ".";
  std::filesystem::path checkpoint;
  std::filesystem::path index_path;
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainingOptions training;
  RetrievalOptions retrieval;
  SyntheticConfig synth;

  KvMap to_kv() const;
  static RunConfig from_kv(const KvMap& kv);
  std::uint64_t fingerprint() const { return kv_fingerprint(to_kv()); }
};

}  // namespace deltanet
