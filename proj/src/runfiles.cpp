#include "deltanet/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace deltanet {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <class T>
T get_or(const KvMap& kv, const std::string& key, T fallback);

template <>
std::string get_or(const KvMap& kv, const std::string& key, std::string fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

template <>
long long get_or(const KvMap& kv, const std::string& key, long long fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': bad integer '" + it->second + "'");
  }
}

template <>
double get_or(const KvMap& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': bad number '" + it->second + "'");
  }
}

template <>
bool get_or(const KvMap& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw UsageError("config key '" + key + "': bad boolean '" + it->second + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

KvMap parse_kv(const std::string& text) {
  KvMap kv;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                       stripped + "'");
    kv[trim(stripped.substr(0, eq))] = trim(stripped.substr(eq + 1));
  }
  return kv;
}

std::string serialize_kv(const KvMap& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

KvMap load_kv_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_kv(ss.str());
}

std::uint64_t kv_fingerprint(const KvMap& kv) {
  const std::string s = serialize_kv(kv);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

KvMap to_kv(const ModelConfig& cfg) {
  KvMap kv;
  kv["model.hidden"] = std::to_string(cfg.hidden);
  kv["model.visual_positions"] = std::to_string(cfg.visual_positions);
  kv["model.vocab"] = std::to_string(cfg.vocab);
  kv["model.heads"] = std::to_string(cfg.heads);
  kv["model.max_conditions"] = std::to_string(cfg.max_conditions);
  kv["model.cond_report_len"] = std::to_string(cfg.cond_report_len);
  kv["model.max_decode_len"] = std::to_string(cfg.max_decode_len);
  kv["model.mode"] = to_string(cfg.mode);
  kv["model.variant"] = to_string(cfg.variant);
  kv["model.per_condition_gate_bias"] = cfg.per_condition_gate_bias ? "true" : "false";
  kv["model.gate_pinned_to_one"] = cfg.gate_pinned_to_one ? "true" : "false";
  kv["model.seed"] = std::to_string(cfg.seed);
  kv["model.image_channels"] = std::to_string(cfg.image_channels);
  kv["model.image_height"] = std::to_string(cfg.image_height);
  kv["model.image_width"] = std::to_string(cfg.image_width);
  kv["model.conv_channels"] = std::to_string(cfg.conv_channels);
  kv["model.conv_stages"] = std::to_string(cfg.conv_stages);
  kv["model.bilstm_layers"] = std::to_string(cfg.bilstm_layers);
  return kv;
}

ModelConfig model_config_from_kv(const KvMap& kv) {
  ModelConfig cfg;
  cfg.hidden = get_or<long long>(kv, "model.hidden", cfg.hidden);
  cfg.visual_positions =
      get_or<long long>(kv, "model.visual_positions", cfg.visual_positions);
  cfg.vocab = get_or<long long>(kv, "model.vocab", cfg.vocab);
  cfg.heads = get_or<long long>(kv, "model.heads", cfg.heads);
  cfg.max_conditions =
      static_cast<int>(get_or<long long>(kv, "model.max_conditions", cfg.max_conditions));
  cfg.cond_report_len = get_or<long long>(kv, "model.cond_report_len", cfg.cond_report_len);
  cfg.max_decode_len =
      static_cast<int>(get_or<long long>(kv, "model.max_decode_len", cfg.max_decode_len));
  const std::string mode = get_or<std::string>(kv, "model.mode", "basic");
  if (mode == "basic")
    cfg.mode = ModelMode::Basic;
  else if (mode == "delta1")
    cfg.mode = ModelMode::Delta1;
  else if (mode == "deltaL")
    cfg.mode = ModelMode::DeltaL;
  else
    throw UsageError("config: unknown model.mode '" + mode + "'");
  const std::string variant = get_or<std::string>(kv, "model.variant", "full");
  if (variant == "full")
    cfg.variant = ConditionalVariant::Full;
  else if (variant == "ic")
    cfg.variant = ConditionalVariant::CondImage;
  else if (variant == "rc")
    cfg.variant = ConditionalVariant::CondReport;
  else if (variant == "icrc")
    cfg.variant = ConditionalVariant::CondBoth;
  else
    throw UsageError("config: unknown model.variant '" + variant + "'");
  cfg.per_condition_gate_bias = get_or<bool>(kv, "model.per_condition_gate_bias", false);
  cfg.gate_pinned_to_one = get_or<bool>(kv, "model.gate_pinned_to_one", false);
  cfg.seed = static_cast<std::uint64_t>(get_or<long long>(kv, "model.seed", 1));
  cfg.image_channels = get_or<long long>(kv, "model.image_channels", cfg.image_channels);
  cfg.image_height = get_or<long long>(kv, "model.image_height", cfg.image_height);
  cfg.image_width = get_or<long long>(kv, "model.image_width", cfg.image_width);
  cfg.conv_channels = get_or<long long>(kv, "model.conv_channels", cfg.conv_channels);
  cfg.conv_stages = static_cast<int>(get_or<long long>(kv, "model.conv_stages", cfg.conv_stages));
  cfg.bilstm_layers =
      static_cast<int>(get_or<long long>(kv, "model.bilstm_layers", cfg.bilstm_layers));
  return cfg;
}

KvMap to_kv(const SyntheticConfig& cfg) {
  KvMap kv;
  kv["synth.patients"] = std::to_string(cfg.patients);
  kv["synth.multi_visit_fraction"] = fmt_double(cfg.multi_visit_fraction);
  kv["synth.max_visits"] = std::to_string(cfg.max_visits);
  kv["synth.findings"] = std::to_string(cfg.findings);
  kv["synth.severities"] = std::to_string(cfg.severities);
  kv["synth.presence_prob"] = fmt_double(cfg.presence_prob);
  kv["synth.change_prob"] = fmt_double(cfg.change_prob);
  kv["synth.noise_level"] = fmt_double(cfg.noise_level);
  kv["synth.image_size"] = std::to_string(cfg.image_size);
  kv["synth.seed"] = std::to_string(cfg.seed);
  return kv;
}

SyntheticConfig synthetic_config_from_kv(const KvMap& kv) {
  SyntheticConfig cfg;
  cfg.patients = static_cast<int>(get_or<long long>(kv, "synth.patients", cfg.patients));
  cfg.multi_visit_fraction =
      get_or<double>(kv, "synth.multi_visit_fraction", cfg.multi_visit_fraction);
  cfg.max_visits = static_cast<int>(get_or<long long>(kv, "synth.max_visits", cfg.max_visits));
  cfg.findings = static_cast<int>(get_or<long long>(kv, "synth.findings", cfg.findings));
  cfg.severities = static_cast<int>(get_or<long long>(kv, "synth.severities", cfg.severities));
  cfg.presence_prob = get_or<double>(kv, "synth.presence_prob", cfg.presence_prob);
  cfg.change_prob = get_or<double>(kv, "synth.change_prob", cfg.change_prob);
  cfg.noise_level = get_or<double>(kv, "synth.noise_level", cfg.noise_level);
  cfg.image_size = get_or<long long>(kv, "synth.image_size", cfg.image_size);
  cfg.seed = static_cast<std::uint64_t>(get_or<long long>(kv, "synth.seed", 1));
  return cfg;
}

KvMap RunConfig::to_kv() const {
  KvMap kv = deltanet::to_kv(model);
  const KvMap synth_kv = deltanet::to_kv(synth);
  kv.insert(synth_kv.begin(), synth_kv.end());
  kv["command"] = command;
  kv["manifest"] = manifest.string();
  kv["out_dir"] = out_dir.string();
  kv["checkpoint"] = checkpoint.string();
  kv["index"] = index_path.string();
  kv["seed"] = std::to_string(seed);
  kv["train.lr"] = fmt_double(training.lr);
  kv["train.batch_size"] = std::to_string(training.batch_size);
  kv["train.epochs"] = std::to_string(training.epochs);
  kv["train.patience"] = std::to_string(training.patience);
  kv["train.min_token_frequency"] = std::to_string(training.min_token_frequency);
  kv["retrieval.provider"] = to_string(retrieval.provider);
  kv["retrieval.k"] = std::to_string(retrieval.k);
  kv["retrieval.source"] = to_string(retrieval.source);
  kv["retrieval.exclude_same_patient"] = retrieval.exclude_same_patient ? "true" : "false";
  return kv;
}

RunConfig RunConfig::from_kv(const KvMap& kv) {
  RunConfig rc;
  rc.command = get_or<std::string>(kv, "command", "");
  rc.manifest = get_or<std::string>(kv, "manifest", "");
  rc.out_dir = get_or<std::string>(kv, "out_dir", ".");
  rc.checkpoint = get_or<std::string>(kv, "checkpoint", "");
  rc.index_path = get_or<std::string>(kv, "index", "");
  rc.seed = static_cast<std::uint64_t>(get_or<long long>(kv, "seed", 1));
  rc.model = model_config_from_kv(kv);
  rc.synth = synthetic_config_from_kv(kv);
  rc.training.lr = get_or<double>(kv, "train.lr", rc.training.lr);
  rc.training.batch_size =
      static_cast<int>(get_or<long long>(kv, "train.batch_size", rc.training.batch_size));
  rc.training.epochs =
      static_cast<int>(get_or<long long>(kv, "train.epochs", rc.training.epochs));
  rc.training.patience =
      static_cast<int>(get_or<long long>(kv, "train.patience", rc.training.patience));
  rc.training.min_token_frequency = static_cast<int>(
      get_or<long long>(kv, "train.min_token_frequency", rc.training.min_token_frequency));
  const std::string provider = get_or<std::string>(kv, "retrieval.provider", "pixel");
  if (provider == "pixel")
    rc.retrieval.provider = FeatureProvider::Pixel;
  else if (provider == "encoder")
    rc.retrieval.provider = FeatureProvider::Encoder;
  else
    throw UsageError("config: unknown retrieval.provider '" + provider + "'");
  rc.retrieval.k = static_cast<int>(get_or<long long>(kv, "retrieval.k", rc.retrieval.k));
  const std::string source = get_or<std::string>(kv, "retrieval.source", "others");
  if (source == "self")
    rc.retrieval.source = ConditionSource::SelfHistory;
  else if (source == "others")
    rc.retrieval.source = ConditionSource::Retrieved;
  else
    throw UsageError("config: unknown retrieval.source '" + source + "'");
  rc.retrieval.exclude_same_patient =
      get_or<bool>(kv, "retrieval.exclude_same_patient", true);
  return rc;
}

}  // namespace deltanet
