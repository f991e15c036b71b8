#include "deltanet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "deltanet/runconfig.hpp"

namespace deltanet {

namespace {

constexpr char kMagic[8] = {'D', 'N', 'C', 'K', '0', '0', '0', '1'};

void put_u64(std::ofstream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_i64(std::ofstream& os, std::int64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_f64(std::ofstream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_str(std::ofstream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_array(std::ofstream& os, const ArrayX<double>& a) {
  put_u64(os, static_cast<std::uint64_t>(a.size()));
  os.write(reinterpret_cast<const char*>(a.data()),
           static_cast<std::streamsize>(a.size() * sizeof(double)));
}

std::uint64_t get_u64(std::ifstream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::int64_t get_i64(std::ifstream& is) {
  std::int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
double get_f64(std::ifstream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::string get_str(std::ifstream& is) {
  const auto n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
ArrayX<double> get_array(std::ifstream& is) {
  const auto n = get_u64(is);
  ArrayX<double> a(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return a;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, DeltaNetModelD& model,
                     const AdamD& optimizer, std::uint64_t vocab_fingerprint,
                     const TrainerState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_str(os, serialize_kv(to_kv(model.cfg)));
  put_u64(os, vocab_fingerprint);
  put_i64(os, state.epoch);
  put_i64(os, state.step_in_epoch);
  put_f64(os, state.best_val_bleu4);
  put_i64(os, state.best_epoch);
  put_i64(os, state.epochs_since_best);

  auto params = model.named_parameters();
  put_u64(os, params.size());
  for (auto& p : params) {
    put_str(os, p.name);
    const auto& shape = p.tensor.shape();
    put_u64(os, shape.size());
    for (auto d : shape) put_i64(os, d);
    put_array(os, p.tensor.values());
  }

  put_f64(os, optimizer.lr);
  put_f64(os, optimizer.beta1);
  put_f64(os, optimizer.beta2);
  put_f64(os, optimizer.eps);
  put_i64(os, optimizer.steps);
  put_u64(os, optimizer.m.size());
  for (std::size_t i = 0; i < optimizer.m.size(); ++i) {
    put_array(os, optimizer.m[i]);
    put_array(os, optimizer.v[i]);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw IoError("not a checkpoint: " + path.string());

  LoadedCheckpoint out;
  const ModelConfig cfg = model_config_from_kv(parse_kv(get_str(is)));
  out.vocab_fingerprint = get_u64(is);
  out.state.epoch = static_cast<int>(get_i64(is));
  out.state.step_in_epoch = static_cast<int>(get_i64(is));
  out.state.best_val_bleu4 = get_f64(is);
  out.state.best_epoch = static_cast<int>(get_i64(is));
  out.state.epochs_since_best = static_cast<int>(get_i64(is));

  out.model = std::make_unique<DeltaNetModelD>(cfg);
  auto params = out.model->named_parameters();
  const auto count = get_u64(is);
  if (count != params.size())
    throw IoError("checkpoint: " + std::to_string(count) + " parameters vs model's " +
                  std::to_string(params.size()));
  for (auto& p : params) {
    const auto name = get_str(is);
    if (name != p.name)
      throw IoError("checkpoint: parameter '" + name + "' where '" + p.name + "' expected");
    const auto ndims = get_u64(is);
    Shape shape(ndims);
    for (auto& d : shape) d = static_cast<Eigen::Index>(get_i64(is));
    if (shape != p.tensor.shape())
      throw IoError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                    " vs model's " + shape_str(p.tensor.shape()));
    p.tensor.values() = get_array(is);
  }

  out.optimizer.lr = get_f64(is);
  out.optimizer.beta1 = get_f64(is);
  out.optimizer.beta2 = get_f64(is);
  out.optimizer.eps = get_f64(is);
  out.optimizer.steps = static_cast<long>(get_i64(is));
  const auto moments = get_u64(is);
  for (std::uint64_t i = 0; i < moments; ++i) {
    out.optimizer.m.push_back(get_array(is));
    out.optimizer.v.push_back(get_array(is));
  }
  if (!is) throw IoError("truncated checkpoint " + path.string());
  return out;
}

}  // namespace deltanet
