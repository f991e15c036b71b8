// deltanet command-line driver: synth, train, generate, evaluate,
// retrieve, gradcheck, experiment. Every command takes an optional
// key=value config file plus flag overrides (flags > file > defaults) and
// a mandatory seed; outputs are byte-stable for a fixed config.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "deltanet/checkpoint.hpp"
#include "deltanet/experiments.hpp"
#include "deltanet/gradcheck.hpp"
#include "deltanet/metrics.hpp"
#include "deltanet/runconfig.hpp"

using namespace deltanet;
using nlohmann::json;

namespace {

int exit_code_for(const Error& e) {
  const std::string cat = e.category();
  if (cat == "usage") return 2;
  if (cat == "dimension") return 3;
  if (cat == "index") return 4;
  if (cat == "numeric") return 5;
  if (cat == "io") return 6;
  return 1;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct CommonFlags {
  std::string config_file;
  RunConfig rc;
  std::string manifest_str;
  std::string out_dir_str;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value run-config file");
    cmd->add_option("--seed", rc.seed, "run seed (mandatory; no wall-clock defaults)");
    cmd->add_option("--manifest", manifest_str, "corpus manifest path");
    cmd->add_option("--out-dir", out_dir_str, "output directory");
  }

  // Only the file-vs-default layer; flag values were already written into
  // rc by CLI11, so they win over the file when present.
  void merge_file_under_flags(const CLI::App* cmd) {
    if (config_file.empty()) {
      if (!manifest_str.empty()) rc.manifest = manifest_str;
      if (!out_dir_str.empty()) rc.out_dir = out_dir_str;
      return;
    }
    RunConfig file_rc = RunConfig::from_kv(load_kv_file(config_file));
    // Start from the file, then re-apply explicitly passed flags.
    RunConfig flags_rc = rc;
    rc = file_rc;
    if (cmd->count("--seed")) rc.seed = flags_rc.seed;
    if (!manifest_str.empty()) rc.manifest = manifest_str;
    if (!out_dir_str.empty()) rc.out_dir = out_dir_str;
  }
};

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

std::string format_eval(const EvaluationReport& rep, std::uint64_t fingerprint) {
  char buf[64];
  std::ostringstream os;
  os << "# deltanet-eval v1\n";
  os << "corpus_size: " << rep.corpus_size << "\n";
  os << "config_fingerprint: " << hex64(fingerprint) << "\n";
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    os << name << ": " << buf << "\n";
  };
  line("BLEU-1", rep.bleu1);
  line("BLEU-2", rep.bleu2);
  line("BLEU-3", rep.bleu3);
  line("BLEU-4", rep.bleu4);
  line("ROUGE-L", rep.rouge_l);
  line("CIDEr-D", rep.cider);
  if (rep.has_clinical) {
    line("CE-precision", rep.clinical.precision);
    line("CE-recall", rep.clinical.recall);
    line("CE-F1", rep.clinical.f1);
  }
  return os.str();
}

DatasetOptions dataset_options_from(const RunConfig& rc, int conditions) {
  DatasetOptions opts;
  opts.source = rc.retrieval.source;
  opts.conditions = conditions;
  opts.provider = rc.retrieval.provider;
  opts.exclude_same_patient = rc.retrieval.exclude_same_patient;
  opts.split_seed = rc.seed;
  opts.min_token_frequency = rc.training.min_token_frequency;
  return opts;
}

int conditions_for_mode(const RunConfig& rc) {
  switch (rc.model.mode) {
    case ModelMode::Basic: return 0;
    case ModelMode::Delta1: return 1;
    case ModelMode::DeltaL: return rc.model.max_conditions;
  }
  return 0;
}

int cmd_synth(RunConfig& rc) {
  if (rc.manifest.empty()) throw UsageError("synth: --manifest output path required");
  rc.synth.seed = rc.seed;
  auto records = generate_synthetic(rc.synth);
  save_manifest(records, rc.manifest);

  std::vector<std::size_t> lengths;
  std::map<std::string, int> visits;
  for (const auto& r : records) {
    lengths.push_back(r.report.size());
    ++visits[r.patient_id];
  }
  std::sort(lengths.begin(), lengths.end());
  double mean = 0;
  for (auto l : lengths) mean += static_cast<double>(l);
  mean /= static_cast<double>(lengths.size());
  std::map<int, int> histogram;
  for (const auto& [pid, count] : visits) ++histogram[count];

  std::cout << "manifest: " << rc.manifest.string() << "\n";
  std::cout << "exams: " << records.size() << "  patients: " << visits.size() << "\n";
  std::cout << "report length max/median/mean: " << lengths.back() << "/"
            << lengths[lengths.size() / 2] << "/" << mean << "\n";
  std::cout << "visit-count histogram:\n";
  for (const auto& [count, patients] : histogram)
    std::cout << "  " << count << " visit(s): " << patients << " patients\n";
  std::cout << "config_fingerprint: " << hex64(rc.fingerprint()) << "\n";
  return 0;
}

int cmd_train(RunConfig& rc) {
  if (rc.manifest.empty()) throw UsageError("train: --manifest required");
  auto records = load_manifest(rc.manifest);
  auto data =
      prepare_dataset(std::move(records), dataset_options_from(rc, conditions_for_mode(rc)));

  ModelConfig cfg = adapt_model_config(rc.model, data);
  cfg.seed = rc.seed;
  DeltaNetModelD model(cfg);
  Trainer trainer(model, data.vocab, rc.training, rc.seed);
  trainer.set_data(data.train, data.validation);

  std::filesystem::create_directories(rc.out_dir);
  std::ofstream log(rc.out_dir / "train.log");
  log << "# deltanet train log\n";
  log << "config_fingerprint: " << hex64(rc.fingerprint()) << "\n";
  log << "vocab: " << data.vocab.size() << "  train items: " << data.train.size()
      << "  val items: " << data.validation.size() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  trainer.fit(&log);
  const auto dt =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - t0);
  log << "elapsed_seconds: " << dt.count() << "\n";

  const auto ckpt = rc.out_dir / "model.dnck";
  save_checkpoint(ckpt, model, trainer.optimizer(), data.vocab.fingerprint(), trainer.state());
  std::cout << "checkpoint: " << ckpt.string() << "\n";
  std::cout << "best_val_bleu4: " << trainer.state().best_val_bleu4 << "\n";
  return 0;
}

PatientSplit::Part part_from_string(const std::string& s) {
  if (s == "train") return PatientSplit::Part::Train;
  if (s == "val" || s == "validation") return PatientSplit::Part::Validation;
  if (s == "test") return PatientSplit::Part::Test;
  throw UsageError("unknown split '" + s + "' (use train|val|test)");
}

int cmd_generate(RunConfig& rc, const std::string& split, const std::string& out_file,
                 const std::string& strategy, int beam_width, bool with_trace) {
  if (rc.manifest.empty()) throw UsageError("generate: --manifest required");
  if (rc.checkpoint.empty()) throw UsageError("generate: --checkpoint required");
  auto loaded = load_checkpoint(rc.checkpoint);
  auto records = load_manifest(rc.manifest);
  const int conditions =
      loaded.model->cfg.mode == ModelMode::Basic
          ? 0
          : (loaded.model->cfg.mode == ModelMode::Delta1 ? 1
                                                         : loaded.model->cfg.max_conditions);
  auto data = prepare_dataset(std::move(records), dataset_options_from(rc, conditions));
  if (data.vocab.fingerprint() != loaded.vocab_fingerprint)
    throw UsageError(
        "generate: manifest vocabulary does not match the checkpoint "
        "(fingerprint mismatch; check --manifest and --seed)");

  const auto part = part_from_string(split);
  const std::vector<ResolvedExam>* items = &data.test;
  if (part == PatientSplit::Part::Train) items = &data.train;
  if (part == PatientSplit::Part::Validation) items = &data.validation;

  Trainer driver(*loaded.model, data.vocab, rc.training, rc.seed);
  const auto mode = strategy == "beam" ? DecodeStrategy::Beam : DecodeStrategy::Greedy;

  std::ofstream os(out_file);
  if (!os) throw IoError("cannot write " + out_file);
  for (const auto& item : *items) {
    auto gen = loaded.model->generate(item.exam->image.tensor(),
                                      driver.condition_inputs(item), mode, beam_width);
    json j;
    j["exam_id"] = item.exam->exam_id;
    j["tokens"] = gen.tokens;
    std::ostringstream text;
    auto words = data.vocab.decode(gen.tokens);
    for (std::size_t i = 0; i < words.size(); ++i) text << (i ? " " : "") << words[i];
    j["text"] = text.str();
    j["logprob"] = gen.logprob;
    json conds = json::array();
    for (const auto* c : item.conditions) conds.push_back(c->exam_id);
    j["conditions"] = conds;
    if (with_trace && !gen.trace.steps.empty()) {
      auto cells = export_trace(gen.trace, loaded.model->cfg, 0, gen.trace.steps.size());
      json steps = json::array();
      for (const auto& cell : cells) {
        json c;
        c["step"] = cell.step;
        c["token"] = cell.token;
        c["bank"] = cell.bank;
        c["condition"] = cell.condition;
        c["position"] = static_cast<long long>(cell.position);
        c["weight"] = cell.weight;
        steps.push_back(c);
      }
      j["trace"] = steps;
    }
    os << j.dump() << "\n";
  }
  std::cout << "generated " << items->size() << " reports -> " << out_file << "\n";
  return 0;
}

int cmd_evaluate(RunConfig& rc, const std::string& candidates_file,
                 const std::string& out_file, bool clinical) {
  if (rc.manifest.empty()) throw UsageError("evaluate: --manifest (references) required");
  auto records = load_manifest(rc.manifest);
  std::map<std::string, const ExamRecord*> by_id;
  for (const auto& r : records) by_id[r.exam_id] = &r;

  // Candidate source: a generation JSONL file, or another manifest.
  std::vector<std::pair<std::string, TokenSeq>> candidates;
  std::ifstream is(candidates_file);
  if (!is) throw IoError("cannot open candidates " + candidates_file);
  std::string first_line;
  std::getline(is, first_line);
  if (first_line.rfind("# deltanet-manifest", 0) == 0) {
    for (const auto& r : load_manifest(candidates_file))
      candidates.emplace_back(r.exam_id, r.report);
  } else {
    is.clear();
    is.seekg(0);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      TokenSeq words;
      std::istringstream ws(j["text"].get<std::string>());
      std::string w;
      while (ws >> w) words.push_back(w);
      candidates.emplace_back(j["exam_id"].get<std::string>(), words);
    }
  }
  if (candidates.empty()) throw UsageError("evaluate: no candidates found");

  std::vector<TokenSeq> cands, refs;
  std::vector<std::vector<std::string>> pred_labels, ref_labels;
  for (const auto& [id, words] : candidates) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw IndexError("evaluate: candidate exam " + id + " not in manifest");
    cands.push_back(words);
    refs.push_back(it->second->report);
    if (clinical) {
      pred_labels.push_back(extract_labels(words));
      ref_labels.push_back(it->second->labels);
    }
  }
  auto rep = evaluate_corpus(cands, refs);
  if (clinical) {
    rep.has_clinical = true;
    rep.clinical = clinical_efficacy(pred_labels, ref_labels);
  }
  const auto text = format_eval(rep, rc.fingerprint());
  if (out_file.empty())
    std::cout << text;
  else {
    write_text_file(out_file, text);
    std::cout << "evaluation -> " << out_file << "\n";
  }
  return 0;
}

int cmd_retrieve(RunConfig& rc, const std::string& out_file, int k,
                 const std::string& queries_split, const std::string& save_index,
                 const std::string& load_index) {
  if (rc.manifest.empty()) throw UsageError("retrieve: --manifest required");
  auto records = load_manifest(rc.manifest);
  auto split = split_patients(records, rc.seed);

  std::unique_ptr<DeltaNetModelD> frozen;
  const ConvEncoder<double>* encoder = nullptr;
  if (rc.retrieval.provider == FeatureProvider::Encoder) {
    if (rc.checkpoint.empty())
      throw UsageError("retrieve: encoder provider needs --checkpoint (frozen encoder)");
    auto loaded = load_checkpoint(rc.checkpoint);
    frozen = std::move(loaded.model);
    encoder = &frozen->encoder;
  }

  FeatureIndex index;
  if (!load_index.empty()) {
    index = FeatureIndex::load(load_index);
  } else {
    index = build_index(records, split, rc.retrieval.provider, encoder);
    if (!save_index.empty()) {
      index.save(save_index);
      std::cout << "index -> " << save_index << " (" << index.size() << " exams)\n";
    }
  }

  if (out_file.empty()) return 0;
  const auto part = part_from_string(queries_split);
  std::ofstream os(out_file);
  if (!os) throw IoError("cannot write " + out_file);
  char buf[64];
  for (const auto& r : records) {
    if (split.part_of(r.patient_id) != part) continue;
    auto features = rc.retrieval.provider == FeatureProvider::Pixel
                        ? extract_features_pixel(r.image)
                        : extract_features_encoder(r.image, *encoder);
    auto result = index.query(features.values, static_cast<std::size_t>(k), r.exam_id,
                              rc.retrieval.exclude_same_patient
                                  ? std::optional<std::string>(r.patient_id)
                                  : std::nullopt);
    os << r.exam_id;
    for (const auto& hit : result.hits) {
      std::snprintf(buf, sizeof(buf), "%.12f", hit.similarity);
      os << "\t" << hit.exam_id << ":" << buf;
    }
    if (result.truncated) os << "\t#truncated";
    os << "\n";
  }
  std::cout << "retrieval dump -> " << out_file << "\n";
  return 0;
}

int cmd_gradcheck(RunConfig& rc, int sample, double epsilon, double tolerance,
                  int target_len) {
  // Desk-scale delta3 configuration by default: D=64, K=16, L=3.
  ModelConfig cfg = rc.model;
  cfg.mode = ModelMode::DeltaL;
  cfg.max_conditions = std::max(1, cfg.max_conditions);
  cfg.cond_report_len = std::min<Eigen::Index>(cfg.cond_report_len, 8);
  cfg.seed = rc.seed;
  cfg.validate();
  DeltaNetModelD model(cfg);

  std::mt19937_64 rng(rc.seed);
  auto image = TensorD::random_uniform(
      {cfg.image_channels, cfg.image_height, cfg.image_width}, 0.0, 1.0, rng, false);
  std::vector<ConditionInput<double>> conds;
  std::uniform_int_distribution<int> tok(4, static_cast<int>(cfg.vocab) - 1);
  for (int i = 0; i < cfg.max_conditions; ++i) {
    ConditionInput<double> c;
    c.image = TensorD::random_uniform(
        {cfg.image_channels, cfg.image_height, cfg.image_width}, 0.0, 1.0, rng, false);
    c.report_ids.push_back(kBosId);
    for (int t = 0; t < 4; ++t) c.report_ids.push_back(tok(rng));
    c.report_ids.push_back(kEosId);
    conds.push_back(std::move(c));
  }
  std::vector<int> target{kBosId};
  for (int t = 0; t < target_len; ++t) target.push_back(tok(rng));
  target.push_back(kEosId);
  std::vector<std::uint8_t> mask(target.size() - 1, 1);

  auto loss_fn = [&] {
    auto enc = model.encode_inputs(image, conds);
    auto banks = model.assemble_banks(enc.visual, enc.conditions);
    return model.sequence_loss(enc.visual, banks, target, mask);
  };
  GradCheckOptions opts;
  opts.epsilon = epsilon;
  opts.tolerance = tolerance;
  opts.max_entries_per_param = static_cast<std::size_t>(sample);
  opts.sample_seed = rc.seed;
  auto report = grad_check<double>(loss_fn, model.named_parameters(), opts);
  std::cout << report.summary();
  return report.pass ? 0 : 1;
}

int cmd_experiment(RunConfig& rc, const std::string& preset, const std::string& seeds_csv,
                   int threads, const std::string& out_file) {
  if (rc.manifest.empty()) throw UsageError("experiment: --manifest required");
  auto records = load_manifest(rc.manifest);

  std::vector<std::uint64_t> seeds;
  std::istringstream ss(seeds_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok));
  if (seeds.empty()) throw UsageError("experiment: --seeds must name at least one seed");

  DatasetOptions data_opts = dataset_options_from(rc, 1);
  std::vector<PresetResult> results;
  if (preset == "compare")
    results = preset_compare_modes(records, rc.model, rc.training, data_opts, seeds, threads,
                                   &std::cout);
  else if (preset == "selfothers")
    results = preset_self_vs_others(records, rc.model, rc.training, data_opts, seeds, threads,
                                    &std::cout);
  else if (preset == "ablation")
    results =
        preset_ablation(records, rc.model, rc.training, data_opts, seeds, threads, &std::cout);
  else
    throw UsageError("experiment: unknown preset '" + preset +
                     "' (use compare|selfothers|ablation)");

  std::ostringstream os;
  os << "# deltanet-experiment " << preset << "\n";
  os << "config_fingerprint: " << hex64(rc.fingerprint()) << "\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%.4f", r.mean_bleu4);
    os << r.arm << ": mean_bleu4 " << buf << " runs";
    for (double b : r.bleu4_runs) {
      std::snprintf(buf, sizeof(buf), " %.4f", b);
      os << buf;
    }
    os << "\n";
  }
  std::cout << os.str();
  if (!out_file.empty()) write_text_file(out_file, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deltanet: conditional medical-report generation at desk scale"};
  app.require_subcommand(1);

  CommonFlags synth_flags, train_flags, gen_flags, eval_flags, retr_flags, grad_flags,
      exp_flags;

  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-visit corpus");
  synth_flags.attach(synth);
  synth->add_option("--patients", synth_flags.rc.synth.patients);
  synth->add_option("--multi-visit-fraction", synth_flags.rc.synth.multi_visit_fraction);
  synth->add_option("--max-visits", synth_flags.rc.synth.max_visits);
  synth->add_option("--change-prob", synth_flags.rc.synth.change_prob);
  synth->add_option("--noise", synth_flags.rc.synth.noise_level);
  synth->add_option("--presence-prob", synth_flags.rc.synth.presence_prob);

  auto* train = app.add_subcommand("train", "train a model on a manifest");
  train_flags.attach(train);
  std::string mode = "deltaL", variant = "full", source = "others";
  train->add_option("--mode", mode, "basic|delta1|deltaL");
  train->add_option("--variant", variant, "full|ic|rc|icrc");
  train->add_option("--source", source, "self|others conditioning");
  train->add_option("--conditions", train_flags.rc.model.max_conditions);
  train->add_option("--epochs", train_flags.rc.training.epochs);
  train->add_option("--batch", train_flags.rc.training.batch_size);
  train->add_option("--lr", train_flags.rc.training.lr);
  train->add_option("--patience", train_flags.rc.training.patience);
  train->add_option("--hidden", train_flags.rc.model.hidden);
  train->add_option("--heads", train_flags.rc.model.heads);
  train->add_option("--conv-stages", train_flags.rc.model.conv_stages);
  train->add_option("--conv-channels", train_flags.rc.model.conv_channels);

  auto* gen = app.add_subcommand("generate", "decode reports from a checkpoint");
  gen_flags.attach(gen);
  std::string gen_split = "test", gen_out = "generated.jsonl", strategy = "greedy";
  int beam_width = 1;
  bool with_trace = false;
  std::string gen_ckpt;
  gen->add_option("--checkpoint", gen_ckpt)->required();
  gen->add_option("--split", gen_split, "train|val|test");
  gen->add_option("--out", gen_out);
  gen->add_option("--strategy", strategy, "greedy|beam");
  gen->add_option("--beam-width", beam_width);
  gen->add_flag("--trace", with_trace, "include attention traces");

  auto* eval = app.add_subcommand("evaluate", "score candidates against references");
  eval_flags.attach(eval);
  std::string cand_file, eval_out;
  bool clinical = false;
  eval->add_option("--candidates", cand_file, "generation JSONL or a manifest")->required();
  eval->add_option("--out", eval_out);
  eval->add_flag("--clinical", clinical, "also report clinical efficacy");

  auto* retr = app.add_subcommand("retrieve", "build/query the similarity index");
  retr_flags.attach(retr);
  std::string retr_out, retr_queries = "test", save_index, load_index,
              retr_provider = "pixel", retr_ckpt;
  int retr_k = 3;
  retr->add_option("--out", retr_out, "ranked-results dump");
  retr->add_option("--k", retr_k);
  retr->add_option("--queries", retr_queries, "which split to query from");
  retr->add_option("--save-index", save_index);
  retr->add_option("--load-index", load_index);
  retr->add_option("--provider", retr_provider, "pixel|encoder");
  retr->add_option("--checkpoint", retr_ckpt, "frozen encoder for provider=encoder");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full model");
  grad_flags.attach(grad);
  int sample = 25, target_len = 3;
  double epsilon = 1e-5, tolerance = 1e-4;
  grad->add_option("--sample", sample, "checked entries per parameter (0 = all)");
  grad->add_option("--epsilon", epsilon);
  grad->add_option("--tolerance", tolerance);
  grad->add_option("--target-len", target_len);
  grad->add_option("--conditions", grad_flags.rc.model.max_conditions);
  grad->add_option("--hidden", grad_flags.rc.model.hidden);

  auto* exp = app.add_subcommand("experiment", "paper-style comparison presets");
  exp_flags.attach(exp);
  std::string preset = "compare", seeds_csv = "1,2,3", exp_out;
  int threads = 2;
  exp->add_option("--preset", preset, "compare|selfothers|ablation");
  exp->add_option("--seeds", seeds_csv);
  exp->add_option("--threads", threads);
  exp->add_option("--out", exp_out);
  exp->add_option("--epochs", exp_flags.rc.training.epochs);
  exp->add_option("--batch", exp_flags.rc.training.batch_size);
  exp->add_option("--lr", exp_flags.rc.training.lr);
  exp->add_option("--patience", exp_flags.rc.training.patience);
  exp->add_option("--hidden", exp_flags.rc.model.hidden);
  exp->add_option("--heads", exp_flags.rc.model.heads);
  exp->add_option("--conv-stages", exp_flags.rc.model.conv_stages);
  exp->add_option("--conv-channels", exp_flags.rc.model.conv_channels);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      synth_flags.merge_file_under_flags(synth);
      return cmd_synth(synth_flags.rc);
    }
    if (train->parsed()) {
      train_flags.merge_file_under_flags(train);
      KvMap kv;
      kv["model.mode"] = mode;
      kv["model.variant"] = variant;
      const ModelConfig parsed = model_config_from_kv(kv);
      train_flags.rc.model.mode = parsed.mode;
      train_flags.rc.model.variant = parsed.variant;
      train_flags.rc.retrieval.source =
          source == "self" ? ConditionSource::SelfHistory : ConditionSource::Retrieved;
      return cmd_train(train_flags.rc);
    }
    if (gen->parsed()) {
      gen_flags.merge_file_under_flags(gen);
      gen_flags.rc.checkpoint = gen_ckpt;
      return cmd_generate(gen_flags.rc, gen_split, gen_out, strategy, beam_width, with_trace);
    }
    if (eval->parsed()) {
      eval_flags.merge_file_under_flags(eval);
      return cmd_evaluate(eval_flags.rc, cand_file, eval_out, clinical);
    }
    if (retr->parsed()) {
      retr_flags.merge_file_under_flags(retr);
      retr_flags.rc.retrieval.provider =
          retr_provider == "encoder" ? FeatureProvider::Encoder : FeatureProvider::Pixel;
      retr_flags.rc.retrieval.k = retr_k;
      retr_flags.rc.checkpoint = retr_ckpt;
      return cmd_retrieve(retr_flags.rc, retr_out, retr_k, retr_queries, save_index,
                          load_index);
    }
    if (grad->parsed()) {
      grad_flags.merge_file_under_flags(grad);
      return cmd_gradcheck(grad_flags.rc, sample, epsilon, tolerance, target_len);
    }
    if (exp->parsed()) {
      exp_flags.merge_file_under_flags(exp);
      return cmd_experiment(exp_flags.rc, preset, seeds_csv, threads, exp_out);
    }
  } catch (const Error& e) {
    std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
