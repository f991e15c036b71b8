#include "deltanet/experiments.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <thread>

namespace deltanet {

namespace {

const ExamRecord* find_exam(const std::vector<ExamRecord>& records, const std::string& id) {
  for (const auto& r : records)
    if (r.exam_id == id) return &r;
  throw IndexError("dataset: unknown exam id " + id);
}

std::vector<const ExamRecord*> retrieved_conditions(const DatasetBundle& data,
                                                    const ExamRecord& exam, int k) {
  const auto features = data.options.provider == FeatureProvider::Pixel
                            ? extract_features_pixel(exam.image)
                            : throw UsageError(
                                  "dataset: encoder retrieval provider requires an explicit "
                                  "frozen encoder; use the pixel provider here");
  const auto result = data.index.query(
      features.values, static_cast<std::size_t>(k), exam.exam_id,
      data.options.exclude_same_patient ? std::optional<std::string>(exam.patient_id)
                                        : std::nullopt);
  std::vector<const ExamRecord*> out;
  for (const auto& hit : result.hits) out.push_back(find_exam(data.records, hit.exam_id));
  return out;
}

}  // namespace

DatasetBundle prepare_dataset(std::vector<ExamRecord> records, const DatasetOptions& options) {
  DatasetBundle data;
  data.records = std::move(records);
  data.options = options;
  data.split = split_patients(data.records, options.split_seed);

  std::vector<const ExamRecord*> training_records;
  for (const auto& r : data.records)
    if (data.split.part_of(r.patient_id) == PatientSplit::Part::Train)
      training_records.push_back(&r);
  data.vocab = Vocabulary::build(training_records, options.min_token_frequency);
  data.max_cond_len = max_encoded_report_length(data.records, data.vocab);

  const bool needs_retrieval =
      options.conditions > 0 && options.source == ConditionSource::Retrieved;
  if (needs_retrieval)
    data.index = build_index(data.records, data.split, options.provider, nullptr);

  // Latest visit per patient, for the multi-visit style experiments.
  std::map<std::string, int> latest;
  std::map<std::string, int> visit_count;
  for (const auto& r : data.records) {
    auto it = latest.find(r.patient_id);
    if (it == latest.end() || r.visit_index > it->second) latest[r.patient_id] = r.visit_index;
    ++visit_count[r.patient_id];
  }

  auto is_target = [&](const ExamRecord& r) {
    if (!options.targets_latest_visit_only) return true;
    return visit_count[r.patient_id] > 1 && r.visit_index == latest[r.patient_id];
  };

  for (const auto& r : data.records) {
    if (!is_target(r)) continue;
    ResolvedExam item;
    item.exam = &r;
    if (options.conditions > 0) {
      if (options.source == ConditionSource::SelfHistory) {
        auto history = history_conditions(data.records, r.patient_id, r.visit_index,
                                          options.conditions);
        if (history.empty()) continue;  // first visit: no self conditions available
        item.conditions = std::move(history.conditions);
      } else {
        item.conditions = retrieved_conditions(data, r, options.conditions);
        if (item.conditions.empty()) continue;
      }
    }
    switch (data.split.part_of(r.patient_id)) {
      case PatientSplit::Part::Train: data.train.push_back(std::move(item)); break;
      case PatientSplit::Part::Validation: data.validation.push_back(std::move(item)); break;
      case PatientSplit::Part::Test: data.test.push_back(std::move(item)); break;
    }
  }

  if (options.append_history_to_train && options.targets_latest_visit_only) {
    for (const auto& r : data.records) {
      if (data.split.part_of(r.patient_id) != PatientSplit::Part::Train) continue;
      if (is_target(r)) continue;
      ResolvedExam item;
      item.exam = &r;
      if (options.conditions > 0) {
        if (options.source != ConditionSource::Retrieved)
          throw UsageError("dataset: history augmentation applies to retrieved conditioning");
        item.conditions = retrieved_conditions(data, r, options.conditions);
        if (item.conditions.empty()) continue;
      }
      data.train.push_back(std::move(item));
    }
  }

  if (data.train.empty()) throw UsageError("dataset: no training items after resolution");
  return data;
}

ModelConfig adapt_model_config(ModelConfig base, const DatasetBundle& data) {
  base.vocab = data.vocab.size();
  base.cond_report_len = static_cast<Eigen::Index>(data.max_cond_len);
  const auto& img = data.records.front().image;
  base.image_channels = img.channels;
  base.image_height = img.height;
  base.image_width = img.width;
  base.visual_positions =
      (img.height >> base.conv_stages) * (img.width >> base.conv_stages);
  return base;
}

ExperimentRun train_and_evaluate(const std::string& name, DatasetBundle& data,
                                 ModelConfig base, TrainingOptions training,
                                 std::uint64_t run_seed, std::ostream* log) {
  ModelConfig cfg = adapt_model_config(base, data);
  cfg.seed = run_seed;
  DeltaNetModelD model(cfg);
  Trainer trainer(model, data.vocab, training, run_seed);
  trainer.set_data(data.train, data.validation);

  ExperimentRun run;
  run.name = name;
  run.log = trainer.fit(log);
  run.best_val_bleu4 = trainer.state().best_val_bleu4;

  auto candidates = trainer.decode_corpus(data.test, DecodeStrategy::Greedy);
  std::vector<TokenSeq> references;
  for (const auto& item : data.test) references.push_back(item.exam->report);
  run.test_metrics = evaluate_corpus(candidates, references);
  return run;
}

void run_jobs(std::vector<std::function<void()>> jobs, int threads) {
  if (threads < 2 || jobs.size() < 2) {
    for (auto& job : jobs) job();
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    while (true) {
      std::size_t mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size()) return;
        mine = next++;
      }
      jobs[mine]();
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(threads, static_cast<int>(jobs.size()));
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

namespace {

struct Arm {
  std::string name;
  ModelMode mode;
  ConditionalVariant variant;
  int conditions;
  ConditionSource source;
};

std::vector<PresetResult> run_arms(const std::vector<ExamRecord>& records,
                                   const std::vector<Arm>& arms, ModelConfig base,
                                   TrainingOptions training,
                                   const DatasetOptions& data_options,
                                   const std::vector<std::uint64_t>& seeds, int threads,
                                   std::ostream* log) {
  // One dataset per distinct (source, conditions) requirement.
  std::map<std::pair<int, int>, DatasetBundle> datasets;
  for (const auto& arm : arms) {
    const auto key = std::make_pair(static_cast<int>(arm.source), arm.conditions);
    if (!datasets.count(key)) {
      DatasetOptions opts = data_options;
      opts.source = arm.source;
      opts.conditions = arm.conditions;
      opts.append_history_to_train =
          data_options.append_history_to_train && arm.source == ConditionSource::Retrieved;
      datasets.emplace(key, prepare_dataset(records, opts));
    }
  }

  std::vector<PresetResult> results(arms.size());
  std::vector<std::function<void()>> jobs;
  std::mutex log_mu;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    results[a].arm = arms[a].name;
    results[a].bleu4_runs.resize(seeds.size(), 0.0);
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      jobs.push_back([&, a, s] {
        const auto& arm = arms[a];
        auto& data = datasets.at({static_cast<int>(arm.source), arm.conditions});
        ModelConfig cfg = base;
        cfg.mode = arm.mode;
        cfg.variant = arm.variant;
        cfg.max_conditions = std::max(1, arm.conditions);
        auto run = train_and_evaluate(arm.name, data, cfg, training, seeds[s], nullptr);
        results[a].bleu4_runs[s] = run.test_metrics.bleu4;
        if (log) {
          std::lock_guard<std::mutex> lock(log_mu);
          (*log) << arm.name << " seed " << seeds[s] << ": test bleu4 "
                 << run.test_metrics.bleu4 << " (best val " << run.best_val_bleu4 << ")\n";
        }
      });
    }
  }
  run_jobs(std::move(jobs), threads);
  for (auto& r : results) {
    double sum = 0.0;
    for (double b : r.bleu4_runs) sum += b;
    r.mean_bleu4 = r.bleu4_runs.empty() ? 0.0 : sum / static_cast<double>(r.bleu4_runs.size());
  }
  return results;
}

}  // namespace

std::vector<PresetResult> preset_compare_modes(const std::vector<ExamRecord>& records,
                                               ModelConfig base, TrainingOptions training,
                                               const DatasetOptions& data_options,
                                               const std::vector<std::uint64_t>& seeds,
                                               int threads, std::ostream* log) {
  const std::vector<Arm> arms{
      {"basic", ModelMode::Basic, ConditionalVariant::Full, 0, ConditionSource::Retrieved},
      {"delta1", ModelMode::Delta1, ConditionalVariant::Full, 1, ConditionSource::Retrieved},
      {"delta3", ModelMode::DeltaL, ConditionalVariant::Full, 3, ConditionSource::Retrieved},
  };
  return run_arms(records, arms, base, training, data_options, seeds, threads, log);
}

std::vector<PresetResult> preset_self_vs_others(const std::vector<ExamRecord>& records,
                                                ModelConfig base, TrainingOptions training,
                                                const DatasetOptions& data_options,
                                                const std::vector<std::uint64_t>& seeds,
                                                int threads, std::ostream* log) {
  DatasetOptions opts = data_options;
  opts.targets_latest_visit_only = true;
  opts.append_history_to_train = true;  // fairness: others sees the self reports as data
  const std::vector<Arm> arms{
      {"self", ModelMode::Delta1, ConditionalVariant::Full, 1, ConditionSource::SelfHistory},
      {"others", ModelMode::Delta1, ConditionalVariant::Full, 1, ConditionSource::Retrieved},
  };
  return run_arms(records, arms, base, training, opts, seeds, threads, log);
}

std::vector<PresetResult> preset_ablation(const std::vector<ExamRecord>& records,
                                          ModelConfig base, TrainingOptions training,
                                          const DatasetOptions& data_options,
                                          const std::vector<std::uint64_t>& seeds, int threads,
                                          std::ostream* log) {
  const std::vector<Arm> arms{
      {"ic", ModelMode::Delta1, ConditionalVariant::CondImage, 1, ConditionSource::Retrieved},
      {"rc", ModelMode::Delta1, ConditionalVariant::CondReport, 1, ConditionSource::Retrieved},
      {"icrc", ModelMode::Delta1, ConditionalVariant::CondBoth, 1, ConditionSource::Retrieved},
      {"full", ModelMode::Delta1, ConditionalVariant::Full, 1, ConditionSource::Retrieved},
  };
  return run_arms(records, arms, base, training, data_options, seeds, threads, log);
}

}  // namespace deltanet
