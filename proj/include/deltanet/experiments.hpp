#pragma once

// Dataset resolution (condition sourcing, leakage guards) and the
// comparison presets: basic-vs-conditional, self-vs-others conditioning,
// and the conditional-feature ablations.

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "deltanet/metrics.hpp"
#include "deltanet/retrieval.hpp"
#include "deltanet/runconfig.hpp"
#include "deltanet/trainer.hpp"

namespace deltanet {

struct DatasetOptions {
  ConditionSource source = ConditionSource::Retrieved;
  int conditions = 1;  // L; 0 builds basic-mode items without conditions
  FeatureProvider provider = FeatureProvider::Pixel;
  bool exclude_same_patient = true;
  // Multi-visit style: only the latest visit of each multi-visit patient is
  // a target.
  bool targets_latest_visit_only = false;
  // Adds the training patients' earlier visits as extra training targets
  // (the fairness augmentation used when comparing against self-history).
  bool append_history_to_train = false;
  std::uint64_t split_seed = 1;
  int min_token_frequency = 1;
};

struct DatasetBundle {
  std::vector<ExamRecord> records;
  PatientSplit split;
  Vocabulary vocab;
  FeatureIndex index;  // over the training split, when retrieval is used
  std::vector<ResolvedExam> train;
  std::vector<ResolvedExam> validation;
  std::vector<ResolvedExam> test;
  std::size_t max_cond_len = 0;  // encoded length bound over condition exams
  DatasetOptions options;
};

DatasetBundle prepare_dataset(std::vector<ExamRecord> records, const DatasetOptions& options);

// Fills the corpus-dependent fields of a model config (vocab size, padded
// conditional length, image geometry).
ModelConfig adapt_model_config(ModelConfig base, const DatasetBundle& data);

struct ExperimentRun {
  std::string name;
  EvaluationReport test_metrics;
  std::vector<TrainLogEntry> log;
  double best_val_bleu4 = 0.0;
};

ExperimentRun train_and_evaluate(const std::string& name, DatasetBundle& data,
                                 ModelConfig base, TrainingOptions training,
                                 std::uint64_t run_seed, std::ostream* log = nullptr);

// Runs independent jobs on up to `threads` workers; each job is internally
// single-threaded and seeded, so results do not depend on scheduling.
void run_jobs(std::vector<std::function<void()>> jobs, int threads);

struct PresetResult {
  std::string arm;                 // e.g. "basic", "delta1", "delta3"
  std::vector<double> bleu4_runs;  // one entry per seed
  double mean_bleu4 = 0.0;
};

std::vector<PresetResult> preset_compare_modes(const std::vector<ExamRecord>& records,
                                               ModelConfig base, TrainingOptions training,
                                               const DatasetOptions& data_options,
                                               const std::vector<std::uint64_t>& seeds,
                                               int threads, std::ostream* log = nullptr);

std::vector<PresetResult> preset_self_vs_others(const std::vector<ExamRecord>& records,
                                                ModelConfig base, TrainingOptions training,
                                                const DatasetOptions& data_options,
                                                const std::vector<std::uint64_t>& seeds,
                                                int threads, std::ostream* log = nullptr);

std::vector<PresetResult> preset_ablation(const std::vector<ExamRecord>& records,
                                          ModelConfig base, TrainingOptions training,
                                          const DatasetOptions& data_options,
                                          const std::vector<std::uint64_t>& seeds, int threads,
                                          std::ostream* log = nullptr);

}  // namespace deltanet
