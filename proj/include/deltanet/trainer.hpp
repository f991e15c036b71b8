#pragma once

// Training loop: deterministic seeded batching, teacher-forced Adam steps,
// per-epoch validation BLEU-4 with early stopping, and step-level resume.

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "deltanet/checkpoint.hpp"
#include "deltanet/corpus.hpp"
#include "deltanet/model.hpp"
#include "deltanet/optimizer.hpp"
#include "deltanet/runconfig.hpp"

namespace deltanet {

// One resolved training/evaluation example: the target exam plus its
// condition source exams (empty in basic mode).
struct ResolvedExam {
  const ExamRecord* exam = nullptr;
  std::vector<const ExamRecord*> conditions;
};

struct TrainLogEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_bleu4 = 0.0;
  bool is_best = false;
};

class Trainer {
public:
  Trainer(DeltaNetModelD& model, const Vocabulary& vocab, TrainingOptions options,
          std::uint64_t seed);

  void set_data(std::vector<ResolvedExam> train, std::vector<ResolvedExam> validation);

  // One optimizer step over the next deterministic batch; returns the mean
  // per-token loss of that batch.
  double train_one_batch();

  int batches_per_epoch() const;

  // Full loop with early stopping; restores the best parameters before
  // returning. `log` may be null.
  std::vector<TrainLogEntry> fit(std::ostream* log = nullptr);

  double validation_bleu4();

  // Greedy corpus decode of arbitrary resolved exams.
  std::vector<std::vector<std::string>> decode_corpus(const std::vector<ResolvedExam>& items,
                                                      DecodeStrategy strategy,
                                                      int beam_width = 1) const;

  double item_loss_value(const ResolvedExam& item);

  TrainerState& state() { return state_; }
  const TrainerState& state() const { return state_; }
  AdamD& optimizer() { return opt_; }

  // Condition tensors + encoded target for one resolved exam.
  std::vector<ConditionInput<double>> condition_inputs(const ResolvedExam& item) const;

private:
  std::vector<std::size_t> epoch_order(int epoch) const;
  TensorD item_loss(const ResolvedExam& item);
  void snapshot_best();
  void restore_best();

  DeltaNetModelD& model_;
  const Vocabulary& vocab_;
  TrainingOptions options_;
  std::uint64_t seed_;
  std::vector<ResolvedExam> train_;
  std::vector<ResolvedExam> validation_;
  std::vector<NamedTensor<double>> params_;
  AdamD opt_;
  TrainerState state_;
  std::vector<ArrayX<double>> best_params_;
};

// Largest encoded report length over a set of exams (BOS/EOS included).
std::size_t max_encoded_report_length(const std::vector<ExamRecord>& records,
                                      const Vocabulary& vocab);

}  // namespace deltanet
