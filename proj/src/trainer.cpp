#include "deltanet/trainer.hpp"

#include <algorithm>
#include <random>

#include "deltanet/metrics.hpp"
#include "deltanet/runconfig.hpp"

namespace deltanet {

Trainer::Trainer(DeltaNetModelD& model, const Vocabulary& vocab, TrainingOptions options,
                 std::uint64_t seed)
    : model_(model), vocab_(vocab), options_(options), seed_(seed) {
  params_ = model_.named_parameters();
  opt_.lr = options_.lr;
}

void Trainer::set_data(std::vector<ResolvedExam> train, std::vector<ResolvedExam> validation) {
  if (train.empty()) throw UsageError("trainer: empty training set");
  train_ = std::move(train);
  validation_ = std::move(validation);
}

int Trainer::batches_per_epoch() const {
  return static_cast<int>((train_.size() + options_.batch_size - 1) /
                          static_cast<std::size_t>(options_.batch_size));
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Order is a pure function of (seed, epoch) so resumed runs rebuild it.
  std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch + 1)));
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> dist(0, i);
    std::swap(order[i], order[dist(rng)]);
  }
  return order;
}

std::vector<ConditionInput<double>> Trainer::condition_inputs(const ResolvedExam& item) const {
  std::vector<ConditionInput<double>> conds;
  for (const auto* src : item.conditions) {
    ConditionInput<double> c;
    c.image = src->image.tensor();
    c.report_ids = vocab_.encode(src->report);
    if (static_cast<Eigen::Index>(c.report_ids.size()) > model_.cfg.cond_report_len)
      throw DimensionError("conditional report from exam " + src->exam_id + " has " +
                           std::to_string(c.report_ids.size()) + " tokens, fixed length is " +
                           std::to_string(model_.cfg.cond_report_len));
    conds.push_back(std::move(c));
  }
  return conds;
}

TensorD Trainer::item_loss(const ResolvedExam& item) {
  const auto target = vocab_.encode(item.exam->report);
  std::vector<std::uint8_t> mask(target.size() - 1, 1);
  auto conds = condition_inputs(item);
  auto enc = model_.encode_inputs(item.exam->image.tensor(), conds);
  ConditionBanks<double> banks;
  if (model_.cfg.conditional()) banks = model_.assemble_banks(enc.visual, enc.conditions);
  return model_.sequence_loss(enc.visual, banks, target, mask);
}

double Trainer::item_loss_value(const ResolvedExam& item) {
  return item_loss(item).scalar_value();
}

double Trainer::train_one_batch() {
  if (train_.empty()) throw UsageError("trainer: no data");
  const auto order = epoch_order(state_.epoch);
  const auto batches = batches_per_epoch();
  if (state_.step_in_epoch >= batches) {
    ++state_.epoch;
    state_.step_in_epoch = 0;
    return train_one_batch();
  }
  const std::size_t begin =
      static_cast<std::size_t>(state_.step_in_epoch) * options_.batch_size;
  const std::size_t end = std::min(train_.size(), begin + options_.batch_size);
  const double inv = 1.0 / static_cast<double>(end - begin);

  zero_grad(params_);
  double batch_loss = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& item = train_[order[i]];
    TensorD loss;
    try {
      loss = item_loss(item);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(state_.epoch) +
                         ", step " + std::to_string(state_.step_in_epoch) + ", exam " +
                         item.exam->exam_id + ")");
    }
    batch_loss += loss.scalar_value() * inv;
    backward(scale(loss, inv));
  }
  opt_.step(params_);
  ++state_.step_in_epoch;
  if (state_.step_in_epoch >= batches) {
    ++state_.epoch;
    state_.step_in_epoch = 0;
  }
  return batch_loss;
}

std::vector<std::vector<std::string>> Trainer::decode_corpus(
    const std::vector<ResolvedExam>& items, DecodeStrategy strategy, int beam_width) const {
  std::vector<std::vector<std::string>> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    auto gen = model_.generate(item.exam->image.tensor(), condition_inputs(item), strategy,
                               beam_width);
    out.push_back(vocab_.decode(gen.tokens));
  }
  return out;
}

double Trainer::validation_bleu4() {
  if (validation_.empty()) return 0.0;
  auto candidates = decode_corpus(validation_, DecodeStrategy::Greedy);
  std::vector<TokenSeq> references;
  references.reserve(validation_.size());
  for (const auto& item : validation_) references.push_back(item.exam->report);
  return bleu(candidates, references, 4);
}

void Trainer::snapshot_best() {
  best_params_.clear();
  for (const auto& p : params_) best_params_.push_back(p.tensor.values());
}

void Trainer::restore_best() {
  if (best_params_.empty()) return;
  for (std::size_t i = 0; i < params_.size(); ++i)
    params_[i].tensor.values() = best_params_[i];
}

std::vector<TrainLogEntry> Trainer::fit(std::ostream* log) {
  std::vector<TrainLogEntry> entries;
  const bool has_validation = !validation_.empty();
  while (state_.epoch < options_.epochs) {
    const int epoch = state_.epoch;
    double loss_sum = 0.0;
    int steps = 0;
    while (state_.epoch == epoch) {
      loss_sum += train_one_batch();
      ++steps;
    }
    TrainLogEntry entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / std::max(1, steps);
    if (!has_validation) {
      // No early stopping without a validation set: run every epoch and
      // keep the final parameters.
      entries.push_back(entry);
      if (log) (*log) << "epoch " << epoch << "  loss " << entry.train_loss << "\n";
      continue;
    }
    entry.val_bleu4 = validation_bleu4();
    if (entry.val_bleu4 > state_.best_val_bleu4) {
      state_.best_val_bleu4 = entry.val_bleu4;
      state_.best_epoch = epoch;
      state_.epochs_since_best = 0;
      entry.is_best = true;
      snapshot_best();
    } else {
      ++state_.epochs_since_best;
    }
    entries.push_back(entry);
    if (log)
      (*log) << "epoch " << epoch << "  loss " << entry.train_loss << "  val_bleu4 "
             << entry.val_bleu4 << (entry.is_best ? "  *" : "") << "\n";
    if (state_.epochs_since_best >= options_.patience) break;
  }
  restore_best();
  return entries;
}

std::size_t max_encoded_report_length(const std::vector<ExamRecord>& records,
                                      const Vocabulary& vocab) {
  std::size_t longest = 0;
  for (const auto& r : records) longest = std::max(longest, vocab.encode(r.report).size());
  return longest;
}

}  // namespace deltanet
