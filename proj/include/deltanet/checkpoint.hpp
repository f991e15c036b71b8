#pragma once

// Versioned binary checkpoint: model config, vocabulary hash, every named
// parameter (shape + row-major values), optimizer moments, and trainer
// progress. Save -> load round-trips bit-exactly.

#include <cstdint>
#include <filesystem>
#include <memory>

#include "deltanet/model.hpp"
#include "deltanet/optimizer.hpp"

namespace deltanet {

struct TrainerState {
  int epoch = 0;          // completed epochs
  int step_in_epoch = 0;  // completed batches within the current epoch
  double best_val_bleu4 = -1.0;
  int best_epoch = -1;
  int epochs_since_best = 0;
};

struct LoadedCheckpoint {
  std::unique_ptr<DeltaNetModelD> model;
  AdamD optimizer;
  TrainerState state;
  std::uint64_t vocab_fingerprint = 0;
};

void save_checkpoint(const std::filesystem::path& path, DeltaNetModelD& model,
                     const AdamD& optimizer, std::uint64_t vocab_fingerprint,
                     const TrainerState& state);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deltanet
