#pragma once

// Corpus-level NLG metrics with MS-COCO caption-evaluation-tool semantics:
// BLEU-1..4 with add-epsilon smoothing and brevity penalty, ROUGE-L with
// beta = 1.2, CIDEr-D with sigma = 6 and the x10 scaling, plus the
// label-set clinical-efficacy metric.

#include <string>
#include <vector>

#include "deltanet/error.hpp"

namespace deltanet {

using TokenSeq = std::vector<std::string>;

// Corpus BLEU-n over equal-length paired candidate/reference lists.
double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
            int n);

double rouge_l(const std::vector<TokenSeq>& candidates,
               const std::vector<TokenSeq>& references);

double cider_d(const std::vector<TokenSeq>& candidates,
               const std::vector<TokenSeq>& references);

struct ClinicalEfficacy {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged precision/recall/F1 over label instances.
ClinicalEfficacy clinical_efficacy(const std::vector<std::vector<std::string>>& predicted,
                                   const std::vector<std::vector<std::string>>& reference);

struct EvaluationReport {
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  bool has_clinical = false;
  ClinicalEfficacy clinical;
  std::size_t corpus_size = 0;
};

EvaluationReport evaluate_corpus(const std::vector<TokenSeq>& candidates,
                                 const std::vector<TokenSeq>& references);

}  // namespace deltanet
