#include "deltanet/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <unordered_set>

namespace deltanet {

namespace {

constexpr double kSmall = 1e-9;
constexpr double kTiny = 1e-15;

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, double>;

NgramCounts count_ngrams(const TokenSeq& toks, int n) {
  NgramCounts counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    counts[Ngram(toks.begin() + i, toks.begin() + i + n)] += 1.0;
  return counts;
}

void require_paired(const std::vector<TokenSeq>& candidates,
                    const std::vector<TokenSeq>& references, const char* who) {
  if (candidates.empty())
    throw UsageError(std::string(who) + ": empty corpus");
  if (candidates.size() != references.size())
    throw UsageError(std::string(who) + ": " + std::to_string(candidates.size()) +
                     " candidates vs " + std::to_string(references.size()) + " references");
}

}  // namespace

double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
            int n) {
  require_paired(candidates, references, "bleu");
  if (n < 1 || n > 9) throw UsageError("bleu: order must lie in [1,9]");
  std::vector<double> correct(static_cast<std::size_t>(n), 0.0);
  std::vector<double> guess(static_cast<std::size_t>(n), 0.0);
  double test_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& r = references[i];
    test_len += static_cast<double>(c.size());
    ref_len += static_cast<double>(r.size());
    for (int k = 1; k <= n; ++k) {
      const auto cg = count_ngrams(c, k);
      const auto rg = count_ngrams(r, k);
      guess[k - 1] += std::max<double>(0.0, static_cast<double>(c.size()) - k + 1);
      for (const auto& [gram, cnt] : cg) {
        auto it = rg.find(gram);
        if (it != rg.end()) correct[k - 1] += std::min(cnt, it->second);
      }
    }
  }
  double score = 1.0;
  for (int k = 0; k < n; ++k) score *= (correct[k] + kTiny) / (guess[k] + kSmall);
  score = std::pow(score, 1.0 / n);
  const double ratio = (test_len + kTiny) / (ref_len + kSmall);
  if (ratio < 1.0) score *= std::exp(1.0 - 1.0 / ratio);
  return score;
}

namespace {

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_l(const std::vector<TokenSeq>& candidates,
               const std::vector<TokenSeq>& references) {
  require_paired(candidates, references, "rouge_l");
  constexpr double beta = 1.2;
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& r = references[i];
    const double l = static_cast<double>(lcs_length(r, c));
    const double prec = c.empty() ? 0.0 : l / static_cast<double>(c.size());
    const double rec = r.empty() ? 0.0 : l / static_cast<double>(r.size());
    double score = 0.0;
    if (prec != 0.0 && rec != 0.0)
      score = ((1.0 + beta * beta) * prec * rec) / (rec + beta * beta * prec);
    total += score;
  }
  return total / static_cast<double>(candidates.size());
}

double cider_d(const std::vector<TokenSeq>& candidates,
               const std::vector<TokenSeq>& references) {
  require_paired(candidates, references, "cider_d");
  if (references.size() < 2)
    throw UsageError("cider_d: document frequencies need at least 2 references");
  constexpr int kOrders = 4;
  constexpr double kSigma = 6.0;

  // Document frequency: number of reference documents containing the n-gram.
  std::map<Ngram, double> df;
  for (const auto& r : references) {
    std::set<Ngram> seen;
    for (int n = 1; n <= kOrders; ++n)
      for (const auto& [gram, cnt] : count_ngrams(r, n)) seen.insert(gram);
    for (const auto& gram : seen) df[gram] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(references.size()));

  struct Vec {
    std::array<NgramCounts, kOrders> tfidf;
    std::array<double, kOrders> norm{};
    double bigram_len = 0.0;
  };
  auto to_vec = [&](const TokenSeq& toks) {
    Vec v;
    for (int n = 1; n <= kOrders; ++n) {
      for (const auto& [gram, tf] : count_ngrams(toks, n)) {
        const auto it = df.find(gram);
        const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
        const double w = tf * (log_docs - d);
        v.tfidf[n - 1][gram] = w;
        v.norm[n - 1] += w * w;
        if (n == 2) v.bigram_len += tf;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Vec vc = to_vec(candidates[i]);
    const Vec vr = to_vec(references[i]);
    const double delta = vc.bigram_len - vr.bigram_len;
    const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
    double score = 0.0;
    for (int n = 0; n < kOrders; ++n) {
      double val = 0.0;
      for (const auto& [gram, w] : vc.tfidf[n]) {
        auto it = vr.tfidf[n].find(gram);
        if (it != vr.tfidf[n].end()) val += std::min(w, it->second) * it->second;
      }
      if (vc.norm[n] != 0.0 && vr.norm[n] != 0.0) val /= vc.norm[n] * vr.norm[n];
      score += val * penalty;
    }
    total += score / kOrders * 10.0;
  }
  return total / static_cast<double>(candidates.size());
}

ClinicalEfficacy clinical_efficacy(const std::vector<std::vector<std::string>>& predicted,
                                   const std::vector<std::vector<std::string>>& reference) {
  if (predicted.size() != reference.size())
    throw UsageError("clinical_efficacy: " + std::to_string(predicted.size()) +
                     " predictions vs " + std::to_string(reference.size()) + " references");
  double tp = 0.0, pred_total = 0.0, ref_total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    std::unordered_set<std::string> pset(predicted[i].begin(), predicted[i].end());
    std::unordered_set<std::string> rset(reference[i].begin(), reference[i].end());
    pred_total += static_cast<double>(pset.size());
    ref_total += static_cast<double>(rset.size());
    for (const auto& label : pset) tp += rset.count(label) ? 1.0 : 0.0;
  }
  ClinicalEfficacy ce;
  ce.precision = pred_total > 0.0 ? tp / pred_total : 0.0;
  ce.recall = ref_total > 0.0 ? tp / ref_total : 0.0;
  ce.f1 = (ce.precision + ce.recall) > 0.0
              ? 2.0 * ce.precision * ce.recall / (ce.precision + ce.recall)
              : 0.0;
  return ce;
}

EvaluationReport evaluate_corpus(const std::vector<TokenSeq>& candidates,
                                 const std::vector<TokenSeq>& references) {
  EvaluationReport rep;
  rep.bleu1 = bleu(candidates, references, 1);
  rep.bleu2 = bleu(candidates, references, 2);
  rep.bleu3 = bleu(candidates, references, 3);
  rep.bleu4 = bleu(candidates, references, 4);
  rep.rouge_l = rouge_l(candidates, references);
  rep.cider = candidates.size() >= 2 ? cider_d(candidates, references) : 0.0;
  rep.corpus_size = candidates.size();
  return rep;
}

}  // namespace deltanet
