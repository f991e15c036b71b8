#pragma once

// Finite-difference gradient verification. The analytic gradient from
// backward() is compared per entry against a central difference of the
// scalar loss; the loss function is re-evaluated with each checked entry
// perturbed in place.

#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "deltanet/ops.hpp"
#include "deltanet/tensor.hpp"

namespace deltanet {

template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

template <class S>
void zero_grad(std::vector<NamedTensor<S>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every entry; otherwise a seeded sample per parameter, so large
  // models stay within a fixed runtime budget.
  std::size_t max_entries_per_param = 0;
  std::uint64_t sample_seed = 0x5eed;
};

struct GradCheckEntry {
  std::string param;
  Eigen::Index checked = 0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  bool pass = true;

  std::string summary() const {
    std::ostringstream os;
    for (const auto& e : params) {
      os << (e.pass ? "pass" : "FAIL") << "  " << e.param << "  rel_err="
         << e.max_rel_error << "  entries=" << e.checked;
      if (!e.pass)
        os << "  worst@" << e.worst_index << " analytic=" << e.analytic
           << " numeric=" << e.numeric;
      os << "\n";
    }
    os << (pass ? "PASS" : "FAIL") << "  max_rel_error=" << max_rel_error << "\n";
    return os.str();
  }
};

// `loss_fn` must rebuild its graph from the current parameter values on
// every call and return a scalar tensor.
template <class S>
GradCheckReport grad_check(const std::function<Tensor<S>()>& loss_fn,
                           std::vector<NamedTensor<S>> params,
                           const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  for (auto& p : params) p.tensor.zero_grad();
  Tensor<S> loss = loss_fn();
  backward(loss);

  std::mt19937_64 rng(opts.sample_seed);
  for (auto& p : params) {
    GradCheckEntry entry;
    entry.param = p.name;
    const Eigen::Index n = p.tensor.numel();
    std::vector<Eigen::Index> picks;
    if (opts.max_entries_per_param == 0 ||
        n <= static_cast<Eigen::Index>(opts.max_entries_per_param)) {
      picks.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) picks[i] = i;
    } else {
      // Sample without replacement via a partial Fisher-Yates walk.
      std::vector<Eigen::Index> all(n);
      for (Eigen::Index i = 0; i < n; ++i) all[i] = i;
      for (std::size_t i = 0; i < opts.max_entries_per_param; ++i) {
        std::uniform_int_distribution<Eigen::Index> dist(static_cast<Eigen::Index>(i), n - 1);
        std::swap(all[i], all[dist(rng)]);
        picks.push_back(all[i]);
      }
    }
    for (Eigen::Index idx : picks) {
      const S saved = p.tensor.values()[idx];
      p.tensor.values()[idx] = saved + static_cast<S>(opts.epsilon);
      const double up = static_cast<double>(loss_fn().scalar_value());
      p.tensor.values()[idx] = saved - static_cast<S>(opts.epsilon);
      const double down = static_cast<double>(loss_fn().scalar_value());
      p.tensor.values()[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.epsilon);
      const double analytic = static_cast<double>(p.tensor.grad()[idx]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
      const double rel = std::abs(analytic - numeric) / denom;
      ++entry.checked;
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = idx;
        entry.analytic = analytic;
        entry.numeric = numeric;
      }
    }
    entry.pass = entry.max_rel_error < opts.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace deltanet
