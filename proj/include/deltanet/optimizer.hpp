#pragma once

#include <cmath>
#include <vector>

#include "deltanet/gradcheck.hpp"
#include "deltanet/tensor.hpp"

namespace deltanet {

// Adam with bias correction. Moments are addressed by parameter list
// position; the list order must stay stable across steps and checkpoints.
template <class S>
struct Adam {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long steps = 0;
  std::vector<ArrayX<S>> m;
  std::vector<ArrayX<S>> v;

  void step(std::vector<NamedTensor<S>>& params) {
    if (m.empty()) {
      for (auto& p : params) {
        m.push_back(ArrayX<S>::Zero(p.tensor.numel()));
        v.push_back(ArrayX<S>::Zero(p.tensor.numel()));
      }
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& g = params[i].tensor.grad();
      m[i] = S(beta1) * m[i] + S(1.0 - beta1) * g;
      v[i] = S(beta2) * v[i] + S(1.0 - beta2) * g.square();
      params[i].tensor.values() -=
          (S(lr) * (m[i] / S(c1))) / ((v[i] / S(c2)).sqrt() + S(eps));
    }
  }
};

using AdamD = Adam<double>;

}  // namespace deltanet
