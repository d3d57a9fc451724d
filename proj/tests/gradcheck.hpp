#pragma once

#include <functional>
#include <random>
#include <vector>

#include "onda/autodiff.hpp"

namespace onda::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

/// Scalar loss built from graph leaves bound to `inputs`.
using LossFn = std::function<Var(Graph&, const std::vector<Var>&)>;

inline double eval_loss(const LossFn& fn, const std::vector<Tensor*>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (Tensor* t : inputs) vars.push_back(g.parameter(*t));
  return fn(g, vars).value().item();
}

/// Largest relative error ||autodiff - central difference|| / max(norms)
/// over the inputs.
inline double gradcheck(const LossFn& fn, const std::vector<Tensor*>& inputs, double step = 1e-4) {
  for (Tensor* t : inputs) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Graph g;
    std::vector<Var> vars;
    for (Tensor* t : inputs) vars.push_back(g.parameter(*t));
    g.backward(fn(g, vars));
  }
  double worst = 0.0;
  for (Tensor* t : inputs) {
    Tensor::Array numeric(t->numel());
    for (Index i = 0; i < t->numel(); ++i) {
      const double keep = (*t)[i];
      (*t)[i] = keep + step;
      const double up = eval_loss(fn, inputs);
      (*t)[i] = keep - step;
      const double down = eval_loss(fn, inputs);
      (*t)[i] = keep;
      numeric[i] = (up - down) / (2.0 * step);
    }
    const Tensor::Array analytic = t->grad();
    const double scale = std::max({analytic.matrix().norm(), numeric.matrix().norm(), 1e-10});
    worst = std::max(worst, (analytic - numeric).matrix().norm() / scale);
  }
  return worst;
}

}  // namespace onda::testing
