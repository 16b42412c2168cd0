#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "dyneval/tensor.hpp"

namespace dyneval {

// Compares tape gradients against central finite differences.
//
// `f(tape)` must rebuild its output from the tensors in `inputs` on every
// call; grad_check perturbs those tensors in place and restores them. A
// tensor-valued output is contracted with a fixed random weighting so every
// output element participates. Finite differences are taken per output
// element before contracting, so untouched outputs cancel exactly. Returns the
// max over input entries of |analytic - fd| / max(|analytic|, |fd|, floor);
// NaN anywhere gives +inf. The floor keeps near-zero entries, where central
// differences are dominated by roundoff (~1e-11 at step 1e-5 in double), from
// reporting noise as relative error.
template <class T, class F>
T grad_check(F&& f, const std::vector<Tensor<T>>& inputs, T fd_step, std::uint64_t seed = 7, T floor = T(1e-6)) {
  std::vector<T> weights;
  {
    Tape<T> probe(false);
    const Tensor<T> out = f(probe);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    weights.resize(out.size());
    for (auto& w : weights) w = static_cast<T>(normal(rng));
  }
  auto weighted_loss = [&](Tape<T>& tape) {
    const Tensor<T> out = f(tape);
    const Tensor<T> w = Tensor<T>::from_values(out.shape(), weights);
    return sum(tape, mul(tape, out, w));
  };

  for (auto t : inputs) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  Tape<T> tape;
  const Tensor<T> loss = weighted_loss(tape);
  tape.backward(loss);

  T worst = 0;
  for (auto t : inputs) {
    const std::vector<T> analytic = t.has_grad() ? t.grad() : std::vector<T>(t.size(), T(0));
    for (std::size_t i = 0; i < t.size(); ++i) {
      const T saved = t.data()[i];
      Tape<T> off(false);
      t.data()[i] = saved + fd_step;
      const std::vector<T> plus = f(off).data();
      t.data()[i] = saved - fd_step;
      const std::vector<T> minus = f(off).data();
      t.data()[i] = saved;
      T fd = 0;
      for (std::size_t o = 0; o < plus.size(); ++o) fd += weights[o] * (plus[o] - minus[o]);
      fd /= T(2) * fd_step;
      const T a = analytic[i];
      if (!std::isfinite(fd) || !std::isfinite(a)) return std::numeric_limits<T>::infinity();
      const T denom = std::max({std::abs(a), std::abs(fd), floor});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

}  // namespace dyneval
