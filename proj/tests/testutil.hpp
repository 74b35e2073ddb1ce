// Helpers shared by the test binaries. Requires doctest to be included first.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "contourseg/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
  const double denom = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / denom;
}

inline contourseg::Tensor random_tensor(contourseg::Shape shape, contourseg::Rng& rng,
                                        double lo, double hi, bool requires_grad = true) {
  std::vector<double> data(contourseg::shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return contourseg::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Reduces any op output to a scalar through a fixed random probe so a
// finite-difference check exercises every output element independently.
inline contourseg::Tensor probe_sum(const contourseg::Tensor& y, std::uint64_t seed) {
  contourseg::Rng rng(seed);
  std::vector<double> probe(y.numel());
  for (double& v : probe) v = rng.uniform(-1.0, 1.0);
  return contourseg::sum(
      contourseg::mul(y, contourseg::Tensor::from_data(y.shape(), std::move(probe))));
}

using Builder = std::function<contourseg::Tensor(const std::vector<contourseg::Tensor>&)>;

// Analytic gradients from the tape vs central finite differences on every
// element of every input.
inline void gradcheck(const Builder& f, std::vector<contourseg::Tensor> inputs,
                      double tol = 1e-6) {
  contourseg::GradTape tape;
  {
    contourseg::TapeScope scope(tape);
    contourseg::Tensor loss = f(inputs);
    REQUIRE(loss.numel() == 1);
    tape.backward(loss);
  }
  const double h = 1e-5;
  for (contourseg::Tensor& in : inputs) {
    REQUIRE(in.has_grad());
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double analytic = in.grad()[i];
      const double orig = in.data()[i];
      in.mutable_data()[i] = orig + h;
      const double fp = f(inputs).item();
      in.mutable_data()[i] = orig - h;
      const double fm = f(inputs).item();
      in.mutable_data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      INFO("element ", i, ": analytic ", analytic, " numeric ", numeric);
      CHECK(rel_err(analytic, numeric) < tol);
    }
  }
}

}  // namespace testutil
