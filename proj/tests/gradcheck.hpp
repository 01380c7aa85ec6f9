#pragma once

// Finite-difference oracle for reverse-mode gradients. The reference loss is
// evaluated in extended precision (long double) with a five-point central
// stencil, independently of the backward pass under test.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rgbdvit/autograd.hpp"

namespace rgbdvit::oracle {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

using OracleLoss = std::function<long double(const nn::ParamMap<long double>&)>;

template <class T>
nn::ParamMap<long double> widen(const nn::ParamMap<T>& p) {
  nn::ParamMap<long double> out;
  for (const auto& [k, v] : p) out.emplace(k, v.template cast<long double>());
  return out;
}

// Compares `analytic` against central differences of `loss` at `params` on
// up to `per_tensor` sampled entries of every tensor. Relative error is
// |a - n| / (|n| + 1e-8).
template <class T>
GradCheckReport gradcheck(const nn::ParamMap<T>& params, const nn::ParamMap<T>& analytic, const OracleLoss& loss,
                          long double step = 1e-3L, std::size_t per_tensor = 6, std::uint64_t seed = 7) {
  GradCheckReport report;
  auto wide = widen(params);
  std::mt19937_64 rng(seed);
  for (auto& [path, tensor] : wide) {
    std::vector<std::size_t> idx(tensor.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    for (std::size_t i : idx) {
      const long double orig = tensor.data[i];
      auto eval = [&](long double delta) {
        tensor.data[i] = orig + delta;
        long double l = loss(wide);
        tensor.data[i] = orig;
        return l;
      };
      const long double h = step;
      long double numeric = (-eval(2 * h) + 8 * eval(h) - 8 * eval(-h) + eval(-2 * h)) / (12 * h);
      double a = static_cast<double>(analytic.at(path).data[i]);
      double n = static_cast<double>(numeric);
      double rel = std::abs(a - n) / (std::abs(n) + 1e-8);
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = path + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(n);
      }
    }
  }
  return report;
}

}  // namespace rgbdvit::oracle
