#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssmrank/matrix.hpp"
#include "ssmrank/model.hpp"

namespace ssmrank::testing {

inline Matrix<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(r, c);
  for (auto& v : m.storage()) v = u(rng);
  return m;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  std::vector<std::string> failures;  // first few only
};

// Central differences over every parameter entry. An entry's error is
// |analytic - numeric| divided by the largest numeric magnitude in the same
// tensor (floored at 1e-6), so entries whose true gradient is zero are judged
// against their tensor's scale rather than against rounding noise.
inline GradCheckReport check_model_gradients(ModelParams<double>& params, const ModelConfig& cfg,
                                             std::span<const int> ids, const Matrix<double>& hidden_weights,
                                             double h = 1e-5, double tol = 1e-4) {
  auto loss = [&] {
    auto tr = forward<double>(ids, params, cfg, {false, nullptr});
    double s = tr.score_value();
    const auto& hv = tr.hidden_value();
    for (std::size_t i = 0; i < hv.size(); ++i) s += hidden_weights[i] * hv[i];
    return s;
  };
  params.zero_grad();
  {
    auto tr = forward<double>(ids, params, cfg);
    backward(tr, Upstream<double>{hidden_weights, 1.0}, params);
  }
  GradCheckReport rep;
  for (auto& p : params) {
    std::vector<double> num(p.value.size());
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = loss();
      p.value[i] = keep - h;
      const double dn = loss();
      p.value[i] = keep;
      num[i] = (up - dn) / (2 * h);
    }
    double scale = 1e-6;
    for (double v : num) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double rel = std::abs(p.grad[i] - num[i]) / scale;
      ++rep.checked;
      rep.worst = std::max(rep.worst, rel);
      if (rel < tol) {
        ++rep.passed;
      } else if (rep.failures.size() < 10) {
        rep.failures.push_back(p.name + "[" + std::to_string(i) + "] analytic " + std::to_string(p.grad[i]) +
                               " numeric " + std::to_string(num[i]));
      }
    }
  }
  return rep;
}

}  // namespace ssmrank::testing
