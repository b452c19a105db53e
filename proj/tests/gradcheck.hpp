#pragma once

// Central finite-difference gradient verification, double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rawgat/tensor.hpp"

namespace rawgat::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string detail;  // first offending component, empty when ok
};

// `f` must rebuild the graph from the leaves' current data on every call and
// return a scalar loss. Each leaf component is nudged by +-step; the centered
// difference is compared to the analytic gradient with relative error
// |fd - an| / max(1, |fd|, |an|).
inline GradCheckResult grad_check(const std::function<Tensor64()>& f,
                                  std::vector<Tensor64> leaves,
                                  double step = 1e-5, double tol = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves)
    analytic.push_back(l.has_grad() ? l.grad()
                                    : std::vector<double>(l.numel(), 0.0));

  GradCheckResult res;
  NoGradGuard ng;  // finite differences only need forward values
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double up = f().item();
      vals[i] = keep - step;
      const double dn = f().item();
      vals[i] = keep;
      const double fd = (up - dn) / (2.0 * step);
      const double an = analytic[li][i];
      const double rel = std::abs(fd - an) /
                         std::max({1.0, std::abs(fd), std::abs(an)});
      if (rel > res.worst_rel) res.worst_rel = rel;
      if (rel > tol && res.ok) {
        res.ok = false;
        res.detail = "leaf " + std::to_string(li) + " component " +
                     std::to_string(i) + ": fd=" + std::to_string(fd) +
                     " analytic=" + std::to_string(an) +
                     " rel=" + std::to_string(rel);
      }
    }
  }
  return res;
}

}  // namespace rawgat::testing
