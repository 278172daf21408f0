#pragma once

#include <functional>
#include <numeric>
#include <vector>

#include "paine/autograd.hpp"
#include "paine/rng.hpp"

namespace paine::testing {

inline std::vector<double> random_vec(Rng& rng, size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

// Finite-difference check harness: `build` maps leaf tensors (one per shape)
// to a scalar node. Returns max relative error against reverse-mode grads.
inline double fd_check(const std::vector<std::vector<int>>& shapes,
                       const std::function<Tensor(const std::vector<Tensor>&)>& build,
                       const std::vector<double>& x0, double h = 1e-5) {
  auto split = [&](const std::vector<double>& x, bool req) {
    std::vector<Tensor> ts;
    size_t off = 0;
    for (const auto& s : shapes) {
      size_t n = 1;
      for (int e : s) n *= static_cast<size_t>(e);
      ts.push_back(Tensor::from(s, std::vector<double>(x.begin() + static_cast<long>(off),
                                                       x.begin() + static_cast<long>(off + n)),
                                req));
      off += n;
    }
    return ts;
  };

  auto f = [&](const std::vector<double>& x) {
    NoGradGuard ng;
    return build(split(x, false)).item();
  };
  auto g = [&](const std::vector<double>& x) {
    std::vector<Tensor> ts = split(x, true);
    Tensor loss = build(ts);
    backward(loss);
    std::vector<double> out;
    for (auto& t : ts) {
      const auto& gr = t.grad();
      out.insert(out.end(), gr.begin(), gr.end());
    }
    return out;
  };
  return grad_check(f, g, x0, h);
}

inline size_t total_size(const std::vector<std::vector<int>>& shapes) {
  size_t n = 0;
  for (const auto& s : shapes) {
    size_t m = 1;
    for (int e : s) m *= static_cast<size_t>(e);
    n += m;
  }
  return n;
}

}  // namespace paine::testing
