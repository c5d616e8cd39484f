#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "scalegrpo/error.hpp"
#include "scalegrpo/policy.hpp"

namespace scalegrpo {

/// Adam moments stored as float so that a checkpoint captures them exactly.
struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;

  bool empty() const noexcept { return step == 0; }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void adam_step(PolicyParams& params, AdamState& st, std::span<const double> grad, const AdamHyper& h) {
  const std::size_t n = params.values.size();
  if (grad.size() != n) throw InvalidArgument("gradient size does not match the parameters");
  if (st.m.empty()) {
    st.m.assign(n, 0.0f);
    st.v.assign(n, 0.0f);
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    const double m = h.beta1 * st.m[i] + (1.0 - h.beta1) * g;
    const double v = h.beta2 * st.v[i] + (1.0 - h.beta2) * g * g;
    st.m[i] = static_cast<float>(m);
    st.v[i] = static_cast<float>(v);
    const double update = h.lr * (m / c1) / (std::sqrt(v / c2) + h.eps);
    params.values[i] = static_cast<float>(params.values[i] - update);
  }
}

}  // namespace scalegrpo
