#include <cmath>

#include "pdit/error.hpp"
#include "pdit/tensor.hpp"

namespace pdit {

AdamState::AdamState(AdamHyper hyper, std::span<const Tensor> params) : hyper_(hyper) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor& p : params) {
    m_.emplace_back(p.shape(), 0.0f);
    v_.emplace_back(p.shape(), 0.0f);
  }
}

void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m_.size())
    throw InvalidArgument("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.m_[i].shape())
      throw InvalidArgument("adam_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                            shape_string(params[i].shape()) + " vs grad " + shape_string(grads[i].shape()));

  const AdamHyper& h = state.hyper_;
  ++state.step_;
  const double t = static_cast<double>(state.step_);
  const float c1 = static_cast<float>(1.0 - std::pow(double(h.beta1), t));
  const float c2 = static_cast<float>(1.0 - std::pow(double(h.beta2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].ptr();
    const float* g = grads[i].ptr();
    float* m = state.m_[i].ptr();
    float* v = state.v_[i].ptr();
    for (std::size_t j = 0, n = params[i].size(); j < n; ++j) {
      m[j] = h.beta1 * m[j] + (1.0f - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0f - h.beta2) * g[j] * g[j];
      const float mhat = m[j] / c1;
      const float vhat = v[j] / c2;
      p[j] -= h.lr * mhat / (std::sqrt(vhat) + h.epsilon);
    }
  }
}

}  // namespace pdit
