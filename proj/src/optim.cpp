#include "xcot/optim.hpp"

#include "xcot/error.hpp"

namespace xcot {

double global_norm(std::span<const float> grad) {
  double sq = 0;
  for (float g : grad) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

double Adam::step(std::span<float> params, std::span<float> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw Error("optimizer state does not match parameter count");
  }
  const double norm = global_norm(grad);
  if (config_.clip_norm > 0 && norm > config_.clip_norm) {
    const auto s = static_cast<float>(config_.clip_norm / (norm + 1e-6));
    for (auto& g : grad) g *= s;
  }
  ++t_;
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto c1 = static_cast<float>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
  const auto c2 = static_cast<float>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
  const auto eps = static_cast<float>(config_.eps);
  const auto rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0f - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0f - b2) * grad[i] * grad[i];
    const float mhat = m_[i] / c1;
    const float vhat = v_[i] / c2;
    params[i] -= rate * mhat / (std::sqrt(vhat) + eps);
  }
  return norm;
}

}  // namespace xcot
