#include "robomamba/optim.hpp"

#include <cmath>

namespace robomamba {

template <typename T>
void AdamW<T>::step(const ParamList<T>& params) {
  for (const auto& p : params) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (const T g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter group '" +
                           std::string(to_string(p.group)) + "' (" + p.name + ")");
      }
    }
  }
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, double(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, double(step_));
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    auto& st = state_[p.tensor.id()];
    const auto n = p.tensor.numel();
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * gi;
      st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = st.m[i] / c1;
      const double vhat = st.v[i] / c2;
      const double wi = w[i];
      w[i] = static_cast<T>(wi - config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) +
                                               config_.weight_decay * wi));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad(const ParamList<T>& params) const {
  for (const auto& p : params) p.tensor.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace robomamba
