#include "sbd/params.hpp"

#include <algorithm>
#include <cmath>

namespace sbd {

template <typename T>
void ParamStore<T>::add(std::string name, Tensor<T> value) {
  if (by_name_.contains(name)) throw UsageError("duplicate parameter name '" + name + "'");
  by_name_.emplace(name, slots_.size());
  Slot s;
  s.name = std::move(name);
  s.grad = Tensor<T>(value.shape());
  s.m = Tensor<T>(value.shape());
  s.v = Tensor<T>(value.shape());
  s.value = std::move(value);
  slots_.push_back(std::move(s));
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return by_name_.find(name) != by_name_.end();
}

template <typename T>
std::size_t ParamStore<T>::index(std::string_view name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
std::size_t ParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& s : slots_) s.grad.fill(T(0));
}

double scheduled_lr(const AdamWConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps <= 0) return cfg.lr;
  const double frac = static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  return cfg.lr * std::min(1.0, frac);
}

template <typename T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& cfg, double lr) {
  for (auto& s : store.slots()) {
    s.steps += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.steps));
    for (std::size_t i = 0; i < s.value.size(); ++i) {
      const double g = s.grad[i];
      const double m = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
      s.m[i] = static_cast<T>(m);
      s.v[i] = static_cast<T>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      const double p = s.value[i];
      s.value[i] = static_cast<T>(p - lr * (update + cfg.weight_decay * p));
    }
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template void adamw_step<float>(ParamStore<float>&, const AdamWConfig&, double);
template void adamw_step<double>(ParamStore<double>&, const AdamWConfig&, double);

}  // namespace sbd
