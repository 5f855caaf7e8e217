#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sbd/tensor.hpp"

namespace sbd {

// Named parameters plus their gradients and Adam moments. Insertion order is
// preserved so checkpoints and optimizer sweeps are deterministic.
template <typename T>
class ParamStore {
 public:
  struct Slot {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m;
    Tensor<T> v;
    std::int64_t steps = 0;
  };

  void add(std::string name, Tensor<T> value);

  bool contains(std::string_view name) const;
  std::size_t index(std::string_view name) const;

  Tensor<T>& value(std::string_view name) { return slots_[index(name)].value; }
  const Tensor<T>& value(std::string_view name) const { return slots_[index(name)].value; }
  Tensor<T>& grad(std::string_view name) { return slots_[index(name)].grad; }
  const Tensor<T>& grad(std::string_view name) const { return slots_[index(name)].grad; }

  Slot& slot(std::size_t i) { return slots_[i]; }
  const Slot& slot(std::size_t i) const { return slots_[i]; }
  std::size_t size() const { return slots_.size(); }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

  std::size_t numel() const;
  void zero_grad();

  // Copy values into another precision; optimizer state is reset.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& s : slots_) out.add(s.name, s.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Slot> slots_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
};

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t warmup_steps = 100;
};

// Linear warmup over the first warmup_steps updates, then constant.
// `step` is the 0-based index of the update about to be applied.
double scheduled_lr(const AdamWConfig& cfg, std::int64_t step);

// Decoupled weight decay Adam:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
void adamw_step(ParamStore<T>& store, const AdamWConfig& cfg, double lr);

}  // namespace sbd
