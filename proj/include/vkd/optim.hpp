#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vkd/encoder.hpp"
#include "vkd/error.hpp"
#include "vkd/tensor.hpp"

namespace vkd {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double warmup_fraction = 0.1;  // linear warmup, then linear decay
  double trust_lo = 0.0;         // LAMB trust-ratio clip range
  double trust_hi = 10.0;

  void validate() const {
    if (lr <= 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0 ||
        weight_decay < 0 || trust_lo < 0 || trust_hi < trust_lo)
      fail("shape-mismatch", "invalid optimizer config");
  }
};

// biases and layer-norm gains are excluded from weight decay
inline bool decay_exempt(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const size_t n = std::char_traits<char>::length(suffix);
    return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
  };
  return ends_with(".bias") || ends_with(".gain");
}

template <typename S>
struct ParamViewT {
  std::string name;
  TensorPtrT<S> tensor;
};

template <typename S>
std::vector<ParamViewT<S>> views_of(ParamRegistryT<S>& registry) {
  std::vector<ParamViewT<S>> views;
  views.reserve(registry.size());
  for (auto& e : registry.entries()) views.push_back({e.name, e.tensor});
  return views;
}

// First/second-moment state for one family of tensors (all names unique).
// The step counter is global to the state; tensors that received no gradient
// in a step keep their moments untouched.
template <typename S>
class OptimStateT {
 public:
  explicit OptimStateT(OptimConfig config) : cfg_(config) { cfg_.validate(); }

  const OptimConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }
  const std::map<std::string, double>& last_trust_ratios() const { return trust_; }

  // diagnostics: smallest second-moment entry across all slots (>= 0 always)
  double min_second_moment() const {
    double lo = 0.0;
    bool first = true;
    for (const auto& [name, slot] : slots_)
      for (S v : slot.v) {
        if (first || static_cast<double>(v) < lo) lo = static_cast<double>(v);
        first = false;
      }
    return lo;
  }

  // LAMB: bias-corrected Adam direction plus decoupled weight decay, scaled
  // per tensor by the trust ratio ||theta|| / ||update|| clipped to the
  // configured range (1 when either norm vanishes).
  void lamb_step(const std::vector<ParamViewT<S>>& params, double lr) {
    step(params, lr, true);
  }

  // plain bias-corrected Adam with the same decay handling
  void adam_step(const std::vector<ParamViewT<S>>& params, double lr) {
    step(params, lr, false);
  }

 private:
  struct Slot {
    std::vector<S> m, v;
    const TensorT<S>* owner = nullptr;
  };

  void step(const std::vector<ParamViewT<S>>& params, double lr, bool use_trust) {
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    trust_.clear();
    for (const auto& view : params) {
      auto& tensor = *view.tensor;
      if (tensor.grad.empty()) continue;  // not part of this step's graph
      for (S g : tensor.grad)
        if (!std::isfinite(static_cast<double>(g)))
          fail("non-finite-grad", "gradient of " + view.name + " is not finite");

      auto& slot = slots_[view.name];
      if (slot.owner == nullptr) {
        slot.owner = &tensor;
        slot.m.assign(tensor.data.size(), S(0));
        slot.v.assign(tensor.data.size(), S(0));
      } else if (slot.owner != &tensor) {
        fail("registry-mismatch", "two tensors share the optimizer slot " + view.name);
      }

      const double decay = decay_exempt(view.name) ? 0.0 : cfg_.weight_decay;
      update_.resize(tensor.data.size());
      double wnorm_sq = 0.0, unorm_sq = 0.0;
      for (size_t i = 0; i < tensor.data.size(); ++i) {
        const double g = static_cast<double>(tensor.grad[i]);
        const double m = cfg_.beta1 * static_cast<double>(slot.m[i]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(slot.v[i]) + (1.0 - cfg_.beta2) * g * g;
        slot.m[i] = static_cast<S>(m);
        slot.v[i] = static_cast<S>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        const double w = static_cast<double>(tensor.data[i]);
        const double u = m_hat / (std::sqrt(v_hat) + cfg_.eps) + decay * w;
        update_[i] = u;
        wnorm_sq += w * w;
        unorm_sq += u * u;
      }
      double ratio = 1.0;
      if (use_trust) {
        const double wnorm = std::sqrt(wnorm_sq);
        const double unorm = std::sqrt(unorm_sq);
        ratio = (wnorm > 0.0 && unorm > 0.0)
                    ? std::clamp(wnorm / unorm, cfg_.trust_lo, cfg_.trust_hi)
                    : 1.0;
        trust_[view.name] = ratio;
      }
      const double scaled = lr * ratio;
      for (size_t i = 0; i < tensor.data.size(); ++i)
        tensor.data[i] = static_cast<S>(static_cast<double>(tensor.data[i]) - scaled * update_[i]);
    }
  }

  OptimConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
  std::map<std::string, double> trust_;
  std::vector<double> update_;
};

using OptimState = OptimStateT<float>;

// linear warmup to the peak rate over the first warmup fraction of steps,
// then linear decay (never reaching exactly zero)
inline double lr_at(int64_t step, int64_t total_steps, double peak, double warmup_fraction) {
  if (step < 1 || total_steps < 1) fail("shape-mismatch", "bad schedule query");
  const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(total_steps * warmup_fraction));
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * static_cast<double>(total_steps - step + 1) /
         static_cast<double>(total_steps - warmup + 1);
}

}  // namespace vkd
