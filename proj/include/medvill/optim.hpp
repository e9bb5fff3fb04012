#pragma once

#include "medvill/params.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>

namespace medvill {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Decay applies to tensors whose name ends
/// in ".weight"; embedding tables, biases and norm parameters are not decayed.
template <typename T>
class AdamW {
 public:
  using Filter = std::function<bool(const std::string&)>;

  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  /// One update from `grads`. Tensors without a gradient entry, or rejected
  /// by `trainable`, are left untouched.
  void step(ModelParams<T>& params, const std::map<std::string, Matrix<T>>& grads, const Filter& trainable = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& [name, g] : grads) {
      if (trainable && !trainable(name)) continue;
      Matrix<T>& p = params.at(name);
      if (g.rows() != p.rows() || g.cols() != p.cols()) throw NumericError("gradient shape mismatch for " + name);
      if (!g.allFinite()) throw NumericError("non-finite gradient for " + name);
      auto [mi, m_new] = m_.try_emplace(name, Matrix<T>::Zero(p.rows(), p.cols()));
      auto [vi, v_new] = v_.try_emplace(name, Matrix<T>::Zero(p.rows(), p.cols()));
      Matrix<T>& m = mi->second;
      Matrix<T>& v = vi->second;
      m = static_cast<T>(cfg_.beta1) * m + static_cast<T>(1.0 - cfg_.beta1) * g;
      v = static_cast<T>(cfg_.beta2) * v + static_cast<T>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      if (cfg_.lr == 0.0) continue;
      if (cfg_.weight_decay > 0.0 && decays(name)) p *= static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
      const T step = static_cast<T>(cfg_.lr / c1);
      const T v_corr = static_cast<T>(1.0 / c2);
      p.array() -= step * m.array() / ((v.array() * v_corr).sqrt() + static_cast<T>(cfg_.eps));
    }
  }

  int steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  static bool decays(const std::string& name) {
    static const std::string suffix = ".weight";
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

 private:
  AdamWConfig cfg_;
  int t_ = 0;
  std::map<std::string, Matrix<T>> m_;
  std::map<std::string, Matrix<T>> v_;
};

}  // namespace medvill
