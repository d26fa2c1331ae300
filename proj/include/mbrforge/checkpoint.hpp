// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mbrforge/error.hpp"
#include "mbrforge/tensor_store.hpp"

namespace mbrforge::checkpoint {

/// Elementwise mean of stores sharing names and shapes. Sums in double,
/// stores float; output order follows the first store.
inline TensorStore average_checkpoints(std::span<const TensorStore> stores) {
  if (stores.empty()) throw UsageError("averaging needs at least one checkpoint");
  const auto& first = stores.front();
  for (std::size_t s = 1; s < stores.size(); ++s) {
    if (stores[s].size() != first.size()) {
      throw DataError("checkpoint " + std::to_string(s) + " has " +
                      std::to_string(stores[s].size()) + " tensors, checkpoint 0 has " +
                      std::to_string(first.size()));
    }
    for (const auto& t : first.tensors()) {
      if (!stores[s].contains(t.name)) {
        throw DataError("tensor '" + t.name + "' missing from checkpoint " + std::to_string(s));
      }
      const auto& o = stores[s].at(t.name);
      if (o.shape != t.shape) {
        throw DataError("tensor '" + t.name + "' has shape [" + shape_to_string(o.shape) +
                        "] in checkpoint " + std::to_string(s) + ", expected [" +
                        shape_to_string(t.shape) + "]");
      }
    }
  }
  const double k = static_cast<double>(stores.size());
  TensorStore out;
  for (const auto& t : first.tensors()) {
    std::vector<double> acc(t.data.size(), 0.0);
    for (const auto& s : stores) {
      const auto& d = s.at(t.name).data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
    }
    std::vector<float> mean(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) mean[i] = static_cast<float>(acc[i] / k);
    out.add(t.name, t.shape, std::move(mean));
  }
  return out;
}

// --------------------------------------------------------------------------
// LoRA
// --------------------------------------------------------------------------

struct LoraTarget {
  std::string name;
  Tensor a;  // r x k
  Tensor b;  // d x r
};

struct LoraAdapter {
  std::vector<LoraTarget> targets;
  std::size_t rank = 0;
  double alpha = 1.0;

  double scale() const { return alpha / static_cast<double>(rank); }
};

inline constexpr std::string_view kLoraASuffix = ".lora_A";
inline constexpr std::string_view kLoraBSuffix = ".lora_B";

/// Reads an adapter stored as TSF pairs `<name>.lora_A` (r x k) and
/// `<name>.lora_B` (d x r). All targets must share one rank.
inline LoraAdapter adapter_from_store(const TensorStore& store, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw UsageError("LoRA alpha must be positive");
  LoraAdapter adapter;
  adapter.alpha = alpha;
  auto ends_with = [](const std::string& s, std::string_view suf) {
    return s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (const auto& t : store.tensors()) {
    if (ends_with(t.name, kLoraBSuffix)) {
      auto base = t.name.substr(0, t.name.size() - kLoraBSuffix.size());
      if (!store.contains(base + std::string(kLoraASuffix))) {
        throw DataError("adapter tensor '" + t.name + "' has no matching " + base +
                        std::string(kLoraASuffix));
      }
      continue;
    }
    if (!ends_with(t.name, kLoraASuffix)) {
      throw DataError("adapter tensor '" + t.name + "' is neither " + std::string(kLoraASuffix) +
                      " nor " + std::string(kLoraBSuffix));
    }
    auto base = t.name.substr(0, t.name.size() - kLoraASuffix.size());
    auto b_name = base + std::string(kLoraBSuffix);
    if (!store.contains(b_name)) {
      throw DataError("adapter tensor '" + t.name + "' has no matching " + b_name);
    }
    const auto& b = store.at(b_name);
    if (t.shape.size() != 2 || b.shape.size() != 2) {
      throw DataError("adapter matrices for '" + base + "' must be 2-D");
    }
    if (adapter.rank == 0) adapter.rank = t.shape[0];
    if (t.shape[0] != adapter.rank || b.shape[1] != adapter.rank) {
      throw DataError("adapter for '" + base + "' has rank " + std::to_string(t.shape[0]) + "/" +
                      std::to_string(b.shape[1]) + ", expected " + std::to_string(adapter.rank));
    }
    adapter.targets.push_back({base, t, b});
  }
  if (adapter.targets.empty()) throw DataError("adapter has no targets");
  return adapter;
}

/// W' = W + (alpha / r) * B * A for every target; other tensors are copied.
inline TensorStore lora_merge(const TensorStore& base, const LoraAdapter& adapter) {
  if (adapter.rank == 0) throw DataError("adapter rank must be positive");
  std::unordered_map<std::string, const LoraTarget*> by_name;
  for (const auto& t : adapter.targets) {
    if (!base.contains(t.name)) throw DataError("LoRA target '" + t.name + "' not in base model");
    const auto& w = base.at(t.name);
    const auto r = adapter.rank;
    if (w.shape.size() != 2) {
      throw DataError("LoRA target '" + t.name + "' has shape [" + shape_to_string(w.shape) +
                      "], expected a 2-D matrix");
    }
    const Shape want_a{r, w.shape[1]}, want_b{w.shape[0], r};
    if (t.a.shape != want_a) {
      throw DataError("LoRA A for '" + t.name + "': expected [" + shape_to_string(want_a) +
                      "], got [" + shape_to_string(t.a.shape) + "]");
    }
    if (t.b.shape != want_b) {
      throw DataError("LoRA B for '" + t.name + "': expected [" + shape_to_string(want_b) +
                      "], got [" + shape_to_string(t.b.shape) + "]");
    }
    if (!by_name.emplace(t.name, &t).second) {
      throw DataError("LoRA target '" + t.name + "' listed twice");
    }
  }
  const double scale = adapter.scale();
  TensorStore out;
  for (const auto& w : base.tensors()) {
    auto it = by_name.find(w.name);
    if (it == by_name.end()) {
      out.add(w);
      continue;
    }
    const auto& a = it->second->a.data;
    const auto& b = it->second->b.data;
    const auto d = w.shape[0], k = w.shape[1], r = adapter.rank;
    std::vector<float> merged(w.data);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        double delta = 0.0;
        for (std::size_t q = 0; q < r; ++q) {
          delta += static_cast<double>(b[i * r + q]) * static_cast<double>(a[q * k + j]);
        }
        delta *= scale;
        // skipping exact zeros keeps -0.0 weights bit-identical
        if (delta != 0.0) {
          merged[i * k + j] = static_cast<float>(static_cast<double>(w.data[i * k + j]) + delta);
        }
      }
    }
    out.add(w.name, w.shape, std::move(merged));
  }
  return out;
}

// --------------------------------------------------------------------------
// R-Drop
// --------------------------------------------------------------------------

inline constexpr double kRdropDefaultAlpha = 5.0;
inline constexpr double kProbFloor = 1e-12;

/// Validated probability distribution: non-negative, sums to 1 within 1e-6.
class ProbVector {
 public:
  explicit ProbVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw DataError("probability vector must not be empty");
    double sum = 0.0;
    for (double v : values_) {
      if (!std::isfinite(v) || v < 0.0) throw DataError("probabilities must be finite and >= 0");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw DataError("probabilities sum to " + std::to_string(sum) + ", expected 1");
    }
  }

  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

/// KL(p || q) with 0 * ln(0 / x) = 0. With `floor`, entries below 1e-12 are
/// raised to 1e-12 first; otherwise q_i = 0 < p_i is an error.
inline double kl_divergence(const ProbVector& p, const ProbVector& q, bool floor = false) {
  if (p.size() != q.size()) {
    throw DataError("distributions differ in length: " + std::to_string(p.size()) + " vs " +
                    std::to_string(q.size()));
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = p[i], qi = q[i];
    if (floor) {
      pi = std::max(pi, kProbFloor);
      qi = std::max(qi, kProbFloor);
    }
    if (pi == 0.0) continue;
    if (qi == 0.0) {
      throw DataError("infinite divergence: entry " + std::to_string(i) +
                      " is positive in one distribution and zero in the other");
    }
    kl += pi * std::log(pi / qi);
  }
  return kl;
}

/// Symmetric KL: (KL(p||q) + KL(q||p)) / 2.
inline double rdrop_penalty(const ProbVector& p, const ProbVector& q, bool floor = false) {
  double v = 0.5 * (kl_divergence(p, q, floor) + kl_divergence(q, p, floor));
  // rounding can leave tiny negatives for near-identical inputs
  return v < 0.0 ? 0.0 : v;
}

inline double rdrop_loss(const ProbVector& p, const ProbVector& q,
                         double reg_alpha = kRdropDefaultAlpha, bool floor = false) {
  return reg_alpha * rdrop_penalty(p, q, floor);
}

}  // namespace mbrforge::checkpoint
