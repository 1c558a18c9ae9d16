#pragma once

// Named parameter store. Entries are stable in memory (map nodes), so layers
// hold plain pointers. Non-trainable entries carry state such as batch-norm
// running statistics; they serialize but the optimizer skips them.

#include <cmath>
#include <map>
#include <random>
#include <string>

#include "dymn/tensor.hpp"

namespace dymn {

template <typename T>
class ParamStore {
 public:
  struct Entry {
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Entry* add(const std::string& name, TensorT<T> init, bool trainable = true) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    it->second.value = std::move(init);
    it->second.grad = TensorT<T>(it->second.value.shape);
    it->second.trainable = trainable;
    return &it->second;
  }

  Entry* find(const std::string& name) {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
  }

  Entry& at(const std::string& name) {
    Entry* e = find(name);
    if (!e) throw ConfigError("unknown parameter: " + name);
    return *e;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_)
      for (auto& g : e.grad.data) g = T(0);
  }

  std::int64_t count(bool trainable_only = true) const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_)
      if (!trainable_only || e.trainable) n += e.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, Entry> entries_;
};

// Kaiming-uniform fan-in initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <typename T>
TensorT<T> kaiming_uniform(Shape shape, std::int64_t fan_in, std::mt19937& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  TensorT<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace dymn
