#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bam/autodiff.hpp"
#include "bam/rng.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Named parameter dictionary shared by every network head. Names are
/// slash-paths ("encoder/b1/conv0/w") so whole subsystems can be frozen or
/// hashed by prefix.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> value;
    Tensor<S> momentum;
    bool trainable = true;
  };

  int add(const std::string& name, Tensor<S> init, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    Entry e;
    e.name = name;
    e.momentum = Tensor<S>::zeros(init.shape);
    e.value = std::move(init);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    const int id = static_cast<int>(entries_.size()) - 1;
    index_[name] = id;
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Entry& entry(int id) { return entries_.at(static_cast<std::size_t>(id)); }
  const Entry& entry(int id) const { return entries_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return entries_.size(); }

  void set_trainable_prefix(const std::string& prefix, bool flag) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) e.trainable = flag;
  }

  bool prefix_trainable(const std::string& prefix) const {
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0 && e.trainable) return true;
    return false;
  }

  /// FNV-1a over raw value bytes of all params under a prefix; order is the
  /// registration order, so equal hashes mean bit-identical parameters.
  std::uint64_t hash_prefix(const std::string& prefix) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& e : entries_) {
      if (e.name.rfind(prefix, 0) != 0) continue;
      const unsigned char* bytes = reinterpret_cast<const unsigned char*>(e.value.data.data());
      const std::size_t n = static_cast<std::size_t>(e.value.size()) * sizeof(S);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  Grads<S> make_grads() const { return Grads<S>(entries_.size()); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

/// Binds a graph to a store, creating at most one leaf per parameter so
/// shared weights accumulate through a single node. `all_frozen` builds an
/// inference-only view: no leaf requests gradients and the reverse sweep
/// records nothing.
template <typename S>
class ParamUser {
 public:
  ParamUser(Graph<S>& graph, const ParamStore<S>& store, bool all_frozen = false)
      : graph_(&graph), store_(&store), frozen_(all_frozen), leaves_(store.size(), Var<S>{}) {}

  Var<S> operator[](int id) {
    Var<S>& v = leaves_.at(static_cast<std::size_t>(id));
    if (!v.valid()) {
      const auto& e = store_->entry(id);
      v = graph_->param(e.value, id, !frozen_ && e.trainable);
    }
    return v;
  }

 private:
  Graph<S>* graph_;
  const ParamStore<S>* store_;
  bool frozen_ = false;
  std::vector<Var<S>> leaves_;
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> he_normal(std::vector<int> shape, std::int64_t fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data[i] = static_cast<S>(rng.normal() * std_dev);
  return t;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay
// ---------------------------------------------------------------------------

template <typename S>
struct SgdOptions {
  S lr = S(0.01);
  S momentum = S(0.9);
  S weight_decay = S(1e-4);
};

template <typename S>
void sgd_step(ParamStore<S>& store, const Grads<S>& grads, const SgdOptions<S>& opt) {
  if (!(opt.lr > S(0))) throw std::invalid_argument("sgd: lr must be positive");
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(static_cast<int>(i));
    if (!e.trainable) continue;
    const auto& gslot = grads.slots[i];
    if (gslot.size() == 0) continue;
    e.momentum.data = opt.momentum * e.momentum.data +
                      (gslot.data + opt.weight_decay * e.value.data);
    e.value.data -= opt.lr * e.momentum.data;
  }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. A non-positive max disables clipping.
template <typename S>
double clip_grad_norm(Grads<S>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& slot : grads.slots)
    if (slot.size()) sq += static_cast<double>((slot.data * slot.data).sum());
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& slot : grads.slots)
      if (slot.size()) slot.data *= scale;
  }
  return norm;
}

/// Polynomial decay schedule: lr0 * (1 - t/T)^power.
template <typename S>
S poly_lr(S base_lr, std::int64_t step, std::int64_t total_steps, double power = 0.9) {
  if (total_steps <= 0) return base_lr;
  const double f = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<S>(base_lr * std::pow(std::max(f, 0.0), power));
}

// ---------------------------------------------------------------------------
// Conv building blocks
// ---------------------------------------------------------------------------

/// conv3x3 -> group norm -> ReLU unit. Registration and forward are split so
/// the same parameters serve any number of graphs.
template <typename S>
struct ConvUnit {
  int w = -1, b = -1, gamma = -1, beta = -1;
  ConvSpec spec;
  int groups = 1;

  static ConvUnit create(ParamStore<S>& ps, const std::string& prefix, int in_ch,
                         int out_ch, int kernel, ConvSpec spec, Rng& rng,
                         int norm_groups) {
    ConvUnit u;
    u.spec = spec;
    u.groups = norm_groups;
    const std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * kernel * kernel;
    u.w = ps.add(prefix + "/w", he_normal<S>({out_ch, in_ch, kernel, kernel}, fan_in, rng));
    u.b = ps.add(prefix + "/b", Tensor<S>::zeros({out_ch}));
    if (norm_groups > 0) {
      u.gamma = ps.add(prefix + "/gamma", Tensor<S>::full({out_ch}, S(1)));
      u.beta = ps.add(prefix + "/beta", Tensor<S>::zeros({out_ch}));
    }
    return u;
  }

  Var<S> forward(ParamUser<S>& p, Var<S> x, bool with_relu = true) const {
    Var<S> y = conv2d(x, p[w], p[b], spec);
    if (gamma >= 0) y = group_norm(y, p[gamma], p[beta], groups);
    return with_relu ? relu(y) : y;
  }
};

/// Plain conv (no norm, no activation) for projection heads.
template <typename S>
struct ConvProj {
  int w = -1, b = -1;
  ConvSpec spec;

  static ConvProj create(ParamStore<S>& ps, const std::string& prefix, int in_ch,
                         int out_ch, int kernel, ConvSpec spec, Rng& rng,
                         bool zero_init = false) {
    ConvProj u;
    u.spec = spec;
    const std::int64_t fan_in = static_cast<std::int64_t>(in_ch) * kernel * kernel;
    Tensor<S> wt = zero_init ? Tensor<S>::zeros({out_ch, in_ch, kernel, kernel})
                             : he_normal<S>({out_ch, in_ch, kernel, kernel}, fan_in, rng);
    u.w = ps.add(prefix + "/w", std::move(wt));
    u.b = ps.add(prefix + "/b", Tensor<S>::zeros({out_ch}));
    return u;
  }

  Var<S> forward(ParamUser<S>& p, Var<S> x) const {
    return conv2d(x, p[w], p[b], spec);
  }
};

}  // namespace bam
