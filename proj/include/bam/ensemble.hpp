#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bam/nn.hpp"

namespace bam {

/// Channel co-activation signature G = A A^T of a reshaped {C,H,W} feature
/// map (A is C x N with N = H*W). Normalizing by N keeps the downstream
/// scene-difference scalar independent of input resolution; the raw variant
/// stays available for ablation.
template <typename S>
struct GramSignature {
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> matrix;
};

template <typename S>
GramSignature<S> gram_matrix(const Tensor<S>& f_low, bool normalized = true) {
  if (f_low.rank() != 3) throw std::invalid_argument("gram: {C,H,W} expected");
  const int c = f_low.dim(0);
  const std::int64_t n = static_cast<std::int64_t>(f_low.dim(1)) * f_low.dim(2);
  auto a = f_low.mat(c, n);
  GramSignature<S> g;
  g.matrix.noalias() = a * a.transpose();
  if (normalized) g.matrix /= static_cast<S>(n);
  return g;
}

/// Scene-difference indicator: the Frobenius norm of the Gram difference.
/// Zero iff the two signatures coincide.
template <typename S>
S adjustment_factor(const GramSignature<S>& support, const GramSignature<S>& query) {
  if (support.matrix.rows() != query.matrix.rows())
    throw std::invalid_argument("adjustment_factor: channel mismatch");
  return (support.matrix - query.matrix).norm();
}

/// Running median of observed scene-difference values; used to squash an
/// unbounded psi into [0,1) via psi/(psi+median). Updated single-writer
/// during training, frozen for evaluation. Defaults to 1 before any
/// observation.
class PsiStat {
 public:
  void observe(double psi) {
    history_.push_back(psi);
    dirty_ = true;
  }

  double median() const {
    if (history_.empty()) return fallback_;
    if (dirty_) {
      sorted_ = history_;
      std::sort(sorted_.begin(), sorted_.end());
      dirty_ = false;
    }
    const std::size_t n = sorted_.size();
    const double m = (n % 2 == 1) ? sorted_[n / 2]
                                  : 0.5 * (sorted_[n / 2 - 1] + sorted_[n / 2]);
    return m > 1e-12 ? m : fallback_;
  }

  double squash(double psi) const { return psi / (psi + median()); }

  std::int64_t count() const { return static_cast<std::int64_t>(history_.size()); }

  /// Restore from a persisted summary (history itself is not stored).
  void restore(double median_value, std::int64_t count) {
    history_.clear();
    sorted_.clear();
    dirty_ = false;
    fallback_ = median_value > 1e-12 ? median_value : 1.0;
    restored_count_ = count;
  }

  std::int64_t restored_count() const { return restored_count_; }

 private:
  std::vector<double> history_;
  mutable std::vector<double> sorted_;
  mutable bool dirty_ = false;
  double fallback_ = 1.0;
  std::int64_t restored_count_ = 0;
};

/// The learnable fusion of the two learners. Both combiners are 1x1
/// two-input blends with weights (1, 0) at the prescribed initialization,
/// so the whole module starts as the identity on the meta prediction.
template <typename S>
class EnsembleModule {
 public:
  EnsembleModule(ParamStore<S>& params, bool identity_init, bool psi_enabled, Rng& rng)
      : psi_enabled_(psi_enabled) {
    Tensor<S> w_psi_init({2}), w_ens_init({2});
    if (identity_init) {
      w_psi_init.data[0] = S(1);
      w_psi_init.data[1] = S(0);
      w_ens_init.data[0] = S(1);
      w_ens_init.data[1] = S(0);
    } else {
      for (int i = 0; i < 2; ++i) {
        w_psi_init.data[i] = static_cast<S>(rng.normal() * 0.5);
        w_ens_init.data[i] = static_cast<S>(rng.normal() * 0.5);
      }
    }
    w_psi_ = params.add("ens/w_psi", std::move(w_psi_init));
    w_ens_ = params.add("ens/w_ens", std::move(w_ens_init));
  }

  /// F_psi: blend one meta channel with the broadcast squashed psi. The same
  /// weights serve the background and foreground applications. With psi
  /// disabled the conditioning input is zeroed: the combiner keeps its
  /// capacity but sees no scene-difference signal.
  Var<S> adjust(ParamUser<S>& p, Var<S> channel, Var<S> psi_squashed) const {
    Graph<S>& g = *channel.graph;
    const int h = channel.val().dim(1), w = channel.val().dim(2);
    Var<S> psi_map = psi_enabled_
                         ? broadcast_to_map(psi_squashed, h, w)
                         : g.constant(Tensor<S>::zeros({1, h, w}));
    return lincomb<S>({channel, psi_map}, p[w_psi_]);
  }

  /// F_ensemble + concatenation: background score blends the adjusted meta
  /// background with the base foreground evidence; the foreground score is
  /// the adjusted meta foreground. Output is an unnormalized 2-channel
  /// score map.
  Var<S> forward_scores(ParamUser<S>& p, Var<S> meta_prob2, Var<S> base_foreground,
                        Var<S> psi_squashed) const {
    Var<S> adj_bg = adjust(p, slice_channels(meta_prob2, 0, 1), psi_squashed);
    Var<S> adj_fg = adjust(p, slice_channels(meta_prob2, 1, 2), psi_squashed);
    Var<S> bg_score = lincomb<S>({adj_bg, base_foreground}, p[w_ens_]);
    return concat_channels<S>({bg_score, adj_fg});
  }

  bool psi_enabled() const { return psi_enabled_; }
  int w_psi_param() const { return w_psi_; }
  int w_ens_param() const { return w_ens_; }

 private:
  int w_psi_ = -1;
  int w_ens_ = -1;
  bool psi_enabled_ = true;
};

/// Total stage-2 objective: final-prediction cross-entropy plus
/// lambda-weighted meta loss.
template <typename S>
Var<S> total_loss(Var<S> final_prob2, Var<S> meta_prob2, const LabelMap& gt, S lambda) {
  Var<S> l_final = binary_cross_entropy_prob(slice_channels(final_prob2, 1, 2), gt);
  if (lambda == S(0)) return l_final;
  Var<S> l_meta = binary_cross_entropy_prob(slice_channels(meta_prob2, 1, 2), gt);
  return add(l_final, scale(l_meta, lambda));
}

/// Two FC layers turning the per-shot scene-difference vector into positive
/// fusion weights that sum to one. With the default zero second layer the
/// weights are uniform regardless of the input.
template <typename S>
class KshotReweighter {
 public:
  KshotReweighter(ParamStore<S>& params, int shots, int reduction, Rng& rng)
      : shots_(shots), reduction_(reduction) {
    if (shots < 1) throw std::invalid_argument("kshot: shots must be >= 1");
    if (reduction < 1 || shots % reduction != 0)
      throw std::invalid_argument("kshot: shots must be divisible by the reduction factor");
    const int hidden = shots / reduction;
    Tensor<S> w1({shots, hidden});
    if (hidden == shots) {
      for (int i = 0; i < shots; ++i) w1.data[i * hidden + i] = S(1);
    } else {
      w1 = he_normal<S>({shots, hidden}, shots, rng);
    }
    w1_ = params.add("ens/kshot/w1", std::move(w1));
    w2_ = params.add("ens/kshot/w2", Tensor<S>::zeros({hidden, shots}));
  }

  /// eta = softmax(w2^T relu(w1^T psi_t)).
  Var<S> weights(Graph<S>& g, ParamUser<S>& p, const std::vector<S>& psi_values) const {
    if (static_cast<int>(psi_values.size()) != shots_)
      throw std::invalid_argument("kshot: psi vector length mismatch");
    Tensor<S> psi_t({shots_});
    for (int i = 0; i < shots_; ++i) psi_t.data[i] = psi_values[static_cast<std::size_t>(i)];
    Var<S> x = g.constant(std::move(psi_t));
    Var<S> hidden = relu(matvec_t(p[w1_], x));
    return softmax_vec(matvec_t(p[w2_], hidden));
  }

  int shots() const { return shots_; }

 private:
  int shots_ = 1;
  int reduction_ = 1;
  int w1_ = -1, w2_ = -1;
};

}  // namespace bam
