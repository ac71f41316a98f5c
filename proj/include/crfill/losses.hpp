#pragma once

#include <functional>

#include "crfill/nets.hpp"
#include "crfill/patchops.hpp"

namespace crfill {

struct LossWeights {
  double lambda = 0.5;  // CR term
  double beta = 1.5;    // L1 term
  double alpha = 10.0;  // softmax sharpness of patch replacement

  /// Throws std::invalid_argument unless lambda >= 0, beta >= 0, alpha > 0.
  void validate() const;
};

/// Score map of a (composited) image.
template <typename T>
using Discriminate = std::function<Var<T>(const Var<T>& image)>;

/// Aux(U) given the similarity map; the batch of (u, mask) may be a subset of the original batch.
template <typename T>
using Reconstruct = std::function<Var<T>(const Var<T>& u, const Tensor<T>& mask, const SimilarityMap<T>& sim)>;

/// mean ReLU(1 - real) + mean ReLU(1 + fake).
template <typename T>
Var<T> d_loss(const Var<T>& real_scores, const Var<T>& fake_scores);

template <typename T>
struct InpaintLoss {
  Var<T> adversarial;  // mean ReLU(1 - D(Y (x) M + U))
  Var<T> l1;           // mean |Y - X| (unweighted)
  Var<T> total;        // adversarial + beta * l1
};

/// L(Y). X is a constant target.
template <typename T>
InpaintLoss<T> g_inpaint_loss(const Var<T>& y, const Var<T>& u, const Tensor<T>& mask, const Tensor<T>& x,
                              const Discriminate<T>& discriminate, T beta);

template <typename T>
struct CrLoss {
  InpaintLoss<T> terms;  // undefined when every item was skipped
  Var<T> value;          // L(Aux(U)) averaged over the items that were not skipped
  std::vector<bool> skipped;
  bool all_skipped() const;
};

/// L_CR = L(Aux(U)). Items whose known set is empty are dropped; if all are, the value is 0.
template <typename T>
CrLoss<T> cr_loss(const Var<T>& u, const Tensor<T>& mask, const Tensor<T>& x, const SimilarityMap<T>& sim,
                  const Reconstruct<T>& reconstruct, const Discriminate<T>& discriminate, T beta);

/// L(Y) + lambda * L_CR.
template <typename T>
Var<T> g_total_loss(const Var<T>& inpaint, const Var<T>& cr, T lambda);

/// Coarse-stage objective: beta * mean |coarse - X|, nothing adversarial.
template <typename T>
Var<T> coarse_loss(const Var<T>& coarse, const Tensor<T>& x, T beta);

}  // namespace crfill
